use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::interpreter::{collect_samples, reconstruct_grid, train_decoder, CollectConfig, MetricsReport};
use crate::policy::{CommMode, ParamAssignment, Policy};
use crate::trainer::{run_phase, MetricsRecord, Phase, PhaseSpec};

use super::config::ExperimentConfig;
use super::eval::evaluate_checkpoint;
use super::manifest::RunManifest;
use super::plot::{eval_series, training_plot, Plot};
use super::table::{render_results_table, Column, EvalRecord};
use super::HarnessError;

/// One training run inside the pipeline.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage {
    pub name: &'static str,
    pub phase: Phase,
    pub mode: CommMode,
    pub parent: Option<&'static str>,
    pub column: Column,
}

pub fn stages(cfg: &ExperimentConfig) -> Vec<Stage> {
    let has = |m| cfg.comm_variants.contains(&m);
    let si = cfg.phases.contains(&Phase::SelfInterested);
    let mut v = Vec::new();
    if cfg.phases.contains(&Phase::Cooperative) {
        if has(CommMode::Full) || si {
            v.push(Stage {
                name: "coop_full",
                phase: Phase::Cooperative,
                mode: CommMode::Full,
                parent: None,
                column: Column::CoopComms,
            });
        }
        if has(CommMode::NoComms) {
            v.push(Stage {
                name: "coop_no_comms",
                phase: Phase::Cooperative,
                mode: CommMode::NoComms,
                parent: None,
                column: Column::CoopNoComms,
            });
        }
    }
    if si {
        v.push(Stage {
            name: "si_full",
            phase: Phase::SelfInterested,
            mode: CommMode::Full,
            parent: Some("coop_full"),
            column: Column::SiAdvComms,
        });
        if has(CommMode::MaskSiOutgoing) {
            v.push(Stage {
                name: "si_mask",
                phase: Phase::SelfInterested,
                mode: CommMode::MaskSiOutgoing,
                parent: Some("coop_full"),
                column: Column::SiNoAdvComms,
            });
        }
    }
    if cfg.phases.contains(&Phase::Readapt) {
        v.push(Stage {
            name: "readapt",
            phase: Phase::Readapt,
            mode: CommMode::Full,
            parent: Some("si_full"),
            column: Column::ReadaptAdvComms,
        });
    }
    v
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed{}", seed))
}

pub fn checkpoint_path(out: &Path, seed: u64, stage: &str) -> PathBuf {
    seed_dir(out, seed).join(format!("{}.ckpt", stage))
}

pub fn eval_seed(seed: u64) -> u64 {
    10_000 + seed
}

fn stage_seed(seed: u64, idx: usize) -> u64 {
    seed.wrapping_mul(1_000).wrapping_add(idx as u64)
}

/// Loads a checkpoint if it exists and belongs to `manifest`.
pub fn load_matching(path: &Path, manifest: &str) -> Option<Policy> {
    let p = Policy::load(path).ok()?;
    (p.manifest.as_deref() == Some(manifest)).then_some(p)
}

/// Trains (or reuses) a single stage for one seed and returns its policy.
pub fn train_stage(
    cfg: &ExperimentConfig,
    manifest: &RunManifest,
    out: &Path,
    seed: u64,
    stage: &Stage,
    idx: usize,
    log: &mut dyn FnMut(&str),
) -> Result<Policy, HarnessError> {
    let ckpt = checkpoint_path(out, seed, stage.name);
    if let Some(p) = load_matching(&ckpt, &manifest.hash) {
        log(&format!("seed {} {}: reusing {}", seed, stage.name, ckpt.display()));
        return Ok(p);
    }
    let parent = match stage.parent {
        None => None,
        Some(parent) => {
            let pp = checkpoint_path(out, seed, parent);
            Some(
                load_matching(&pp, &manifest.hash)
                    .ok_or_else(|| HarnessError::MissingCheckpoint(pp.display().to_string()))?,
            )
        }
    };
    train_stage_from(cfg, manifest, out, seed, stage, idx, parent, log)
}

/// Trains one stage starting from `parent` (required for the
/// self-interested and re-adaptation phases) and saves the checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn train_stage_from(
    cfg: &ExperimentConfig,
    manifest: &RunManifest,
    out: &Path,
    seed: u64,
    stage: &Stage,
    idx: usize,
    parent: Option<Policy>,
    log: &mut dyn FnMut(&str),
) -> Result<Policy, HarnessError> {
    let ckpt = checkpoint_path(out, seed, stage.name);
    fs::create_dir_all(seed_dir(out, seed))?;
    let env = cfg.phase_env();
    let mut policy = match (stage.phase, parent) {
        (Phase::Cooperative, None) => Policy::init(
            cfg.scale.policy_config(&env),
            ParamAssignment::cooperative(env.n_agents),
            seed,
        )?,
        (Phase::Cooperative, Some(p)) => p,
        (Phase::SelfInterested, Some(p)) => match p.assignment.si_agent() {
            Some(_) => p,
            None => p.introduce_self_interested(cfg.si_agent, seed.wrapping_add(17))?,
        },
        (Phase::Readapt, Some(p)) if p.assignment.si_agent().is_some() => p,
        (ph, _) => {
            return Err(HarnessError::MissingCheckpoint(format!(
                "phase {} needs a prior {} checkpoint",
                ph.name(),
                if ph == Phase::Readapt { "self-interested" } else { "cooperative" }
            )))
        }
    };
    policy.env = Some(env.clone());
    policy.manifest = Some(manifest.hash.clone());
    let spec = PhaseSpec {
        phase: stage.phase,
        env,
        mode: stage.mode,
        total_steps: stage.phase.default_steps(&cfg.trainer),
        seed: stage_seed(seed, idx),
    };
    let metrics_path = seed_dir(out, seed).join(format!("{}.metrics.jsonl", stage.name));
    let mut f = std::io::BufWriter::new(fs::File::create(&metrics_path)?);
    let name = stage.name;
    let started = std::time::Instant::now();
    run_phase(&mut policy, &spec, &cfg.trainer, &mut |r: &MetricsRecord| {
        writeln!(f, "{}", r.to_jsonl())?;
        if r.iteration % 10 == 0 {
            log(&format!(
                "seed {} {} it {} steps {} coop {:.3} si {} ({:.0}s)",
                seed,
                name,
                r.iteration,
                r.env_steps,
                r.mean_return_coop,
                r.mean_return_si.map_or("-".into(), |v| format!("{:.3}", v)),
                started.elapsed().as_secs_f64()
            ));
        }
        Ok(())
    })?;
    f.flush()?;
    policy.save(&ckpt)?;
    Ok(policy)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, HarnessError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| HarnessError::Format(e.to_string())))
        .collect()
}

/// Evaluates a stage's checkpoint in its column's communication mode.
pub fn eval_stage(
    cfg: &ExperimentConfig,
    manifest: &RunManifest,
    policy: &Policy,
    out: &Path,
    seed: u64,
    stage: &Stage,
) -> Result<EvalRecord, HarnessError> {
    let path = seed_dir(out, seed).join(format!("{}.eval.json", stage.name));
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(r) = serde_json::from_str::<EvalRecord>(&text) {
            if r.manifest == manifest.hash {
                return Ok(r);
            }
        }
    }
    let stats = evaluate_checkpoint(
        policy,
        &cfg.phase_env(),
        stage.column.mode(),
        cfg.eval_episodes,
        cfg.eval_horizon(),
        eval_seed(seed),
        cfg.selection,
    )?;
    let rec = EvalRecord {
        task: cfg.task,
        column: stage.column,
        seed,
        manifest: manifest.hash.clone(),
        stats,
    };
    fs::write(&path, serde_json::to_string(&rec).expect("record serializes"))?;
    Ok(rec)
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
    pub records: Vec<EvalRecord>,
}

/// All stages and evaluations for every seed, then the table and plots.
/// Checkpoints and evaluations already present for the same manifest are reused.
pub fn run_pipeline(cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<PipelineOutput, HarnessError> {
    cfg.validate()?;
    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    let st = stages(cfg);
    let mut manifest = RunManifest::new(cfg);
    for seed in &cfg.seeds {
        for s in &st {
            manifest.checkpoints.push(checkpoint_path(&out, *seed, s.name).display().to_string());
        }
    }
    manifest.save(&out.join("manifest.json"))?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        for (i, s) in st.iter().enumerate() {
            let p = train_stage(cfg, &manifest, &out, seed, s, i, log)?;
            let r = eval_stage(cfg, &manifest, &p, &out, seed, s)?;
            log(&format!(
                "seed {} {} eval: coop {:.3} ± {:.3}{}",
                seed,
                s.name,
                r.stats.cooperative.mean,
                r.stats.cooperative.std,
                r.stats
                    .self_interested
                    .as_ref()
                    .map_or(String::new(), |g| format!(", si {:.3} ± {:.3}", g.mean, g.std))
            ));
            records.push(r);
        }
        write_seed_plots(&out, seed, &st, &records, &manifest.hash)?;
    }
    let table = render_results_table(&records);
    fs::write(out.join("table.txt"), table.to_text())?;
    fs::write(out.join("table.json"), table.to_json())?;
    Ok(PipelineOutput {
        out_dir: out,
        manifest,
        records,
    })
}

fn write_seed_plots(
    out: &Path,
    seed: u64,
    st: &[Stage],
    records: &[EvalRecord],
    manifest: &str,
) -> Result<(), HarnessError> {
    let mut metrics = Vec::new();
    for name in ["coop_full", "si_full", "readapt"] {
        if st.iter().any(|s| s.name == name) {
            metrics.extend(read_metrics(&seed_dir(out, seed).join(format!("{}.metrics.jsonl", name)))?);
        }
    }
    let dir = seed_dir(out, seed);
    fs::write(dir.join("training.svg"), training_plot(&metrics, Some(manifest.into())).to_svg())?;
    let find = |c: Column| records.iter().find(|r| r.seed == seed && r.column == c);
    let mut coop = Vec::new();
    let mut si = Vec::new();
    for (col, dashed) in [(Column::SiAdvComms, false), (Column::SiNoAdvComms, true)] {
        if let Some(r) = find(col) {
            coop.push(eval_series(col.title(), "#1f5fbf", dashed, &r.stats.cooperative));
            if let Some(g) = &r.stats.self_interested {
                si.push(eval_series(col.title(), "#c0282d", dashed, g));
            }
        }
    }
    coop.extend(si);
    let plot = Plot {
        title: "Mean test reward per agent group".into(),
        x_label: "time step".into(),
        y_label: "cumulative reward".into(),
        series: coop,
        manifest: Some(manifest.into()),
    };
    fs::write(dir.join("eval_curves.svg"), plot.to_svg())?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InterpretOutput {
    pub manifest: String,
    pub report: MetricsReport,
    pub prevalence: f64,
}

/// Collects encodings from `policy`, trains a decoder and writes the report,
/// the decoder, the sample file and a reconstruction grid under `dir`.
pub fn run_interpreter(
    cfg: &ExperimentConfig,
    policy: &Policy,
    dir: &Path,
    seed: u64,
    manifest: &str,
) -> Result<InterpretOutput, HarnessError> {
    fs::create_dir_all(dir)?;
    let env = cfg.phase_env();
    let s = &cfg.interpreter;
    let set = collect_samples(
        policy,
        &env,
        &CollectConfig {
            kind: s.kind,
            sizes: s.sizes,
            sample_prob: s.sample_prob,
            mode: CommMode::Full,
            max_steps: s.max_steps,
            seed,
        },
    )?;
    set.save(&dir.join("samples.bin"))?;
    let mut dc = s.decoder.clone();
    dc.seed = seed;
    let (dec, report) = train_decoder(&set, &dc)?;
    dec.save(&dir.join("decoder.ckpt"))?;
    let grid = reconstruct_grid(&dec, policy, &env, s.kind, CommMode::Full, seed, &[0, 5, 10, 15])?;
    grid.write_png(&dir.join("reconstruction.png"))?;
    let out = InterpretOutput {
        manifest: manifest.into(),
        prevalence: set.prevalence(crate::interpreter::Split::Val, crate::policy::Group::Cooperative),
        report,
    };
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&out).expect("report serializes"))?;
    Ok(out)
}
