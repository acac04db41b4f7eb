use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advcomm::gridworld::TaskKind;
use advcomm::harness::{
    evaluate_checkpoint, output_root, read_metrics, render_results_table, run_interpreter, run_pipeline, selfcheck,
    stages, train_stage_from, training_plot, EvalRecord, ExperimentConfig, HarnessError, RunManifest,
    Selection, Stage,
};
use advcomm::interpreter::{Decoder, TargetKind};
use advcomm::policy::{CommMode, Policy};
use advcomm::trainer::Phase;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "advcomm", version, about = "Adversarial communication experiments on multi-agent grid worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment config; defaults to the desk preset for the task.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "coverage")]
    task: String,
    /// `desk` or `paper` preset when no config file is given.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => {
                let task: TaskKind = self.task.parse().map_err(|e: advcomm::gridworld::GridError| HarnessError::Config(e.to_string()))?;
                match self.preset.as_str() {
                    "desk" => ExperimentConfig::desk(task),
                    "paper" => ExperimentConfig::paper(task),
                    "split_control" => ExperimentConfig::desk_split_control(),
                    p => return Err(HarnessError::Config(format!("unknown preset {:?}", p))),
                }
            }
        };
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one phase, or every phase with --all.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "cooperative")]
        phase: String,
        /// Communication mode of the stage (full, no_comms, mask_si_outgoing).
        #[arg(long, default_value = "full")]
        comm_mode: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Override the phase's step budget.
        #[arg(long)]
        steps: Option<usize>,
        /// Starting checkpoint (required for self_interested and readapt).
        #[arg(long)]
        from: Option<PathBuf>,
        /// Run the whole pipeline (all phases, seeds, evaluations, table, plots).
        #[arg(long)]
        all: bool,
    },
    /// Evaluate a checkpoint over fixed-length episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value = "full")]
        comm_mode: String,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        greedy: bool,
        /// Write the evaluation JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a message interpreter on a checkpoint's encodings.
    Interpret {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Render the results table from evaluation files.
    Report {
        /// Directories searched recursively for *.eval.json.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit nonzero when a cell is missing.
        #[arg(long)]
        strict: bool,
    },
    /// Plot training curves from metrics logs, or a reconstruction grid.
    Plot {
        #[arg(long, num_args = 1..)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// With --checkpoint: decoder used for a reconstruction grid.
        #[arg(long)]
        decoder: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "0,5,10,15")]
        timesteps: Vec<usize>,
    },
    /// Gradient, equivalence, conservation and GAE checks.
    Selfcheck,
}

fn parse_mode(s: &str) -> Result<CommMode, HarnessError> {
    s.parse().map_err(HarnessError::Policy)
}

fn collect_evals(dir: &Path, out: &mut Vec<EvalRecord>) -> Result<(), HarnessError> {
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            collect_evals(&p, out)?;
        } else if p.to_string_lossy().ends_with(".eval.json") {
            let r = serde_json::from_str(&std::fs::read_to_string(&p)?).map_err(|e| HarnessError::Format(format!("{}: {}", p.display(), e)))?;
            out.push(r);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    let mut log = |s: &str| eprintln!("{}", s);
    match cli.command {
        Command::Train {
            cfg,
            phase,
            comm_mode,
            seed,
            steps,
            from,
            all,
        } => {
            let mut c = cfg.load()?;
            if all {
                let out = run_pipeline(&c, &mut log)?;
                print!("{}", std::fs::read_to_string(out.out_dir.join("table.txt"))?);
                return Ok(ExitCode::SUCCESS);
            }
            let phase: Phase = phase.parse()?;
            let mode = parse_mode(&comm_mode)?;
            if let Some(s) = steps {
                match phase {
                    Phase::Cooperative => c.trainer.steps_cooperative = s,
                    Phase::SelfInterested => c.trainer.steps_self_interested = s,
                    Phase::Readapt => c.trainer.steps_readapt = s,
                }
            }
            c.seeds = vec![seed];
            c.validate()?;
            let stage = stages(&c)
                .into_iter()
                .find(|s| s.phase == phase && s.mode == mode)
                .unwrap_or(Stage {
                    name: "custom",
                    phase,
                    mode,
                    parent: None,
                    column: advcomm::harness::Column::CoopComms,
                });
            let out = c.out_dir();
            std::fs::create_dir_all(&out)?;
            let manifest = RunManifest::new(&c);
            manifest.save(&out.join("manifest.json"))?;
            std::fs::write(out.join("config.json"), c.to_json())?;
            let idx = stages(&c).iter().position(|s| s.name == stage.name).unwrap_or(99);
            let parent = from.as_deref().map(Policy::load).transpose()?;
            train_stage_from(&c, &manifest, &out, seed, &stage, idx, parent, &mut log)?;
            println!("{}", advcomm::harness::checkpoint_path(&out, seed, stage.name).display());
        }
        Command::Eval {
            checkpoint,
            episodes,
            comm_mode,
            horizon,
            seed,
            greedy,
            out,
        } => {
            let p = Policy::load(&checkpoint)?;
            let env = p
                .env
                .clone()
                .ok_or_else(|| HarnessError::Config("checkpoint has no environment config".into()))?;
            let h = horizon.unwrap_or_else(|| env.eval_horizon());
            let sel = if greedy { Selection::Greedy } else { Selection::Sample };
            let stats = evaluate_checkpoint(&p, &env, parse_mode(&comm_mode)?, episodes, h, seed, sel)?;
            println!(
                "C  {:.3} ± {:.3} over {} episodes",
                stats.cooperative.mean,
                stats.cooperative.std,
                stats.cooperative.episodes.len()
            );
            match &stats.self_interested {
                Some(g) => println!("SI {:.3} ± {:.3}", g.mean, g.std),
                None => println!("SI N/A"),
            }
            let path = out.unwrap_or_else(|| checkpoint.with_extension(format!("{}.eval.json", comm_mode)));
            std::fs::write(&path, serde_json::to_string(&stats).expect("stats serialize"))?;
        }
        Command::Interpret {
            cfg,
            checkpoint,
            seed,
            kind,
            epochs,
        } => {
            let mut c = cfg.load()?;
            let p = Policy::load(&checkpoint)?;
            if let Some(env) = &p.env {
                c.env = env.clone();
            }
            if let Some(k) = kind {
                c.interpreter.kind = k.parse::<TargetKind>()?;
            }
            if let Some(e) = epochs {
                c.interpreter.decoder.epochs = e;
            }
            let dir = cfg.out.clone().unwrap_or_else(|| output_root().join("interpret"));
            let manifest = p.manifest.clone().unwrap_or_default();
            let r = run_interpreter(&c, &p, &dir, seed, &manifest)?;
            println!(
                "test mAP C {:.4} SI {:.4} (best val {:.4} at epoch {}, prevalence {:.4})",
                r.report.test_cooperative.map,
                r.report.test_self_interested.map,
                r.report.best_val_map,
                r.report.best_epoch,
                r.prevalence
            );
        }
        Command::Report { dirs, out, strict } => {
            let mut recs = Vec::new();
            for d in &dirs {
                collect_evals(d, &mut recs)?;
            }
            recs.sort_by(|a, b| (a.task.name(), a.column, a.seed).cmp(&(b.task.name(), b.column, b.seed)));
            let t = render_results_table(&recs);
            print!("{}", t.to_text());
            if let Some(o) = out {
                std::fs::create_dir_all(&o)?;
                std::fs::write(o.join("table.txt"), t.to_text())?;
                std::fs::write(o.join("table.json"), t.to_json())?;
            }
            if strict && t.missing() > 0 {
                eprintln!("{} cells missing", t.missing());
                return Ok(ExitCode::from(3));
            }
        }
        Command::Plot {
            metrics,
            out,
            decoder,
            checkpoint,
            seed,
            timesteps,
        } => {
            if let (Some(d), Some(c)) = (decoder, checkpoint) {
                let dec = Decoder::load(&d)?;
                let p = Policy::load(&c)?;
                let env = p
                    .env
                    .clone()
                    .ok_or_else(|| HarnessError::Config("checkpoint has no environment config".into()))?;
                let kind = if dec.shape.enc_dim == p.config.features {
                    TargetKind::FirstMessage
                } else {
                    TargetKind::AgnnOutputCoverage
                };
                let g = advcomm::interpreter::reconstruct_grid(&dec, &p, &env, kind, CommMode::Full, seed, &timesteps)?;
                g.write_png(&out)?;
            } else {
                let mut recs = Vec::new();
                for m in &metrics {
                    recs.extend(read_metrics(m)?);
                }
                let manifest = recs.iter().find_map(|r| r.manifest.clone());
                let plot = training_plot(&recs, manifest);
                if plot.is_empty() {
                    eprintln!("warning: no metrics records, writing an empty plot");
                }
                std::fs::write(&out, plot.to_svg())?;
            }
        }
        Command::Selfcheck => {
            let results = selfcheck();
            let mut ok = true;
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                ok &= r.passed;
            }
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(2)
        }
    }
}
