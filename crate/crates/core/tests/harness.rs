use std::process::Command;

use advcomm::gridworld::TaskKind;
use advcomm::harness::{
    eval_series, evaluate_checkpoint, mean_std, render_results_table, training_plot, Cell, Column, EvalRecord,
    ExperimentConfig, GroupStats, Plot, ResultsTable, Selection, Series,
};
use advcomm::policy::{CommMode, Group, ParamAssignment, Policy};
use advcomm::trainer::{MetricsRecord, Phase};

fn tiny(task: TaskKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk(task);
    c.trainer.batch_size = 64;
    c.trainer.minibatch_size = 32;
    c.trainer.sgd_iters = 1;
    c.trainer.steps_cooperative = 64;
    c.eval_episodes = 3;
    c
}

fn stats(eps: &[f64]) -> GroupStats {
    let (mean, std) = mean_std(eps);
    GroupStats {
        mean,
        std,
        episodes: eps.to_vec(),
        curve_mean: vec![mean / 2.0, mean],
        curve_std: vec![std / 2.0, std],
    }
}

fn record(task: TaskKind, column: Column, seed: u64, coop: &[f64], si: Option<&[f64]>) -> EvalRecord {
    EvalRecord {
        task,
        column,
        seed,
        manifest: format!("m{}", seed),
        stats: advcomm::harness::EvalStats {
            mode: column.mode(),
            horizon: 2,
            seed,
            cooperative: stats(coop),
            self_interested: si.map(stats),
        },
    }
}

#[test]
fn config_json_round_trips() {
    for task in [TaskKind::Coverage, TaskKind::SplitCoverage, TaskKind::PathPlanning] {
        for c in [ExperimentConfig::desk(task), ExperimentConfig::paper(task)] {
            let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
    }
    let mut c = ExperimentConfig::desk(TaskKind::Coverage);
    let h = c.hash();
    c.output_dir = Some("/elsewhere".into());
    assert_eq!(c.hash(), h);
    c.trainer.lr *= 2.0;
    assert_ne!(c.hash(), h);
    assert!(ExperimentConfig::from_json(r#"{"task":"coverage"}"#).is_err());
    let mut bad = ExperimentConfig::desk(TaskKind::Coverage);
    bad.si_agent = 9;
    assert!(ExperimentConfig::from_json(&bad.to_json()).is_err());
}

#[test]
fn table_layout_and_pooling() {
    let recs = vec![
        record(TaskKind::Coverage, Column::CoopComms, 1, &[1.0, 3.0], None),
        record(TaskKind::Coverage, Column::CoopComms, 2, &[5.0], None),
        record(TaskKind::Coverage, Column::SiAdvComms, 1, &[2.0], Some(&[4.0])),
    ];
    let t = render_results_table(&recs);
    assert_eq!(t.rows.len(), 6);
    assert!(t.rows.iter().all(|r| r.cells.len() == 5));
    let (m, s) = mean_std(&[1.0, 3.0, 5.0]);
    assert_eq!(t.rows[0].cells[0], Cell::Value { mean: m, std: s, episodes: 3 });
    // self-interested row: no value without an adversary
    assert_eq!(t.rows[1].group, Group::SelfInterested);
    assert_eq!(t.rows[1].cells[0], Cell::NotApplicable);
    assert_eq!(t.rows[1].cells[1], Cell::NotApplicable);
    assert!(matches!(t.rows[1].cells[2], Cell::Value { mean, .. } if mean == 4.0));
    assert_eq!(t.rows[0].cells[1], Cell::Missing);
    // 30 cells, 6 N/A, 3 filled
    assert_eq!(t.missing(), 21);
    assert_eq!(t.manifests, vec!["m1".to_string(), "m2".to_string()]);
    let text = t.to_text();
    assert!(text.contains("N/A") && text.contains("MISSING"));
    assert_eq!(ResultsTable::from_json(&t.to_json()).unwrap(), t);
}

#[test]
fn sample_std_is_population() {
    assert_eq!(mean_std(&[2.0, 4.0]), (3.0, 1.0));
    assert_eq!(mean_std(&[]), (0.0, 0.0));
}

fn metrics(phase: Phase, steps: usize, r: f64) -> MetricsRecord {
    MetricsRecord {
        phase,
        iteration: 0,
        env_steps: steps,
        episodes: 1,
        mean_return_coop: r,
        mean_return_si: Some(-r),
        policy_loss: 0.0,
        value_loss: 0.0,
        entropy: 0.0,
        clip_fraction: 0.0,
        approx_kl: 0.0,
        grad_norm: 0.0,
        manifest: None,
    }
}

#[test]
fn plots_render_edge_cases() {
    let p = training_plot(
        &[
            metrics(Phase::Cooperative, 100, 1.0),
            metrics(Phase::Cooperative, 200, 2.0),
            metrics(Phase::SelfInterested, 50, 3.0),
        ],
        Some("abc".into()),
    );
    assert_eq!(p.series.len(), 2);
    // phases are laid end to end; the self-interested curve tracks its own group
    assert_eq!(p.series[1].points, vec![(250.0, -3.0)]);
    let svg = p.to_svg();
    assert!(svg.starts_with("<svg") && svg.contains("abc"));
    assert_eq!(svg.matches("<circle").count(), 1);

    let dashed = eval_series("no adv", "#000", true, &stats(&[1.0, 2.0]));
    let solid = eval_series("adv", "#111", false, &stats(&[1.0, 2.0]));
    assert_eq!(dashed.points, vec![(1.0, 0.75), (2.0, 1.5)]);
    let plot = Plot {
        title: "t".into(),
        x_label: "x".into(),
        y_label: "y".into(),
        series: vec![dashed, solid],
        manifest: None,
    };
    let svg = plot.to_svg();
    // the dashed curve and its legend swatch
    assert_eq!(svg.matches("stroke-dasharray").count(), 2);
    assert_eq!(svg.matches("<polygon").count(), 2);

    let empty = Plot {
        series: vec![Series {
            label: "e".into(),
            color: "#000",
            dashed: false,
            points: vec![],
            band: None,
        }],
        ..plot
    };
    assert!(empty.is_empty());
    assert!(empty.to_svg().starts_with("<svg"));
}

#[test]
fn eval_summarizes_its_episodes() {
    let c = tiny(TaskKind::Coverage);
    let mut p = Policy::init(c.scale.policy_config(&c.env), ParamAssignment::cooperative(3), 1).unwrap();
    p = p.introduce_self_interested(0, 2).unwrap();
    p.env = Some(c.env.clone());
    let env = c.phase_env();
    let s = evaluate_checkpoint(&p, &env, CommMode::Full, 5, 20, 7, Selection::Sample).unwrap();
    assert_eq!(s.cooperative.episodes.len(), 5);
    let (m, sd) = mean_std(&s.cooperative.episodes);
    assert_eq!((s.cooperative.mean, s.cooperative.std), (m, sd));
    assert!(s.cooperative.curve_mean.len() <= 20);
    assert!((s.cooperative.curve_mean.last().unwrap() - m).abs() < 1e-12);
    assert!(s.self_interested.is_some());
    assert_eq!(s, evaluate_checkpoint(&p, &env, CommMode::Full, 5, 20, 7, Selection::Sample).unwrap());
    let other = ExperimentConfig::desk(TaskKind::PathPlanning).phase_env();
    assert!(evaluate_checkpoint(&p, &other, CommMode::Full, 5, 20, 7, Selection::Sample).is_err());
    assert!(evaluate_checkpoint(&p, &env, CommMode::Full, 0, 20, 7, Selection::Sample).is_err());
}

fn advcomm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_advcomm"))
}

#[test]
fn cli_rejects_unknown_flags() {
    let out = advcomm().args(["train", "--no-such-flag"]).output().unwrap();
    assert!(!out.status.success());
    let out = advcomm().args(["train", "--preset", "nonsense"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn cli_selfcheck_passes() {
    let out = advcomm().arg("selfcheck").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn cli_trains_and_evaluates_a_tiny_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, tiny(TaskKind::Coverage).to_json()).unwrap();
    let out = advcomm()
        .args(["train", "--config", cfg_path.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--seed", "4"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = String::from_utf8(out.stdout).unwrap().trim().to_string();
    assert!(std::path::Path::new(&ckpt).exists());
    let seed_dir = dir.path().join("seed4");
    let metrics = std::fs::read_dir(&seed_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .find(|e| e.file_name().to_string_lossy().ends_with(".metrics.jsonl"))
        .expect("metrics log");
    let recs = advcomm::harness::read_metrics(&metrics.path()).unwrap();
    assert!(!recs.is_empty() && recs.iter().all(|r| r.phase == Phase::Cooperative));
    assert!(dir.path().join("manifest.json").exists());

    let eval = dir.path().join("e.json");
    let out = advcomm()
        .args(["eval", "--checkpoint", &ckpt, "--episodes", "2", "--horizon", "5", "--out", eval.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s: advcomm::harness::EvalStats = serde_json::from_str(&std::fs::read_to_string(&eval).unwrap()).unwrap();
    assert_eq!(s.cooperative.episodes.len(), 2);
    assert!(String::from_utf8_lossy(&out.stdout).contains("SI N/A"));
}
