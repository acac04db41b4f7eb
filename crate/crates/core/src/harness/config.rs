use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gridworld::{coverage_horizon, EnvConfig, Layout, TaskKind};
use crate::interpreter::{DecoderConfig, SplitSizes, TargetKind};
use crate::policy::{CommMode, PolicyConfig};
use crate::trainer::{Phase, TrainerConfig};

use super::HarnessError;

pub const OUT_ENV: &str = "ADVCOMM_OUT";

/// Default output root: `$ADVCOMM_OUT`, else `./runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyScale {
    Standard,
    #[default]
    Desk,
}

impl PolicyScale {
    pub fn policy_config(self, env: &EnvConfig) -> PolicyConfig {
        match self {
            PolicyScale::Standard => PolicyConfig::standard(env),
            PolicyScale::Desk => PolicyConfig::desk(env),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Sample,
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpreterSettings {
    pub kind: TargetKind,
    pub sizes: SplitSizes,
    pub sample_prob: f64,
    pub max_steps: usize,
    pub decoder: DecoderConfig,
}

impl InterpreterSettings {
    pub fn paper() -> Self {
        Self {
            kind: TargetKind::FirstMessage,
            sizes: SplitSizes {
                train: 50_000,
                val: 10_000,
                test: 5_000,
            },
            sample_prob: 0.1,
            max_steps: 5_000_000,
            decoder: DecoderConfig::default(),
        }
    }

    pub fn desk() -> Self {
        Self {
            sizes: SplitSizes {
                train: 5_000,
                val: 1_000,
                test: 500,
            },
            max_steps: 500_000,
            decoder: DecoderConfig {
                epochs: 50,
                ..DecoderConfig::default()
            },
            ..Self::paper()
        }
    }
}

/// Everything one experiment needs. Stored as JSON; see README for the schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub scale: PolicyScale,
    pub comm_variants: Vec<CommMode>,
    pub phases: Vec<Phase>,
    pub eval_episodes: usize,
    /// Fixed evaluation length; `None` uses the task default.
    #[serde(default)]
    pub eval_horizon: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub si_agent: usize,
    #[serde(default)]
    pub selection: Selection,
    pub interpreter: InterpreterSettings,
}

/// Desk-scale world for `task`.
pub fn desk_env(task: TaskKind) -> EnvConfig {
    let base = EnvConfig {
        width: 8,
        height: 8,
        n_agents: 3,
        fov_w: 5,
        fov_h: 5,
        comm_range: 4.0,
        horizon: coverage_horizon(8, 8),
        ..EnvConfig::for_task(task)
    };
    match task {
        TaskKind::Coverage => base,
        TaskKind::SplitCoverage => EnvConfig {
            horizon: crate::gridworld::split_horizon(8, 8),
            ..base
        },
        TaskKind::PathPlanning => EnvConfig {
            horizon: 30,
            comm_range: 3.0,
            ..base
        },
    }
}

impl ExperimentConfig {
    /// World and budgets as published for `task`.
    pub fn paper(task: TaskKind) -> Self {
        let trainer = match task {
            TaskKind::PathPlanning => TrainerConfig::path_planning(),
            _ => TrainerConfig::coverage(),
        };
        Self {
            task,
            env: EnvConfig::for_task(task),
            trainer,
            scale: PolicyScale::Standard,
            comm_variants: vec![CommMode::Full, CommMode::NoComms, CommMode::MaskSiOutgoing],
            phases: vec![Phase::Cooperative, Phase::SelfInterested, Phase::Readapt],
            eval_episodes: 100,
            eval_horizon: None,
            output_dir: None,
            seeds: vec![1],
            si_agent: 0,
            selection: Selection::Sample,
            interpreter: InterpreterSettings::paper(),
        }
    }

    /// 8×8 world, three agents, small networks.
    pub fn desk(task: TaskKind) -> Self {
        let mut trainer = TrainerConfig::desk();
        if task == TaskKind::PathPlanning {
            trainer.gamma = 0.99;
        }
        Self {
            env: desk_env(task),
            trainer,
            scale: PolicyScale::Desk,
            seeds: vec![1, 2, 3],
            interpreter: InterpreterSettings::desk(),
            ..Self::paper(task)
        }
    }

    /// The non-competitive control: walled split with the self-interested
    /// agent alone on the left.
    pub fn desk_split_control() -> Self {
        let mut c = Self::desk(TaskKind::Coverage);
        c.env.layout = Layout::SplitDisconnected;
        c.env.si_placement = crate::gridworld::SiPlacement::Left;
        c.comm_variants = vec![CommMode::Full, CommMode::MaskSiOutgoing];
        c.phases = vec![Phase::Cooperative, Phase::SelfInterested];
        c.seeds = vec![1];
        c
    }

    pub fn eval_horizon(&self) -> usize {
        self.eval_horizon.unwrap_or_else(|| self.env.eval_horizon())
    }

    /// Environment used by every phase (the self-interested index is fixed up
    /// front so placement rules stay the same across phases).
    pub fn phase_env(&self) -> EnvConfig {
        EnvConfig {
            si_agent: Some(self.si_agent),
            ..self.env.clone()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.env.validate()?;
        self.trainer.validate()?;
        if self.env.task != self.task {
            return Err(HarnessError::Config(format!(
                "task {} but env task {}",
                self.task.name(),
                self.env.task.name()
            )));
        }
        if self.si_agent >= self.env.n_agents {
            return Err(HarnessError::Config(format!("si_agent {} out of range", self.si_agent)));
        }
        if self.seeds.is_empty() || self.eval_episodes == 0 {
            return Err(HarnessError::Config("need at least one seed and one evaluation episode".into()));
        }
        if self.phases.first() != Some(&Phase::Cooperative) && !self.phases.is_empty() {
            return Err(HarnessError::Config("phases must start with cooperative".into()));
        }
        if self.phases.contains(&Phase::Readapt) && !self.phases.contains(&Phase::SelfInterested) {
            return Err(HarnessError::Config("readapt needs the self_interested phase".into()));
        }
        self.scale.policy_config(&self.env).check_env(&self.env)?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, HarnessError> {
        let c: Self = serde_json::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical JSON with output location removed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| output_root().join(format!("{}-{}", self.task.name(), &self.hash()[..12])))
    }
}
