use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Optimizer;
use crate::gridworld::EnvConfig;
use crate::policy::{CommMode, Group, Policy};

use super::ppo::{cooperative_update, readapt_update, self_interested_update, TrainerConfig, UpdateKind};
use super::rollout::{collect_rollouts, Trajectory};
use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Cooperative,
    SelfInterested,
    Readapt,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Cooperative => "cooperative",
            Phase::SelfInterested => "self_interested",
            Phase::Readapt => "readapt",
        }
    }

    pub fn kind(self) -> UpdateKind {
        match self {
            Phase::Cooperative => UpdateKind::Cooperative,
            Phase::SelfInterested => UpdateKind::SelfInterested,
            Phase::Readapt => UpdateKind::Readapt,
        }
    }

    pub fn default_steps(self, cfg: &TrainerConfig) -> usize {
        match self {
            Phase::Cooperative => cfg.steps_cooperative,
            Phase::SelfInterested => cfg.steps_self_interested,
            Phase::Readapt => cfg.steps_readapt,
        }
    }
}

impl FromStr for Phase {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cooperative" | "coop" => Ok(Phase::Cooperative),
            "self_interested" | "si" => Ok(Phase::SelfInterested),
            "readapt" => Ok(Phase::Readapt),
            other => Err(TrainError::Config(format!("unknown phase {:?}", other))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PhaseSpec {
    pub phase: Phase,
    pub env: EnvConfig,
    pub mode: CommMode,
    pub total_steps: usize,
    pub seed: u64,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: Phase,
    pub iteration: usize,
    pub env_steps: usize,
    pub episodes: usize,
    pub mean_return_coop: f64,
    pub mean_return_si: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
    /// Hash of the run manifest this record belongs to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
}

impl MetricsRecord {
    pub fn to_jsonl(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    pub records: Vec<MetricsRecord>,
    pub env_steps: usize,
}

/// Mean per-agent return of cooperative agents and the self-interested return.
pub fn batch_returns(batch: &[Trajectory], policy: &Policy) -> (f64, Option<f64>) {
    let coop = policy.assignment.agents_in(Group::Cooperative);
    let si = policy.assignment.si_agent();
    let mut c = 0.0;
    let mut s = 0.0;
    for traj in batch {
        let r = traj.returns();
        if !coop.is_empty() {
            c += coop.iter().map(|&i| r[i]).sum::<f64>() / coop.len() as f64;
        }
        if let Some(i) = si {
            s += r[i];
        }
    }
    let k = batch.len().max(1) as f64;
    (c / k, si.map(|_| s / k))
}

/// Trains `policy` for `spec.total_steps` environment steps with a fresh
/// optimizer, handing every iteration's record to `sink`.
pub fn run_phase(
    policy: &mut Policy,
    spec: &PhaseSpec,
    cfg: &TrainerConfig,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<(), TrainError>,
) -> Result<PhaseOutcome, TrainError> {
    cfg.validate()?;
    spec.env.validate()?;
    if spec.phase != Phase::Cooperative && policy.assignment.si_agent().is_none() {
        return Err(TrainError::Config(format!(
            "phase {} needs a self-interested agent",
            spec.phase.name()
        )));
    }
    let mut opt = Optimizer::new(cfg.optimizer());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0f_a11);
    let mut records = Vec::new();
    let mut env_steps = 0;
    let mut iteration = 0;
    while env_steps < spec.total_steps {
        let seed = spec.seed.wrapping_mul(0x100_0193).wrapping_add(iteration as u64);
        let batch = collect_rollouts(&spec.env, policy, spec.mode, cfg.batch_size, seed)?;
        env_steps += batch.iter().map(|t| t.len()).sum::<usize>();
        let (mean_return_coop, mean_return_si) = batch_returns(&batch, policy);
        let m = match spec.phase {
            Phase::Cooperative => cooperative_update(policy, &mut opt, &batch, cfg, &mut rng)?,
            Phase::SelfInterested => self_interested_update(policy, &mut opt, &batch, cfg, &mut rng)?,
            Phase::Readapt => readapt_update(policy, &mut opt, &batch, cfg, &mut rng)?,
        };
        let rec = MetricsRecord {
            phase: spec.phase,
            iteration,
            env_steps,
            episodes: batch.len(),
            mean_return_coop,
            mean_return_si,
            policy_loss: m.policy_loss,
            value_loss: m.value_loss,
            entropy: m.entropy,
            clip_fraction: m.clip_fraction,
            approx_kl: m.approx_kl,
            grad_norm: m.grad_norm,
            manifest: policy.manifest.clone(),
        };
        sink(&rec)?;
        records.push(rec);
        iteration += 1;
    }
    Ok(PhaseOutcome { records, env_steps })
}
