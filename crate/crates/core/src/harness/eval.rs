use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gridworld::{Env, EnvConfig, EnvMode};
use crate::policy::{greedy_actions, sample_actions, CommMode, Group, Policy};

use super::config::Selection;
use super::HarnessError;

/// Per-agent return of one group over evaluation episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: f64,
    /// Population standard deviation over episodes.
    pub std: f64,
    pub episodes: Vec<f64>,
    /// Mean cumulative per-agent return after each step.
    pub curve_mean: Vec<f64>,
    pub curve_std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mode: CommMode,
    pub horizon: usize,
    pub seed: u64,
    pub cooperative: GroupStats,
    pub self_interested: Option<GroupStats>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn group_stats(curves: &[Vec<f64>]) -> GroupStats {
    let horizon = curves.iter().map(|c| c.len()).max().unwrap_or(0);
    let episodes: Vec<f64> = curves.iter().map(|c| c.last().copied().unwrap_or(0.0)).collect();
    let (mean, std) = mean_std(&episodes);
    let mut curve_mean = Vec::with_capacity(horizon);
    let mut curve_std = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let col: Vec<f64> = curves
            .iter()
            .map(|c| c.get(t).or(c.last()).copied().unwrap_or(0.0))
            .collect();
        let (m, s) = mean_std(&col);
        curve_mean.push(m);
        curve_std.push(s);
    }
    GroupStats {
        mean,
        std,
        episodes,
        curve_mean,
        curve_std,
    }
}

/// Runs `episodes` fixed-length episodes (no early termination) with episode
/// seeds drawn from `seed`, and summarizes per-agent returns by group.
pub fn evaluate_checkpoint(
    policy: &Policy,
    env_cfg: &EnvConfig,
    mode: CommMode,
    episodes: usize,
    horizon: usize,
    seed: u64,
    selection: Selection,
) -> Result<EvalStats, HarnessError> {
    if policy.assignment.n_agents() != env_cfg.n_agents {
        return Err(HarnessError::Mismatch(format!(
            "checkpoint has {} agents, environment {}",
            policy.assignment.n_agents(),
            env_cfg.n_agents
        )));
    }
    if let Some(e) = &policy.env {
        if e.task != env_cfg.task {
            return Err(HarnessError::Mismatch(format!(
                "checkpoint trained on {}, evaluating {}",
                e.task.name(),
                env_cfg.task.name()
            )));
        }
    }
    policy.config.check_env(env_cfg)?;
    if episodes == 0 || horizon == 0 {
        return Err(HarnessError::Config("episodes and horizon must be positive".into()));
    }
    let groups = [Group::Cooperative, Group::SelfInterested].map(|g| policy.assignment.agents_in(g));
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut curves: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    for _ in 0..episodes {
        let ep_seed: u64 = seeds.gen();
        let mut env = Env::new(env_cfg.clone(), ep_seed, EnvMode::Eval)?;
        let mut rng = ChaCha8Rng::seed_from_u64(ep_seed ^ 0xe7a1);
        let mut cum = vec![0.0; env_cfg.n_agents];
        let mut ep_curves = [Vec::with_capacity(horizon), Vec::with_capacity(horizon)];
        for _ in 0..horizon {
            let out = policy.forward(&env.observations(), &env.edges(), mode)?;
            let joint = match selection {
                Selection::Sample => sample_actions(&out, &mut rng),
                Selection::Greedy => greedy_actions(&out),
            };
            let res = env.step(&joint.actions)?;
            for (c, r) in cum.iter_mut().zip(&res.rewards) {
                *c += r;
            }
            for (gi, agents) in groups.iter().enumerate() {
                if !agents.is_empty() {
                    let v = agents.iter().map(|&a| cum[a]).sum::<f64>() / agents.len() as f64;
                    ep_curves[gi].push(v);
                }
            }
            if res.terminated {
                break;
            }
        }
        for (gi, c) in ep_curves.into_iter().enumerate() {
            curves[gi].push(c);
        }
    }
    Ok(EvalStats {
        mode,
        horizon,
        seed,
        cooperative: group_stats(&curves[0]),
        self_interested: (!groups[1].is_empty()).then(|| group_stats(&curves[1])),
    })
}
