use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::graphnet::GraphShiftOperator;
use crate::gridworld::{Env, EnvConfig, EnvMode};
use crate::policy::{greedy_actions, sample_actions, shift_for, CommMode, Policy};

use super::TrainError;

/// Everything recorded about one environment step.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub obs: Vec<Tensor<f32>>,
    pub global: Tensor<f32>,
    pub edges: Vec<(usize, usize)>,
    /// Shift operator the behaviour policy used (comm mode applied).
    pub shift: GraphShiftOperator,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub episode_seed: u64,
    pub steps: Vec<StepRecord>,
    /// Ended by the task rule rather than the horizon.
    pub terminated: bool,
    /// `V(s_T)` per agent for truncated ends, zeros for terminal ones.
    pub bootstrap: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Undiscounted return of each agent.
    pub fn returns(&self) -> Vec<f64> {
        let n = self.bootstrap.len();
        let mut r = vec![0.0; n];
        for s in &self.steps {
            for (acc, v) in r.iter_mut().zip(&s.rewards) {
                *acc += v;
            }
        }
        r
    }

    pub fn check(&self) -> Result<(), TrainError> {
        let n = self.bootstrap.len();
        for (t, s) in self.steps.iter().enumerate() {
            let ok = s.obs.len() == n
                && s.actions.len() == n
                && s.log_probs.len() == n
                && s.rewards.len() == n
                && s.values.len() == n;
            if !ok {
                return Err(TrainError::Misaligned(format!("step {} has inconsistent agent counts", t)));
            }
            if s.log_probs.iter().any(|l| !l.is_finite()) {
                return Err(TrainError::NonFinite(format!("log-prob at step {}", t)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ActionSelection {
    #[default]
    Sample,
    Greedy,
}

/// Runs one episode of `env` under `policy`.
pub fn run_episode<R: Rng>(
    env: &mut Env,
    policy: &Policy,
    mode: CommMode,
    selection: ActionSelection,
    with_values: bool,
    rng: &mut R,
    episode_seed: u64,
) -> Result<Trajectory, TrainError> {
    let n = env.n_agents();
    if policy.assignment.n_agents() != n {
        return Err(TrainError::Config(format!(
            "policy has {} agents, environment {}",
            policy.assignment.n_agents(),
            n
        )));
    }
    policy.config.check_env(env.config())?;
    let si = policy.assignment.si_agent();
    let mut obs = env.observations();
    let mut edges = env.edges();
    let mut steps = Vec::new();
    loop {
        let global = env.global_state();
        let out = policy.forward(&obs, &edges, mode)?;
        let joint = match selection {
            ActionSelection::Sample => sample_actions(&out, rng),
            ActionSelection::Greedy => greedy_actions(&out),
        };
        let values = if with_values { policy.values(&obs, &global)? } else { vec![0.0; n] };
        let shift = shift_for(&edges, n, mode, si, policy.config.shift)?;
        let res = env.step(&joint.actions).map_err(|e| TrainError::Env {
            steps_collected: steps.len(),
            source: e,
        })?;
        steps.push(StepRecord {
            obs: std::mem::replace(&mut obs, res.observations.clone()),
            global,
            edges: std::mem::replace(&mut edges, res.edges.clone()),
            shift,
            actions: joint.actions.iter().map(|a| a.index()).collect(),
            log_probs: joint.log_probs,
            rewards: res.rewards.clone(),
            values,
        });
        if res.done() {
            let bootstrap = if res.truncated && with_values {
                policy.values(&obs, &env.global_state())?
            } else {
                vec![0.0; n]
            };
            return Ok(Trajectory {
                episode_seed,
                steps,
                terminated: res.terminated,
                bootstrap,
            });
        }
    }
}

/// Episodes under one policy snapshot until at least `n_steps` steps exist.
/// Episode seeds and action noise come from two independent streams derived
/// from `seed`.
pub fn collect_rollouts(
    env_cfg: &EnvConfig,
    policy: &Policy,
    mode: CommMode,
    n_steps: usize,
    seed: u64,
) -> Result<Vec<Trajectory>, TrainError> {
    if n_steps == 0 {
        return Err(TrainError::Config("n_steps must be >= 1".into()));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut act_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut out = Vec::new();
    let mut total = 0;
    while total < n_steps {
        let episode_seed: u64 = seeds.gen();
        let mut env = Env::new(env_cfg.clone(), episode_seed, EnvMode::Train)?;
        let traj = run_episode(&mut env, policy, mode, ActionSelection::Sample, true, &mut act_rng, episode_seed)?;
        traj.check()?;
        total += traj.len();
        out.push(traj);
    }
    Ok(out)
}
