use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Optimizer, OptimizerConfig, OptimizerKind, ParamTree, Tensor};
use crate::policy::{
    actor_forward, actor_prefix, critic_forward, critic_prefix, stack_obs, stack_shifts, Binder, Group, Policy,
};

use super::gae::{compute_gae, standardize};
use super::rollout::{StepRecord, Trajectory};
use super::TrainError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub lr: f64,
    pub gamma: f64,
    pub clip: f64,
    pub lambda: f64,
    /// Environment steps per training batch.
    pub batch_size: usize,
    /// Environment steps per minibatch (all agents of a step stay together).
    pub minibatch_size: usize,
    pub sgd_iters: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub normalize_advantages: bool,
    pub grad_clip: Option<f64>,
    pub steps_cooperative: usize,
    pub steps_self_interested: usize,
    pub steps_readapt: usize,
}

impl TrainerConfig {
    pub fn coverage() -> Self {
        Self {
            lr: 5e-4,
            gamma: 0.9,
            clip: 0.2,
            lambda: 0.95,
            batch_size: 5000,
            minibatch_size: 1000,
            sgd_iters: 5,
            entropy_coef: 0.01,
            value_coef: 0.5,
            normalize_advantages: true,
            grad_clip: Some(0.5),
            steps_cooperative: 200_000,
            steps_self_interested: 400_000,
            steps_readapt: 200_000,
        }
    }

    pub fn path_planning() -> Self {
        Self {
            lr: 4e-4,
            gamma: 0.99,
            ..Self::coverage()
        }
    }

    /// Small networks and short budgets for a single CPU.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 2000,
            minibatch_size: 500,
            sgd_iters: 4,
            steps_cooperative: 400_000,
            steps_self_interested: 300_000,
            ..Self::coverage()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must be in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if self.minibatch_size == 0 || self.minibatch_size > self.batch_size {
            return bad("need 1 <= minibatch <= batch");
        }
        if !(self.lr > 0.0) || self.sgd_iters == 0 {
            return bad("learning rate and SGD iterations must be positive");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: self.lr,
            clip_norm: self.grad_clip,
            ..OptimizerConfig::default()
        }
    }
}

/// Which policy-gradient form an update follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    /// Shared `θᶜ`, advantage `Σᵢ Âⁱ` over all agents.
    Cooperative,
    /// `θⁿ` only, advantage `Âⁿ`; `θᶜ` frozen.
    SelfInterested,
    /// `θᶜ` only, advantage summed over cooperative agents; `θⁿ` frozen.
    Readapt,
}

impl UpdateKind {
    pub fn trained_group(self) -> Group {
        match self {
            UpdateKind::SelfInterested => Group::SelfInterested,
            _ => Group::Cooperative,
        }
    }

    /// Whether `path` is updated by this kind.
    pub fn trains(self, path: &str) -> bool {
        let g = self.trained_group();
        let (a, c) = (format!("{}.", actor_prefix(g)), format!("{}.", critic_prefix(g)));
        path.starts_with(&a) || path.starts_with(&c)
    }
}

/// Per-step training data with advantages attached.
#[derive(Clone, Debug)]
pub struct PreparedStep<'a> {
    pub record: &'a StepRecord,
    /// Group advantage used by the surrogate.
    pub advantage: f64,
    /// Per-agent return targets `Gⁱₜ`.
    pub returns: Vec<f64>,
}

/// GAE per agent and trajectory, then the group advantage per step.
pub fn prepare_batch<'a>(
    batch: &'a [Trajectory],
    policy: &Policy,
    kind: UpdateKind,
    cfg: &TrainerConfig,
) -> Result<Vec<PreparedStep<'a>>, TrainError> {
    let n = policy.assignment.n_agents();
    let adv_agents: Vec<usize> = match kind {
        UpdateKind::Cooperative => (0..n).collect(),
        UpdateKind::SelfInterested => vec![policy
            .assignment
            .si_agent()
            .ok_or_else(|| TrainError::Config("self-interested update without a self-interested agent".into()))?],
        UpdateKind::Readapt => policy.assignment.agents_in(Group::Cooperative),
    };
    let mut out = Vec::new();
    for traj in batch {
        traj.check()?;
        let mut per_agent = Vec::with_capacity(n);
        for i in 0..n {
            let r: Vec<f64> = traj.steps.iter().map(|s| s.rewards[i]).collect();
            let v: Vec<f64> = traj.steps.iter().map(|s| s.values[i]).collect();
            per_agent.push(compute_gae(&r, &v, traj.bootstrap[i], cfg.gamma, cfg.lambda)?);
        }
        for (t, rec) in traj.steps.iter().enumerate() {
            out.push(PreparedStep {
                record: rec,
                advantage: adv_agents.iter().map(|&i| per_agent[i].advantages[t]).sum(),
                returns: per_agent.iter().map(|e| e.returns[t]).collect(),
            });
        }
    }
    if cfg.normalize_advantages {
        let mut a: Vec<f64> = out.iter().map(|s| s.advantage).collect();
        standardize(&mut a);
        for (s, v) in out.iter_mut().zip(a) {
            s.advantage = v;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// Loss pieces of one minibatch, each a scalar on the tape.
pub struct MinibatchLoss {
    pub graph: Graph<f32>,
    pub total: crate::diffcore::Var,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Builds `−(Σⱼ min(ρʲÂ, clip(ρʲ)Â) + c_H·H) + c_V·‖V − G‖²` averaged over the
/// minibatch steps. The ratio sum runs over all agents; entropy and value terms
/// cover the trained group only.
pub fn minibatch_loss(
    policy: &Policy,
    steps: &[&PreparedStep],
    kind: UpdateKind,
    cfg: &TrainerConfig,
) -> Result<MinibatchLoss, TrainError> {
    let pc = &policy.config;
    let assign = &policy.assignment;
    let n = assign.n_agents();
    let bs = steps.len();
    let trainable = move |p: &str| kind.trains(p);
    let binder = Binder::new(&policy.params, &trainable);
    let mut g = Graph::<f32>::new();

    let all_obs: Vec<Tensor<f32>> = steps.iter().flat_map(|s| s.record.obs.iter().cloned()).collect();
    let obs = g.input(stack_obs(&all_obs)?);
    let shifts: Vec<_> = steps.iter().map(|s| s.record.shift.clone()).collect();
    let shift = g.input(stack_shifts(&shifts)?);
    let vars = actor_forward(&mut g, &binder, pc, assign, obs, shift)?;

    let actions: Vec<usize> = steps.iter().flat_map(|s| s.record.actions.iter().copied()).collect();
    let new_lp = g.gather_last(vars.log_probs, &actions)?;
    let old: Vec<f64> = steps.iter().flat_map(|s| s.record.log_probs.iter().copied()).collect();
    let old_lp = g.input(Tensor::from_f64(&[bs * n], &old)?);
    let diff = g.sub(new_lp, old_lp)?;
    let ratio = g.exp(diff);
    let adv: Vec<f64> = steps.iter().flat_map(|s| std::iter::repeat(s.advantage).take(n)).collect();
    let adv_v = g.input(Tensor::from_f64(&[bs * n], &adv)?);
    let s1 = g.mul(ratio, adv_v)?;
    let clipped = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    let s2 = g.mul(clipped, adv_v)?;
    let surr = g.minimum(s1, s2)?;
    let surr_sum = g.sum(surr);
    let surr_mean = g.scale(surr_sum, 1.0 / bs as f64);

    let group = kind.trained_group();
    let members = assign.agents_in(group);
    let rows: Vec<usize> = (0..bs).flat_map(|t| members.iter().map(move |&a| t * n + a)).collect();
    let lp_g = g.select_rows(vars.log_probs, &rows)?;
    let p_g = g.exp(lp_g);
    let plp = g.mul(p_g, lp_g)?;
    let neg_ent = g.sum(plp);
    let entropy = g.scale(neg_ent, -1.0 / bs as f64);

    let local: Vec<Tensor<f32>> = steps
        .iter()
        .flat_map(|s| members.iter().map(|&a| s.record.obs[a].clone()))
        .collect();
    let local_v = g.input(stack_obs(&local)?);
    let globals: Vec<Tensor<f32>> = steps.iter().map(|s| s.record.global.clone()).collect();
    let global_v = g.input(stack_obs(&globals)?);
    let values = critic_forward(&mut g, &binder, pc, group, members.len(), local_v, global_v)?;
    let targets: Vec<f64> = steps
        .iter()
        .flat_map(|s| members.iter().map(|&a| s.returns[a]))
        .collect();
    let target_v = g.input(Tensor::from_f64(&[targets.len()], &targets)?);
    let vloss = g.mse(values, target_v)?;

    let ent_term = g.scale(entropy, cfg.entropy_coef);
    let objective = g.add(surr_mean, ent_term)?;
    let neg_obj = g.scale(objective, -1.0);
    let v_term = g.scale(vloss, cfg.value_coef);
    let total = g.add(neg_obj, v_term)?;

    let r = g.value(ratio).to_f64_vec();
    let clip_fraction = r.iter().filter(|&&x| (x - 1.0).abs() > cfg.clip).count() as f64 / r.len() as f64;
    let d = g.value(diff).to_f64_vec();
    let approx_kl = d.iter().map(|&x| (x.exp() - 1.0) - x).sum::<f64>() / d.len() as f64;
    let policy_loss = -g.value(surr_mean).item() as f64;
    let value_loss = g.value(vloss).item() as f64;
    let entropy = g.value(entropy).item() as f64 / members.len().max(1) as f64;
    Ok(MinibatchLoss {
        graph: g,
        total,
        policy_loss,
        value_loss,
        entropy,
        clip_fraction,
        approx_kl,
    })
}

/// Gradient of the minibatch loss with respect to every parameter (zeros for
/// paths the update kind does not train).
pub fn loss_gradients(
    policy: &Policy,
    steps: &[&PreparedStep],
    kind: UpdateKind,
    cfg: &TrainerConfig,
) -> Result<(ParamTree<f32>, MinibatchLoss), TrainError> {
    let l = minibatch_loss(policy, steps, kind, cfg)?;
    if !l.graph.value(l.total).all_finite() {
        return Err(TrainError::NonFinite("minibatch loss".into()));
    }
    let grads = l.graph.param_grads(l.total, &policy.params)?;
    Ok((grads, l))
}

/// `sgd_iters` passes of shuffled minibatches over `batch`.
pub fn ppo_update<R: Rng>(
    policy: &mut Policy,
    opt: &mut Optimizer,
    batch: &[Trajectory],
    kind: UpdateKind,
    cfg: &TrainerConfig,
    rng: &mut R,
) -> Result<UpdateMetrics, TrainError> {
    cfg.validate()?;
    let prepared = prepare_batch(batch, policy, kind, cfg)?;
    if prepared.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let mut m = UpdateMetrics::default();
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mb = cfg.minibatch_size.min(prepared.len());
    for _ in 0..cfg.sgd_iters {
        order.shuffle(rng);
        for (ci, chunk) in order.chunks(mb).enumerate() {
            let steps: Vec<&PreparedStep> = chunk.iter().map(|&i| &prepared[i]).collect();
            let (grads, l) = loss_gradients(policy, &steps, kind, cfg).map_err(|e| match e {
                TrainError::NonFinite(what) => TrainError::NonFinite(format!("{} in minibatch {}", what, ci)),
                other => other,
            })?;
            m.grad_norm += opt.descend(&mut policy.params, &grads, |p| kind.trains(p))?;
            m.policy_loss += l.policy_loss;
            m.value_loss += l.value_loss;
            m.entropy += l.entropy;
            m.clip_fraction += l.clip_fraction;
            m.approx_kl += l.approx_kl;
            m.minibatches += 1;
        }
    }
    let k = m.minibatches as f64;
    m.policy_loss /= k;
    m.value_loss /= k;
    m.entropy /= k;
    m.clip_fraction /= k;
    m.approx_kl /= k;
    m.grad_norm /= k;
    Ok(m)
}

/// Cooperative policy gradient step on the shared `θᶜ`.
pub fn cooperative_update<R: Rng>(
    policy: &mut Policy,
    opt: &mut Optimizer,
    batch: &[Trajectory],
    cfg: &TrainerConfig,
    rng: &mut R,
) -> Result<UpdateMetrics, TrainError> {
    ppo_update(policy, opt, batch, UpdateKind::Cooperative, cfg, rng)
}

fn frozen_snapshot(policy: &Policy, kind: UpdateKind) -> Vec<(String, Tensor<f32>)> {
    policy
        .params
        .iter()
        .filter(|(p, _)| !kind.trains(p))
        .map(|(p, t)| (p.clone(), t.clone()))
        .collect()
}

fn assert_frozen(policy: &Policy, before: &[(String, Tensor<f32>)]) -> Result<(), TrainError> {
    for (p, t) in before {
        let now = policy.params.get(p).ok_or_else(|| TrainError::Frozen(p.clone()))?;
        if now.data().iter().zip(t.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(TrainError::Frozen(p.clone()));
        }
    }
    Ok(())
}

/// Self-interested policy gradient step on `θⁿ`; every other parameter must be
/// bitwise unchanged afterwards.
pub fn self_interested_update<R: Rng>(
    policy: &mut Policy,
    opt: &mut Optimizer,
    batch: &[Trajectory],
    cfg: &TrainerConfig,
    rng: &mut R,
) -> Result<UpdateMetrics, TrainError> {
    let before = frozen_snapshot(policy, UpdateKind::SelfInterested);
    let m = ppo_update(policy, opt, batch, UpdateKind::SelfInterested, cfg, rng)?;
    assert_frozen(policy, &before)?;
    Ok(m)
}

/// Cooperative step with `θⁿ` frozen.
pub fn readapt_update<R: Rng>(
    policy: &mut Policy,
    opt: &mut Optimizer,
    batch: &[Trajectory],
    cfg: &TrainerConfig,
    rng: &mut R,
) -> Result<UpdateMetrics, TrainError> {
    let before = frozen_snapshot(policy, UpdateKind::Readapt);
    let m = ppo_update(policy, opt, batch, UpdateKind::Readapt, cfg, rng)?;
    assert_frozen(policy, &before)?;
    Ok(m)
}
