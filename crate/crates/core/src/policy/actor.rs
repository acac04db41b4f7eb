use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamTree, Scalar, Tensor};
use crate::graphnet::{run_decentralized, FilterBank, GraphShiftOperator, HeteroFilterBank, LEAKY_SLOPE};
use crate::gridworld::{Action, EnvConfig};

use super::config::{shift_for, CommMode, Group, ParamAssignment, PolicyConfig};
use super::nets::{
    actor_forward, actor_prefix, clone_actor_group, cnn_forward, critic_forward, init_actor, init_critic,
    mlp_forward, tap_path, Binder,
};
use super::PolicyError;

/// Per-agent result of one decentralized decision step.
#[derive(Clone, Debug, PartialEq)]
pub struct JointPolicyOutput {
    /// `πⁱ(·)` over the 5 actions.
    pub probs: Vec<Vec<f64>>,
    pub log_probs: Vec<Vec<f64>>,
    /// Encodings `[X]ᵢ` each agent transmits.
    pub messages: Vec<Vec<f64>>,
    pub gnn_out: Vec<Vec<f64>>,
}

/// Sampled joint action.
#[derive(Clone, Debug, PartialEq)]
pub struct JointAction {
    pub actions: Vec<Action>,
    pub log_probs: Vec<f64>,
}

impl JointAction {
    /// `log π(a|z) = Σᵢ log πⁱ(aⁱ|z)`.
    pub fn joint_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

fn no_grad(_: &str) -> bool {
    false
}

fn rows_f64<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let c = *t.shape().last().expect("rank >= 1");
    t.to_f64_vec().chunks(c).map(|r| r.to_vec()).collect()
}

/// Stacks single-agent observations into `[R, C, H, W]`.
pub fn stack_obs<T: Scalar>(obs: &[Tensor<f32>]) -> Result<Tensor<T>, PolicyError> {
    let first = obs.first().ok_or_else(|| PolicyError::Shape("no observations".into()))?;
    if obs.iter().any(|o| o.shape() != first.shape()) || first.rank() != 3 {
        return Err(PolicyError::Shape("observations differ in shape".into()));
    }
    let mut shape = vec![obs.len()];
    shape.extend_from_slice(first.shape());
    let data: Vec<T> = obs
        .iter()
        .flat_map(|o| o.data().iter().map(|&v| T::from_f64_lossy(v as f64)))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

/// Stacks per-step shift operators into `[B, N, N]`.
pub fn stack_shifts<T: Scalar>(shifts: &[GraphShiftOperator]) -> Result<Tensor<T>, PolicyError> {
    let n = shifts.first().map(|s| s.n_agents()).unwrap_or(0);
    let data: Vec<T> = shifts
        .iter()
        .flat_map(|s| s.matrix().iter().map(|&v| T::from_f64_lossy(v)))
        .collect();
    Ok(Tensor::new(vec![shifts.len(), n, n], data)?)
}

/// Centralized evaluation of all agents' policies for one time step.
pub fn joint_forward<T: Scalar>(
    params: &ParamTree<T>,
    cfg: &PolicyConfig,
    assign: &ParamAssignment,
    obs: &[Tensor<f32>],
    edges: &[(usize, usize)],
    mode: CommMode,
) -> Result<JointPolicyOutput, PolicyError> {
    let n = assign.n_agents();
    if obs.len() != n {
        return Err(PolicyError::Shape(format!("{} observations for {} agents", obs.len(), n)));
    }
    if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= n || b >= n) {
        return Err(PolicyError::UnknownAgent { agent: a.max(b), n });
    }
    let s = shift_for(edges, n, mode, assign.si_agent(), cfg.shift)?;
    let mut g = Graph::<T>::new();
    let ov = g.input(stack_obs(obs)?);
    let sv = g.input(stack_shifts(std::slice::from_ref(&s))?);
    let binder = Binder::new(params, &no_grad);
    let vars = actor_forward(&mut g, &binder, cfg, assign, ov, sv)?;
    let log_probs = rows_f64(g.value(vars.log_probs));
    Ok(JointPolicyOutput {
        probs: log_probs.iter().map(|r| r.iter().map(|v| v.exp()).collect()).collect(),
        log_probs,
        messages: rows_f64(g.value(vars.messages)),
        gnn_out: rows_f64(g.value(vars.gnn_out)),
    })
}

/// Inverse-CDF draw from `probs` using one uniform number.
pub fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Independent categorical draw per agent.
pub fn sample_actions<R: Rng>(out: &JointPolicyOutput, rng: &mut R) -> JointAction {
    let mut actions = Vec::with_capacity(out.probs.len());
    let mut log_probs = Vec::with_capacity(out.probs.len());
    for (p, lp) in out.probs.iter().zip(&out.log_probs) {
        let a = sample_categorical(p, rng);
        actions.push(Action::from_index(a).expect("5 actions"));
        log_probs.push(lp[a]);
    }
    JointAction { actions, log_probs }
}

/// Most likely action per agent (lowest index on ties).
pub fn greedy_actions(out: &JointPolicyOutput) -> JointAction {
    let mut actions = Vec::new();
    let mut log_probs = Vec::new();
    for (p, lp) in out.probs.iter().zip(&out.log_probs) {
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        actions.push(Action::from_index(best).expect("5 actions"));
        log_probs.push(lp[best]);
    }
    JointAction { actions, log_probs }
}

/// `Vⁱ` for every agent, each from its own group's critic.
pub fn critic_values<T: Scalar>(
    params: &ParamTree<T>,
    cfg: &PolicyConfig,
    assign: &ParamAssignment,
    obs: &[Tensor<f32>],
    global: &Tensor<f32>,
) -> Result<Vec<f64>, PolicyError> {
    let n = assign.n_agents();
    if obs.len() != n {
        return Err(PolicyError::Shape(format!("{} observations for {} agents", obs.len(), n)));
    }
    let mut values = vec![0.0; n];
    let mut g = Graph::<T>::new();
    let binder = Binder::new(params, &no_grad);
    let gv = g.input(stack_obs(std::slice::from_ref(global))?);
    for (grp, agents) in assign.groups() {
        let local: Vec<Tensor<f32>> = agents.iter().map(|&a| obs[a].clone()).collect();
        let lv = g.input(stack_obs(&local)?);
        let v = critic_forward(&mut g, &binder, cfg, grp, agents.len(), lv, gv)?;
        for (&a, val) in agents.iter().zip(g.value(v).to_f64_vec()) {
            values[a] = val;
        }
    }
    Ok(values)
}

/// Single-agent critic evaluation.
pub fn critic_value<T: Scalar>(
    params: &ParamTree<T>,
    cfg: &PolicyConfig,
    group: Group,
    obs: &Tensor<f32>,
    global: &Tensor<f32>,
) -> Result<f64, PolicyError> {
    let mut g = Graph::<T>::new();
    let binder = Binder::new(params, &no_grad);
    let lv = g.input(stack_obs(std::slice::from_ref(obs))?);
    let gv = g.input(stack_obs(std::slice::from_ref(global))?);
    let v = critic_forward(&mut g, &binder, cfg, group, 1, lv, gv)?;
    Ok(g.value(v).to_f64_vec()[0])
}

/// Same decision as [`joint_forward`], but the AGNN runs as per-agent message
/// rounds where each agent only reads its neighbours' aggregates.
pub fn decentralized_forward(
    params: &ParamTree<f64>,
    cfg: &PolicyConfig,
    assign: &ParamAssignment,
    obs: &[Tensor<f32>],
    edges: &[(usize, usize)],
    mode: CommMode,
) -> Result<JointPolicyOutput, PolicyError> {
    let n = assign.n_agents();
    if obs.len() != n {
        return Err(PolicyError::Shape(format!("{} observations for {} agents", obs.len(), n)));
    }
    let s = shift_for(edges, n, mode, assign.si_agent(), cfg.shift)?;
    let binder = Binder::new(params, &no_grad);
    let mut messages = Vec::with_capacity(n);
    for (i, o) in obs.iter().enumerate() {
        let mut g = Graph::<f64>::new();
        let x = g.input(stack_obs(std::slice::from_ref(o))?);
        let prefix = format!("{}.enc", actor_prefix(assign.group_of(i)));
        let e = cnn_forward(&mut g, &binder, &prefix, x, cfg.conv_channels.len())?;
        messages.extend(g.value(e).to_f64_vec());
    }
    let messages = Tensor::new(vec![n, cfg.features], messages)?;
    let present = assign.groups();
    let index: Vec<usize> = (0..n)
        .map(|i| present.iter().position(|(g, _)| *g == assign.group_of(i)).expect("known group"))
        .collect();
    let mut x = messages.clone();
    for l in 0..cfg.gnn_layers {
        let mut banks = Vec::new();
        for (grp, _) in &present {
            let taps = (0..=cfg.hops)
                .map(|k| {
                    let path = tap_path(*grp, l, k);
                    params.get(&path).cloned().ok_or(PolicyError::MissingParams(path))
                })
                .collect::<Result<Vec<_>, _>>()?;
            banks.push(FilterBank::new(taps)?);
        }
        let hetero = HeteroFilterBank::new(banks, index.clone())?;
        let y = run_decentralized(&x, &s, &hetero)?;
        x = match cfg.nonlinearity {
            crate::graphnet::Nonlinearity::LeakyRelu => y.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v }),
            crate::graphnet::Nonlinearity::Relu => y.map(|v| v.max(0.0)),
            crate::graphnet::Nonlinearity::Tanh => y.map(f64::tanh),
            crate::graphnet::Nonlinearity::Identity => y,
        };
    }
    let mut log_probs = Vec::with_capacity(n);
    for i in 0..n {
        let mut g = Graph::<f64>::new();
        let row = g.input(Tensor::new(vec![1, cfg.features], x.row(i).to_vec())?);
        let prefix = format!("{}.head", actor_prefix(assign.group_of(i)));
        let logits = mlp_forward(&mut g, &binder, &prefix, row)?;
        let lp = g.log_softmax(logits)?;
        log_probs.push(g.value(lp).to_f64_vec());
    }
    Ok(JointPolicyOutput {
        probs: log_probs.iter().map(|r| r.iter().map(|v| v.exp()).collect()).collect(),
        log_probs,
        messages: rows_f64(&messages),
        gnn_out: rows_f64(&x),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    policy: PolicyConfig,
    assignment: ParamAssignment,
    env: Option<EnvConfig>,
    manifest: Option<String>,
}

pub const META_PATH: &str = "meta.json";

/// Actor and critic parameters of every group plus the assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub config: PolicyConfig,
    pub assignment: ParamAssignment,
    pub params: ParamTree<f32>,
    pub env: Option<EnvConfig>,
    pub manifest: Option<String>,
}

impl Policy {
    /// Fresh parameters for every group present in `assignment`.
    pub fn init(config: PolicyConfig, assignment: ParamAssignment, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamTree::new();
        for (grp, _) in assignment.groups() {
            params.merge(&init_actor(&config, grp, &mut rng)?);
            params.merge(&init_critic(&config, grp, &mut rng)?);
        }
        Ok(Self {
            config,
            assignment,
            params,
            env: None,
            manifest: None,
        })
    }

    /// Swaps agent `si` to the self-interested group: `actor.si` starts as a
    /// copy of `actor.coop`, `critic.si` is freshly initialized.
    pub fn introduce_self_interested(&self, si: usize, seed: u64) -> Result<Self, PolicyError> {
        let assignment = ParamAssignment::with_self_interested(self.assignment.n_agents(), si)?;
        let mut params = self.params.clone();
        params.merge(&clone_actor_group(&self.params, Group::Cooperative, Group::SelfInterested));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        params.merge(&init_critic(&self.config, Group::SelfInterested, &mut rng)?);
        Ok(Self {
            assignment,
            params,
            ..self.clone()
        })
    }

    pub fn forward(
        &self,
        obs: &[Tensor<f32>],
        edges: &[(usize, usize)],
        mode: CommMode,
    ) -> Result<JointPolicyOutput, PolicyError> {
        joint_forward(&self.params, &self.config, &self.assignment, obs, edges, mode)
    }

    pub fn values(&self, obs: &[Tensor<f32>], global: &Tensor<f32>) -> Result<Vec<f64>, PolicyError> {
        critic_values(&self.params, &self.config, &self.assignment, obs, global)
    }

    pub fn to_tree(&self) -> ParamTree<f32> {
        let meta = CheckpointMeta {
            policy: self.config.clone(),
            assignment: self.assignment.clone(),
            env: self.env.clone(),
            manifest: self.manifest.clone(),
        };
        let bytes = serde_json::to_vec(&meta).expect("meta serializes");
        let mut tree = self.params.clone();
        tree.insert(
            META_PATH,
            Tensor::new(vec![bytes.len()], bytes.iter().map(|&b| b as f32).collect()).expect("1-d"),
        );
        tree
    }

    pub fn from_tree(mut tree: ParamTree<f32>) -> Result<Self, PolicyError> {
        let meta = tree
            .remove(META_PATH)
            .ok_or_else(|| PolicyError::Checkpoint("missing metadata entry".into()))?;
        let bytes: Vec<u8> = meta.data().iter().map(|&v| v as u8).collect();
        let meta: CheckpointMeta =
            serde_json::from_slice(&bytes).map_err(|e| PolicyError::Checkpoint(format!("metadata: {}", e)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (grp, _) in meta.assignment.groups() {
            let want = init_actor::<f32, _>(&meta.policy, grp, &mut rng)?;
            for (path, t) in want.iter() {
                match tree.get(path) {
                    Some(have) if have.shape() == t.shape() => {}
                    _ => return Err(PolicyError::Checkpoint(format!("parameter {} missing or misshapen", path))),
                }
            }
        }
        Ok(Self {
            config: meta.policy,
            assignment: meta.assignment,
            params: tree,
            env: meta.env,
            manifest: meta.manifest,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), PolicyError> {
        Ok(self.to_tree().save(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PolicyError> {
        Self::from_tree(ParamTree::load(path)?)
    }
}
