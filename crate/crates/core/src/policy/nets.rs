//! Parameter layout, initialization and tape forward passes of the actor and
//! critic.

use rand::Rng;

use crate::diffcore::init::orthogonal;
use crate::diffcore::{Graph, ParamTree, Scalar, Tensor, Var};
use crate::graphnet::{hetero_graph_conv_on, TapeBank, LEAKY_SLOPE};
use crate::gridworld::Action;

use super::config::{cnn_out_hw, Group, ParamAssignment, PolicyConfig};
use super::PolicyError;

const HIDDEN_GAIN: f64 = std::f64::consts::SQRT_2;
const POLICY_GAIN: f64 = 0.01;

/// `actor.{group}` prefix.
pub fn actor_prefix(group: Group) -> String {
    format!("actor.{}", group.key())
}

pub fn critic_prefix(group: Group) -> String {
    format!("critic.{}", group.key())
}

/// Path of tap `k` of GNN layer `l`.
pub fn tap_path(group: Group, layer: usize, k: usize) -> String {
    if layer == 0 {
        format!("{}.gnn.tap.k{}", actor_prefix(group), k)
    } else {
        format!("{}.gnn{}.tap.k{}", actor_prefix(group), layer, k)
    }
}

fn zeros<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::zeros(&[n])
}

fn insert_cnn<T: Scalar, R: Rng>(
    tree: &mut ParamTree<T>,
    prefix: &str,
    c_in: usize,
    h: usize,
    w: usize,
    channels: &[usize],
    features: usize,
    rng: &mut R,
) -> Result<(), PolicyError> {
    let mut c = c_in;
    for (l, &co) in channels.iter().enumerate() {
        tree.insert(format!("{}.conv{}.w", prefix, l), orthogonal(&[co, c, 3, 3], HIDDEN_GAIN, rng));
        tree.insert(format!("{}.conv{}.b", prefix, l), zeros(co));
        c = co;
    }
    let (oh, ow) = cnn_out_hw(h, w, channels.len())?;
    let flat = c * oh * ow;
    tree.insert(format!("{}.fc.w", prefix), orthogonal(&[flat, features], HIDDEN_GAIN, rng));
    tree.insert(format!("{}.fc.b", prefix), zeros(features));
    Ok(())
}

/// Fresh actor parameters `{ν, η, μ}` for one group.
pub fn init_actor<T: Scalar, R: Rng>(
    cfg: &PolicyConfig,
    group: Group,
    rng: &mut R,
) -> Result<ParamTree<T>, PolicyError> {
    cfg.validate()?;
    let p = actor_prefix(group);
    let mut tree = ParamTree::new();
    insert_cnn(
        &mut tree,
        &format!("{}.enc", p),
        cfg.obs_channels,
        cfg.fov_h,
        cfg.fov_w,
        &cfg.conv_channels,
        cfg.features,
        rng,
    )?;
    for l in 0..cfg.gnn_layers {
        for k in 0..=cfg.hops {
            tree.insert(tap_path(group, l, k), orthogonal(&[cfg.features, cfg.features], 1.0, rng));
        }
    }
    tree.insert(format!("{}.head.fc0.w", p), orthogonal(&[cfg.features, cfg.head_hidden], HIDDEN_GAIN, rng));
    tree.insert(format!("{}.head.fc0.b", p), zeros(cfg.head_hidden));
    tree.insert(format!("{}.head.out.w", p), orthogonal(&[cfg.head_hidden, Action::COUNT], POLICY_GAIN, rng));
    tree.insert(format!("{}.head.out.b", p), zeros(Action::COUNT));
    Ok(tree)
}

/// Fresh critic parameters `φ` for one group.
pub fn init_critic<T: Scalar, R: Rng>(
    cfg: &PolicyConfig,
    group: Group,
    rng: &mut R,
) -> Result<ParamTree<T>, PolicyError> {
    cfg.validate()?;
    let p = critic_prefix(group);
    let mut tree = ParamTree::new();
    insert_cnn(
        &mut tree,
        &format!("{}.local", p),
        cfg.obs_channels,
        cfg.fov_h,
        cfg.fov_w,
        &cfg.critic_conv_channels,
        cfg.critic_features,
        rng,
    )?;
    insert_cnn(
        &mut tree,
        &format!("{}.global", p),
        cfg.global_channels,
        cfg.global_h,
        cfg.global_w,
        &cfg.critic_conv_channels,
        cfg.critic_features,
        rng,
    )?;
    tree.insert(
        format!("{}.head.fc0.w", p),
        orthogonal(&[2 * cfg.critic_features, cfg.critic_hidden], HIDDEN_GAIN, rng),
    );
    tree.insert(format!("{}.head.fc0.b", p), zeros(cfg.critic_hidden));
    tree.insert(format!("{}.head.out.w", p), orthogonal(&[cfg.critic_hidden, 1], 1.0, rng));
    tree.insert(format!("{}.head.out.b", p), zeros(1));
    Ok(tree)
}

/// Copies every `actor.coop.*` entry to `actor.si.*`.
pub fn clone_actor_group(tree: &ParamTree<f32>, from: Group, to: Group) -> ParamTree<f32> {
    let (src, dst) = (actor_prefix(from), actor_prefix(to));
    let mut out = ParamTree::new();
    for (path, t) in tree.subtree(&format!("{}.", src)).iter() {
        out.insert(format!("{}{}", dst, &path[src.len()..]), t.clone());
    }
    out
}

/// Registers parameters on a tape: trainable paths become gradient leaves,
/// the rest constants.
pub struct Binder<'a, T: Scalar> {
    pub tree: &'a ParamTree<T>,
    pub trainable: &'a dyn Fn(&str) -> bool,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(tree: &'a ParamTree<T>, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self { tree, trainable }
    }

    pub fn bind(&self, g: &mut Graph<T>, path: &str) -> Result<Var, PolicyError> {
        if (self.trainable)(path) {
            Ok(g.param_from(self.tree, path)?)
        } else {
            let t = self
                .tree
                .get(path)
                .ok_or_else(|| PolicyError::MissingParams(path.to_string()))?;
            Ok(g.input(t.clone()))
        }
    }
}

/// Conv stack → flatten → dense → leaky_relu. `x` is `[R, C, H, W]`.
pub fn cnn_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binder<T>,
    prefix: &str,
    x: Var,
    convs: usize,
) -> Result<Var, PolicyError> {
    let mut h = x;
    for l in 0..convs {
        let w = b.bind(g, &format!("{}.conv{}.w", prefix, l))?;
        let bias = b.bind(g, &format!("{}.conv{}.b", prefix, l))?;
        h = g.conv2d(h, w, bias, 1)?;
        h = g.leaky_relu(h, LEAKY_SLOPE);
        if l + 1 < convs {
            h = g.avg_pool2(h)?;
        }
    }
    let s = g.shape(h).to_vec();
    let flat = g.reshape(h, &[s[0], s[1..].iter().product()])?;
    let w = b.bind(g, &format!("{}.fc.w", prefix))?;
    let bias = b.bind(g, &format!("{}.fc.b", prefix))?;
    let y = g.dense(flat, w, bias)?;
    Ok(g.leaky_relu(y, LEAKY_SLOPE))
}

/// Two-layer MLP with leaky_relu in between.
pub fn mlp_forward<T: Scalar>(g: &mut Graph<T>, b: &Binder<T>, prefix: &str, x: Var) -> Result<Var, PolicyError> {
    let w0 = b.bind(g, &format!("{}.fc0.w", prefix))?;
    let b0 = b.bind(g, &format!("{}.fc0.b", prefix))?;
    let h = g.dense(x, w0, b0)?;
    let h = g.leaky_relu(h, LEAKY_SLOPE);
    let w1 = b.bind(g, &format!("{}.out.w", prefix))?;
    let b1 = b.bind(g, &format!("{}.out.b", prefix))?;
    Ok(g.dense(h, w1, b1)?)
}

/// Row indices `(t, agent)` for `agents` over `bs` steps of `n` agents.
pub fn group_rows(agents: &[usize], bs: usize, n: usize) -> Vec<usize> {
    (0..bs).flat_map(|t| agents.iter().map(move |&a| t * n + a)).collect()
}

/// Applies `f` to each group's rows of `x` (`[B·N, ...]`) and reassembles the
/// results in `(t, agent)` order.
pub fn per_group<T: Scalar>(
    g: &mut Graph<T>,
    assign: &ParamAssignment,
    bs: usize,
    x: Var,
    mut f: impl FnMut(&mut Graph<T>, Group, Var) -> Result<Var, PolicyError>,
) -> Result<Var, PolicyError> {
    let n = assign.n_agents();
    let groups = assign.groups();
    if groups.len() == 1 {
        return f(g, groups[0].0, x);
    }
    let mut parts = Vec::new();
    let mut order = Vec::new();
    for (grp, agents) in &groups {
        let rows = group_rows(agents, bs, n);
        let sel = g.select_rows(x, &rows)?;
        parts.push(f(g, *grp, sel)?);
        order.extend(rows);
    }
    let stacked = g.concat(&parts, 0)?;
    let mut inverse = vec![0; order.len()];
    for (pos, &row) in order.iter().enumerate() {
        inverse[row] = pos;
    }
    Ok(g.select_rows(stacked, &inverse)?)
}

/// Tape handles of one actor forward pass, all `[B·N, ·]` in `(t, agent)` order.
#[derive(Clone, Copy, Debug)]
pub struct ActorVars {
    /// Encodings `X = f_ν(z)` each agent transmits.
    pub messages: Var,
    /// AGNN output rows.
    pub gnn_out: Var,
    pub logits: Var,
    pub log_probs: Var,
}

/// Batched actor: `obs` is `[B·N, C, H_fov, W_fov]`, `shift` is `[B, N, N]`.
pub fn actor_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binder<T>,
    cfg: &PolicyConfig,
    assign: &ParamAssignment,
    obs: Var,
    shift: Var,
) -> Result<ActorVars, PolicyError> {
    let n = assign.n_agents();
    let ss = g.shape(shift).to_vec();
    let os = g.shape(obs).to_vec();
    if ss.len() != 3 || ss[1] != n || ss[2] != n {
        return Err(PolicyError::Shape(format!("shift {:?} for {} agents", ss, n)));
    }
    let bs = ss[0];
    if os != [bs * n, cfg.obs_channels, cfg.fov_h, cfg.fov_w] {
        return Err(PolicyError::Shape(format!(
            "observations {:?}, expected [{}, {}, {}, {}]",
            os,
            bs * n,
            cfg.obs_channels,
            cfg.fov_h,
            cfg.fov_w
        )));
    }
    let convs = cfg.conv_channels.len();
    let messages = per_group(g, assign, bs, obs, |g, grp, x| {
        cnn_forward(g, b, &format!("{}.enc", actor_prefix(grp)), x, convs)
    })?;
    let mut x = messages;
    for l in 0..cfg.gnn_layers {
        let mut banks = Vec::new();
        for (grp, agents) in assign.groups() {
            let taps = (0..=cfg.hops)
                .map(|k| b.bind(g, &tap_path(grp, l, k)))
                .collect::<Result<Vec<_>, _>>()?;
            banks.push(TapeBank { taps, agents });
        }
        let y = hetero_graph_conv_on(g, x, shift, &banks)?;
        x = cfg.nonlinearity.apply(g, y);
    }
    let gnn_out = x;
    let logits = per_group(g, assign, bs, gnn_out, |g, grp, x| {
        mlp_forward(g, b, &format!("{}.head", actor_prefix(grp)), x)
    })?;
    let log_probs = g.log_softmax(logits)?;
    Ok(ActorVars {
        messages,
        gnn_out,
        logits,
        log_probs,
    })
}

/// Values `Vⁱ` for the rows of one group. `local` is `[B·|group|, C, H_fov,
/// W_fov]` in `(t, agent)` order, `global` is `[B, C_g, H, W]`; returns `[B·|group|]`.
pub fn critic_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binder<T>,
    cfg: &PolicyConfig,
    group: Group,
    group_size: usize,
    local: Var,
    global: Var,
) -> Result<Var, PolicyError> {
    let bs = g.shape(global)[0];
    let ls = g.shape(local).to_vec();
    let gs = g.shape(global).to_vec();
    if ls != [bs * group_size, cfg.obs_channels, cfg.fov_h, cfg.fov_w]
        || gs != [bs, cfg.global_channels, cfg.global_h, cfg.global_w]
    {
        return Err(PolicyError::Shape(format!(
            "critic inputs local {:?}, global {:?} for group of {}",
            ls, gs, group_size
        )));
    }
    let p = critic_prefix(group);
    let convs = cfg.critic_conv_channels.len();
    let lf = cnn_forward(g, b, &format!("{}.local", p), local, convs)?;
    let gf = cnn_forward(g, b, &format!("{}.global", p), global, convs)?;
    let rep: Vec<usize> = (0..bs).flat_map(|t| std::iter::repeat(t).take(group_size)).collect();
    let gf = if group_size == 1 { gf } else { g.select_rows(gf, &rep)? };
    let both = g.concat(&[lf, gf], 1)?;
    let v = mlp_forward(g, b, &format!("{}.head", p), both)?;
    Ok(g.reshape(v, &[bs * group_size])?)
}
