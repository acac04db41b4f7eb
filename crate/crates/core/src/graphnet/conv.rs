//! Aggregation graph convolutions `X' = Σₖ SᵏX Hₖ`, homogeneous and with
//! per-agent filter banks, recorded on a [`Graph`] so every tap is trainable.
//!
//! Node features are laid out as `[B·N, F]` (batch-major, agent-minor) and shift
//! operators as `[B, N, N]`, so one call convolves a whole minibatch of
//! independent time steps.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Scalar, Tensor, Var};

use super::shift::GraphShiftOperator;
use super::GraphError;

/// Filter taps `H₀..H_K` of one bank, each `F×F'`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    taps: Vec<Tensor<f64>>,
}

impl FilterBank {
    pub fn new(taps: Vec<Tensor<f64>>) -> Result<Self, GraphError> {
        let first = taps.first().ok_or(GraphError::EmptyBank)?;
        if first.rank() != 2 {
            return Err(GraphError::Dims(format!("tap rank {}", first.rank())));
        }
        if taps.iter().any(|t| t.shape() != first.shape()) {
            return Err(GraphError::Dims("taps differ in shape".into()));
        }
        Ok(Self { taps })
    }

    pub fn hops(&self) -> usize {
        self.taps.len() - 1
    }

    pub fn f_in(&self) -> usize {
        self.taps[0].shape()[0]
    }

    pub fn f_out(&self) -> usize {
        self.taps[0].shape()[1]
    }

    pub fn taps(&self) -> &[Tensor<f64>] {
        &self.taps
    }

    pub fn zeroed(&self) -> Self {
        Self {
            taps: self.taps.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// One bank per sharing group plus the agent → group assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroFilterBank {
    banks: Vec<FilterBank>,
    assignment: Vec<usize>,
}

impl HeteroFilterBank {
    pub fn new(banks: Vec<FilterBank>, assignment: Vec<usize>) -> Result<Self, GraphError> {
        let first = banks.first().ok_or(GraphError::EmptyBank)?;
        for b in &banks {
            if b.hops() != first.hops() || b.f_in() != first.f_in() || b.f_out() != first.f_out() {
                return Err(GraphError::Dims("banks disagree on (K, F, F')".into()));
            }
        }
        if let Some(&g) = assignment.iter().find(|&&g| g >= banks.len()) {
            return Err(GraphError::Dims(format!("assignment to missing bank {}", g)));
        }
        Ok(Self { banks, assignment })
    }

    /// Every agent shares `bank`.
    pub fn shared(bank: FilterBank, n_agents: usize) -> Self {
        Self {
            banks: vec![bank],
            assignment: vec![0; n_agents],
        }
    }

    pub fn bank_of(&self, agent: usize) -> &FilterBank {
        &self.banks[self.assignment[agent]]
    }

    pub fn banks(&self) -> &[FilterBank] {
        &self.banks
    }

    pub fn banks_mut(&mut self) -> &mut [FilterBank] {
        &mut self.banks
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn n_agents(&self) -> usize {
        self.assignment.len()
    }

    /// Agents assigned to each bank, in ascending order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut g = vec![Vec::new(); self.banks.len()];
        for (i, &b) in self.assignment.iter().enumerate() {
            g[b].push(i);
        }
        g
    }
}

/// `N×F` per-agent data; row `i` is what agent `i` transmits.
pub type MessageMatrix = Tensor<f64>;

/// Nonlinearity between cascaded aggregation layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    LeakyRelu,
    Relu,
    Tanh,
    Identity,
}

pub const LEAKY_SLOPE: f64 = 0.01;

impl Nonlinearity {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Nonlinearity::LeakyRelu => g.leaky_relu(x, LEAKY_SLOPE),
            Nonlinearity::Relu => g.relu(x),
            Nonlinearity::Tanh => g.tanh(x),
            Nonlinearity::Identity => x,
        }
    }
}

/// Taps of one group on the tape, together with the agents (within a time
/// step) that use them.
#[derive(Clone, Debug)]
pub struct TapeBank {
    pub taps: Vec<Var>,
    pub agents: Vec<usize>,
}

/// Shifted signals `Z_k = SᵏX` for `k = 0..=hops`, each `[B·N, F]`.
pub fn shifted_signals<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    s: Var,
    hops: usize,
) -> Result<Vec<Var>, GraphError> {
    let (bs, n) = {
        let ss = g.shape(s);
        if ss.len() != 3 || ss[1] != ss[2] {
            return Err(GraphError::Dims(format!("shift operator shape {:?}", ss)));
        }
        (ss[0], ss[1])
    };
    let xs = g.shape(x).to_vec();
    if xs.len() != 2 || xs[0] != bs * n {
        return Err(GraphError::Dims(format!("signal {:?} for {} steps of {} agents", xs, bs, n)));
    }
    let f = xs[1];
    let mut out = vec![x];
    let mut z = g.reshape(x, &[bs, n, f])?;
    for _ in 0..hops {
        z = g.batch_matmul(s, z)?;
        out.push(g.reshape(z, &[bs * n, f])?);
    }
    Ok(out)
}

/// Heterogeneous convolution: row `i` of every time step uses the taps of the
/// bank that lists `i`. Output rows are in the same `[B·N]` order as `x`.
pub fn hetero_graph_conv_on<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    s: Var,
    banks: &[TapeBank],
) -> Result<Var, GraphError> {
    let first = banks.first().ok_or(GraphError::EmptyBank)?;
    let hops = first.taps.len() - 1;
    let f_in = g.shape(x)[1];
    for b in banks {
        if b.taps.len() != hops + 1 {
            return Err(GraphError::Dims("banks disagree on K".into()));
        }
        for &tap in &b.taps {
            if g.shape(tap).len() != 2 || g.shape(tap)[0] != f_in {
                return Err(GraphError::Dims(format!(
                    "tap {:?} does not accept F = {}",
                    g.shape(tap),
                    f_in
                )));
            }
        }
    }
    let (bs, n) = (g.shape(s)[0], g.shape(s)[1]);
    let mut owner = vec![usize::MAX; n];
    for (bi, b) in banks.iter().enumerate() {
        for &a in &b.agents {
            if a >= n || owner[a] != usize::MAX {
                return Err(GraphError::Dims(format!("agent {} assigned twice or out of range", a)));
            }
            owner[a] = bi;
        }
    }
    if owner.iter().any(|&o| o == usize::MAX) {
        return Err(GraphError::Dims("agent without filter bank".into()));
    }
    let z = shifted_signals(g, x, s, hops)?;

    if banks.len() == 1 {
        let mut terms = Vec::with_capacity(hops + 1);
        for (k, &zk) in z.iter().enumerate() {
            terms.push(g.matmul(zk, first.taps[k])?);
        }
        return Ok(g.add_all(&terms)?);
    }

    let mut parts = Vec::new();
    let mut order = Vec::new();
    for b in banks {
        if b.agents.is_empty() {
            continue;
        }
        let rows: Vec<usize> = (0..bs).flat_map(|t| b.agents.iter().map(move |&a| t * n + a)).collect();
        let mut terms = Vec::with_capacity(hops + 1);
        for (k, &zk) in z.iter().enumerate() {
            let sel = g.select_rows(zk, &rows)?;
            terms.push(g.matmul(sel, b.taps[k])?);
        }
        parts.push(g.add_all(&terms)?);
        order.extend(rows);
    }
    let stacked = g.concat(&parts, 0)?;
    let mut inverse = vec![0; order.len()];
    for (pos, &row) in order.iter().enumerate() {
        inverse[row] = pos;
    }
    Ok(g.select_rows(stacked, &inverse)?)
}

/// Homogeneous convolution: every agent uses `taps`.
pub fn graph_conv_on<T: Scalar>(g: &mut Graph<T>, x: Var, s: Var, taps: &[Var]) -> Result<Var, GraphError> {
    let n = g.shape(s).get(1).copied().unwrap_or(0);
    hetero_graph_conv_on(
        g,
        x,
        s,
        &[TapeBank {
            taps: taps.to_vec(),
            agents: (0..n).collect(),
        }],
    )
}

fn check_signal(x: &MessageMatrix, s: &GraphShiftOperator, f_in: usize) -> Result<(), GraphError> {
    if x.rank() != 2 || x.shape()[0] != s.n_agents() || x.shape()[1] != f_in {
        return Err(GraphError::Dims(format!(
            "messages {:?} vs {} agents with F = {}",
            x.shape(),
            s.n_agents(),
            f_in
        )));
    }
    Ok(())
}

fn shift_input(g: &mut Graph<f64>, s: &GraphShiftOperator) -> Var {
    let n = s.n_agents();
    g.input(Tensor::new(vec![1, n, n], s.matrix().to_vec()).expect("n*n entries"))
}

/// `X' = Σₖ SᵏX Hₖ`.
pub fn graph_conv(x: &MessageMatrix, s: &GraphShiftOperator, bank: &FilterBank) -> Result<MessageMatrix, GraphError> {
    hetero_graph_conv(x, s, &HeteroFilterBank::shared(bank.clone(), s.n_agents()))
}

/// Row `i` is `Σₖ [Sᵏ]ᵢ X Hᵏᵢ` with agent `i`'s own taps.
pub fn hetero_graph_conv(
    x: &MessageMatrix,
    s: &GraphShiftOperator,
    banks: &HeteroFilterBank,
) -> Result<MessageMatrix, GraphError> {
    if banks.n_agents() != s.n_agents() {
        return Err(GraphError::Dims(format!(
            "{} bank assignments for {} agents",
            banks.n_agents(),
            s.n_agents()
        )));
    }
    check_signal(x, s, banks.banks()[0].f_in())?;
    let mut g = Graph::<f64>::new();
    let xv = g.input(x.clone());
    let sv = shift_input(&mut g, s);
    let tape_banks = tape_banks(&mut g, banks);
    let out = hetero_graph_conv_on(&mut g, xv, sv, &tape_banks)?;
    Ok(g.value(out).clone())
}

fn tape_banks(g: &mut Graph<f64>, banks: &HeteroFilterBank) -> Vec<TapeBank> {
    banks
        .banks()
        .iter()
        .zip(banks.groups())
        .map(|(b, agents)| TapeBank {
            taps: b.taps().iter().map(|t| g.input(t.clone())).collect(),
            agents,
        })
        .collect()
}

/// Cascade `X_l = σ(g_{η_l}(X_{l-1}; S))` over `layers`.
pub fn agnn_forward(
    x0: &MessageMatrix,
    s: &GraphShiftOperator,
    layers: &[HeteroFilterBank],
    sigma: Nonlinearity,
) -> Result<MessageMatrix, GraphError> {
    if layers.is_empty() {
        return Err(GraphError::EmptyBank);
    }
    for w in layers.windows(2) {
        if w[0].banks()[0].f_out() != w[1].banks()[0].f_in() {
            return Err(GraphError::Dims(format!(
                "layer chain F' = {} into F = {}",
                w[0].banks()[0].f_out(),
                w[1].banks()[0].f_in()
            )));
        }
    }
    check_signal(x0, s, layers[0].banks()[0].f_in())?;
    let mut g = Graph::<f64>::new();
    let mut x = g.input(x0.clone());
    let sv = shift_input(&mut g, s);
    for layer in layers {
        let tb = tape_banks(&mut g, layer);
        let y = hetero_graph_conv_on(&mut g, x, sv, &tb)?;
        x = sigma.apply(&mut g, y);
    }
    Ok(g.value(x).clone())
}
