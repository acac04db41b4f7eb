//! Per-agent execution of the aggregation convolution using only messages from
//! direct neighbours.
//!
//! Agent `i` keeps its running aggregates `yᵏᵢ`, with `y⁰ᵢ = xᵢ` and
//! `yᵏᵢ = Σ_{j∈𝒩ᵢ} [S]ᵢⱼ yᵏ⁻¹ⱼ`. Each hop round is a barrier: every agent
//! publishes its latest aggregate, then every agent folds in what it received.

use super::conv::{FilterBank, HeteroFilterBank, MessageMatrix};
use super::shift::GraphShiftOperator;
use super::GraphError;
use crate::diffcore::Tensor;

/// State held by a single agent.
#[derive(Clone, Debug)]
pub struct LocalNode {
    id: usize,
    /// `(j, [S]ᵢⱼ)` for every non-zero entry of row `i`, including `j == i`.
    weights: Vec<(usize, f64)>,
    aggregates: Vec<Vec<f64>>,
}

impl LocalNode {
    pub fn new(id: usize, x: Vec<f64>, s: &GraphShiftOperator) -> Self {
        let weights = s.in_neighbors(id).into_iter().map(|j| (j, s.get(id, j))).collect();
        Self {
            id,
            weights,
            aggregates: vec![x],
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Hops aggregated so far.
    pub fn hops_done(&self) -> usize {
        self.aggregates.len() - 1
    }

    /// The aggregate this agent sends in the next round.
    pub fn outbox(&self) -> &[f64] {
        self.aggregates.last().expect("y0 always present")
    }

    /// Agents whose messages this node needs each round.
    pub fn senders(&self) -> impl Iterator<Item = usize> + '_ {
        self.weights.iter().map(|&(j, _)| j).filter(move |&j| j != self.id)
    }

    /// Folds one round of neighbour aggregates `(j, yᵏ⁻¹ⱼ)` into `yᵏᵢ`.
    pub fn receive(&mut self, inbox: &[(usize, Vec<f64>)]) -> Result<(), GraphError> {
        let prev = self.outbox().to_vec();
        let mut next = vec![0.0; prev.len()];
        for &(j, w) in &self.weights {
            let src: &[f64] = if j == self.id {
                &prev
            } else {
                &inbox
                    .iter()
                    .find(|(from, _)| *from == j)
                    .ok_or(GraphError::MissingNeighbor {
                        agent: self.id,
                        neighbor: j,
                        hop: self.hops_done() + 1,
                    })?
                    .1
            };
            if src.len() != next.len() {
                return Err(GraphError::Dims(format!("message from {} has width {}", j, src.len())));
            }
            for (o, &v) in next.iter_mut().zip(src) {
                *o += w * v;
            }
        }
        self.aggregates.push(next);
        Ok(())
    }

    /// `Σₖ yᵏᵢ Hᵏᵢ`; requires exactly `K` rounds to have been received.
    pub fn output(&self, bank: &FilterBank) -> Result<Vec<f64>, GraphError> {
        if self.hops_done() != bank.hops() {
            return Err(GraphError::Dims(format!(
                "agent {} has {} hops, bank needs {}",
                self.id,
                self.hops_done(),
                bank.hops()
            )));
        }
        let (f, f_out) = (bank.f_in(), bank.f_out());
        let mut out = vec![0.0; f_out];
        for (y, tap) in self.aggregates.iter().zip(bank.taps()) {
            if y.len() != f {
                return Err(GraphError::Dims(format!("aggregate width {} vs F = {}", y.len(), f)));
            }
            let h = tap.data();
            for (p, &yp) in y.iter().enumerate() {
                for (o, &hv) in out.iter_mut().zip(&h[p * f_out..(p + 1) * f_out]) {
                    *o += yp * hv;
                }
            }
        }
        Ok(out)
    }
}

/// Result of one agent's local computation.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalOutput {
    pub row: Vec<f64>,
    /// `y⁰ᵢ..y^Kᵢ`; entry `k` is what neighbours need in round `k + 1`.
    pub outbox: Vec<Vec<f64>>,
}

/// Runs agent `i` given, for each hop `k = 1..=K`, its neighbours' `(k−1)`-hop
/// aggregates.
pub fn local_node_execute(
    agent: usize,
    x_i: &[f64],
    s: &GraphShiftOperator,
    inbox: &[Vec<(usize, Vec<f64>)>],
    bank: &FilterBank,
) -> Result<LocalOutput, GraphError> {
    if inbox.len() != bank.hops() {
        return Err(GraphError::MissingNeighbor {
            agent,
            neighbor: usize::MAX,
            hop: inbox.len() + 1,
        });
    }
    let mut node = LocalNode::new(agent, x_i.to_vec(), s);
    for round in inbox {
        node.receive(round)?;
    }
    let row = node.output(bank)?;
    Ok(LocalOutput {
        row,
        outbox: node.aggregates,
    })
}

/// Synchronous message-passing simulation over all agents; the stacked rows
/// equal the centralized heterogeneous convolution.
pub fn run_decentralized(
    x: &MessageMatrix,
    s: &GraphShiftOperator,
    banks: &HeteroFilterBank,
) -> Result<MessageMatrix, GraphError> {
    let n = s.n_agents();
    if x.rank() != 2 || x.shape()[0] != n || banks.n_agents() != n {
        return Err(GraphError::Dims(format!("messages {:?} for {} agents", x.shape(), n)));
    }
    let hops = banks.banks()[0].hops();
    let mut nodes: Vec<LocalNode> = (0..n).map(|i| LocalNode::new(i, x.row(i).to_vec(), s)).collect();
    for _ in 0..hops {
        let published: Vec<Vec<f64>> = nodes.iter().map(|nd| nd.outbox().to_vec()).collect();
        for node in &mut nodes {
            let inbox: Vec<(usize, Vec<f64>)> = node.senders().map(|j| (j, published[j].clone())).collect();
            node.receive(&inbox)?;
        }
    }
    let mut data = Vec::with_capacity(n * banks.banks()[0].f_out());
    for (i, node) in nodes.iter().enumerate() {
        data.extend(node.output(banks.bank_of(i))?);
    }
    Ok(Tensor::new(vec![n, banks.banks()[0].f_out()], data)?)
}
