use serde::{Deserialize, Serialize};

use super::GraphError;

/// How the binary adjacency is turned into a shift operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `D^{-1/2} Â D^{-1/2}` with `D` the row sums of `Â`.
    #[default]
    Symmetric,
    /// `D^{-1} Â`.
    RowStochastic,
    /// `Â` unchanged.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub normalization: Normalization,
    pub self_loops: bool,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            normalization: Normalization::Symmetric,
            self_loops: true,
        }
    }
}

impl ShiftConfig {
    pub fn binary() -> Self {
        Self {
            normalization: Normalization::None,
            self_loops: false,
        }
    }
}

/// Normalized `N×N` connectivity. `[S]ᵢⱼ ≠ 0` only if `j` can send to `i`
/// (or `i == j` with self-loops).
#[derive(Clone, Debug, PartialEq)]
pub struct GraphShiftOperator {
    n: usize,
    /// `adjacency[i*n + j]`: `j` sends to `i`. Never holds self-loops.
    adjacency: Vec<bool>,
    config: ShiftConfig,
    matrix: Vec<f64>,
}

impl GraphShiftOperator {
    /// Builds from undirected agent pairs. Self-pairs are ignored.
    pub fn build(edges: &[(usize, usize)], n_agents: usize, config: ShiftConfig) -> Result<Self, GraphError> {
        let mut adjacency = vec![false; n_agents * n_agents];
        for &(a, b) in edges {
            if a >= n_agents || b >= n_agents {
                return Err(GraphError::AgentOutOfRange {
                    agent: a.max(b),
                    n: n_agents,
                });
            }
            if a != b {
                adjacency[a * n_agents + b] = true;
                adjacency[b * n_agents + a] = true;
            }
        }
        Ok(Self::from_adjacency(n_agents, adjacency, config))
    }

    /// Directed form: `adjacency[i*n + j]` means `j ∈ 𝒩ᵢ`.
    pub fn from_adjacency(n: usize, mut adjacency: Vec<bool>, config: ShiftConfig) -> Self {
        assert_eq!(adjacency.len(), n * n, "adjacency must be n*n");
        for i in 0..n {
            adjacency[i * n + i] = false;
        }
        let matrix = normalize(n, &adjacency, config);
        Self {
            n,
            adjacency,
            config,
            matrix,
        }
    }

    /// Operator with no connections at all (`S = 0`).
    pub fn zero(n: usize) -> Self {
        Self {
            n,
            adjacency: vec![false; n * n],
            config: ShiftConfig::binary(),
            matrix: vec![0.0; n * n],
        }
    }

    pub fn n_agents(&self) -> usize {
        self.n
    }

    pub fn config(&self) -> ShiftConfig {
        self.config
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.n + j]
    }

    /// Whether `j` sends to `i` (self-loops excluded).
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n + j]
    }

    /// In-neighbours of `i` with non-zero weight, including `i` itself when
    /// the diagonal entry is non-zero.
    pub fn in_neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.get(i, j) != 0.0).collect()
    }

    /// Silences agent `i`: no other agent receives from it, while `i` keeps
    /// receiving. Masking happens on the adjacency, then the result is
    /// renormalized.
    pub fn mask_outgoing(&self, agent: usize) -> Result<Self, GraphError> {
        if agent >= self.n {
            return Err(GraphError::AgentOutOfRange { agent, n: self.n });
        }
        let mut adjacency = self.adjacency.clone();
        for j in 0..self.n {
            if j != agent {
                adjacency[j * self.n + agent] = false;
            }
        }
        if self.matrix.iter().all(|&v| v == 0.0) && self.config == ShiftConfig::binary() {
            return Ok(self.clone());
        }
        Ok(Self::from_adjacency(self.n, adjacency, self.config))
    }

    /// Shortest hop distance from `from` to `to` along send edges, if any.
    pub fn hop_distance(&self, from: usize, to: usize) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.n];
        dist[from] = 0;
        let mut queue = std::collections::VecDeque::from([from]);
        while let Some(u) = queue.pop_front() {
            for v in 0..self.n {
                if dist[v] == usize::MAX && self.get(v, u) != 0.0 {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        (dist[to] != usize::MAX).then_some(dist[to])
    }
}

fn normalize(n: usize, adjacency: &[bool], config: ShiftConfig) -> Vec<f64> {
    let mut a: Vec<f64> = adjacency.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect();
    if config.self_loops {
        for i in 0..n {
            a[i * n + i] = 1.0;
        }
    }
    let deg: Vec<f64> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
    match config.normalization {
        Normalization::None => a,
        Normalization::RowStochastic => {
            for i in 0..n {
                if deg[i] > 0.0 {
                    a[i * n..(i + 1) * n].iter_mut().for_each(|v| *v /= deg[i]);
                }
            }
            a
        }
        Normalization::Symmetric => {
            let inv: Vec<f64> = deg.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
            for i in 0..n {
                for j in 0..n {
                    a[i * n + j] *= inv[i] * inv[j];
                }
            }
            a
        }
    }
}
