//! A two-agent, two-state game small enough to enumerate every trajectory.
//!
//! Agent 0 observes the state, agent 1 observes nothing. Each agent sends the
//! scalar message `m = M[g][z]` and acts with logits
//! `W[g][z][a] + U[g][a]·m_other`, where `g` is its parameter group. The
//! per-group parameters are packed as `[W00, W01, W10, W11, U0, U1, M0, M1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N_AGENTS: usize = 2;
pub const N_STATES: usize = 2;
pub const N_ACTIONS: usize = 2;
pub const GROUP_PARAMS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct TabularGame {
    pub init: [f64; N_STATES],
    /// `trans[s][a0][a1][s']`.
    pub trans: [[[[f64; N_STATES]; N_ACTIONS]; N_ACTIONS]; N_STATES],
    /// `reward[i][s][a0][a1]`.
    pub reward: [[[[f64; N_ACTIONS]; N_ACTIONS]; N_STATES]; N_AGENTS],
    pub horizon: usize,
    pub gamma: f64,
}

fn simplex<R: Rng>(rng: &mut R) -> [f64; 2] {
    let p = rng.gen_range(0.1..0.9);
    [p, 1.0 - p]
}

impl TabularGame {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = simplex(&mut rng);
        let mut trans = [[[[0.0; 2]; 2]; 2]; 2];
        let mut reward = [[[[0.0; 2]; 2]; 2]; 2];
        for s in 0..2 {
            for a0 in 0..2 {
                for a1 in 0..2 {
                    trans[s][a0][a1] = simplex(&mut rng);
                    for r in reward.iter_mut() {
                        r[s][a0][a1] = rng.gen_range(-1.0..1.0);
                    }
                }
            }
        }
        Self {
            init,
            trans,
            reward,
            horizon: 3,
            gamma: 1.0,
        }
    }

    pub fn observation(agent: usize, s: usize) -> usize {
        if agent == 0 {
            s
        } else {
            0
        }
    }
}

/// Parameters of both groups; `groups[0]` is cooperative, `groups[1]`
/// self-interested (unused unless `si` is set).
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    pub groups: [[f64; GROUP_PARAMS]; 2],
    pub si: Option<usize>,
}

/// Parameter group selected by an estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TabGroup {
    Cooperative,
    SelfInterested,
}

impl TabGroup {
    fn index(self) -> usize {
        match self {
            TabGroup::Cooperative => 0,
            TabGroup::SelfInterested => 1,
        }
    }
}

impl TabularPolicy {
    pub fn random(seed: u64, si: Option<usize>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut groups = [[0.0; GROUP_PARAMS]; 2];
        for g in groups.iter_mut() {
            for v in g.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        Self { groups, si }
    }

    pub fn group_of(&self, agent: usize) -> usize {
        usize::from(self.si == Some(agent))
    }

    pub fn message(&self, agent: usize, s: usize) -> f64 {
        self.groups[self.group_of(agent)][6 + TabularGame::observation(agent, s)]
    }

    /// `π^j(·|s)` for agent `j`.
    pub fn probs(&self, agent: usize, s: usize) -> [f64; N_ACTIONS] {
        let p = &self.groups[self.group_of(agent)];
        let z = TabularGame::observation(agent, s);
        let m = self.message(1 - agent, s);
        let l: Vec<f64> = (0..N_ACTIONS).map(|a| p[z * 2 + a] + p[4 + a] * m).collect();
        let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - mx).exp()).collect();
        let z = e.iter().sum::<f64>();
        [e[0] / z, e[1] / z]
    }

    /// `∇_{θ_group} log π^j(a|s)`.
    pub fn score(&self, agent: usize, s: usize, a: usize, group: TabGroup) -> [f64; GROUP_PARAMS] {
        let gi = group.index();
        let other = 1 - agent;
        let pi = self.probs(agent, s);
        let d: Vec<f64> = (0..N_ACTIONS).map(|b| f64::from(u8::from(b == a)) - pi[b]).collect();
        let mut out = [0.0; GROUP_PARAMS];
        if self.group_of(agent) == gi {
            let z = TabularGame::observation(agent, s);
            let m = self.message(other, s);
            for b in 0..N_ACTIONS {
                out[z * 2 + b] += d[b];
                out[4 + b] += d[b] * m;
            }
        }
        if self.group_of(other) == gi {
            let u = &self.groups[self.group_of(agent)];
            let zo = TabularGame::observation(other, s);
            out[6 + zo] += (0..N_ACTIONS).map(|b| d[b] * u[4 + b]).sum::<f64>();
        }
        out
    }
}

/// Which parameters move and whose rewards weight the score.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimator {
    pub group: TabGroup,
    pub reward_agents: Vec<usize>,
}

impl Estimator {
    /// Shared parameters, team reward.
    pub fn cooperative() -> Self {
        Self {
            group: TabGroup::Cooperative,
            reward_agents: (0..N_AGENTS).collect(),
        }
    }

    /// Self-interested parameters, own reward.
    pub fn self_interested(si: usize) -> Self {
        Self {
            group: TabGroup::SelfInterested,
            reward_agents: vec![si],
        }
    }
}

#[derive(Clone, Debug)]
struct Step {
    s: usize,
    a: [usize; N_AGENTS],
}

fn trajectory_gradient(
    game: &TabularGame,
    pol: &TabularPolicy,
    est: &Estimator,
    steps: &[Step],
) -> [f64; GROUP_PARAMS] {
    let rew: Vec<f64> = steps
        .iter()
        .map(|st| est.reward_agents.iter().map(|&i| game.reward[i][st.s][st.a[0]][st.a[1]]).sum())
        .collect();
    let mut g = [0.0; GROUP_PARAMS];
    for t in 0..steps.len() {
        let mut to_go = 0.0;
        for u in (t..steps.len()).rev() {
            to_go = rew[u] + game.gamma * to_go;
        }
        let w = game.gamma.powi(t as i32) * to_go;
        for j in 0..N_AGENTS {
            let sc = pol.score(j, steps[t].s, steps[t].a[j], est.group);
            for (acc, v) in g.iter_mut().zip(sc) {
                *acc += w * v;
            }
        }
    }
    g
}

/// Estimator expectation by enumerating all trajectories.
pub fn exact_gradient(game: &TabularGame, pol: &TabularPolicy, est: &Estimator) -> [f64; GROUP_PARAMS] {
    let mut total = [0.0; GROUP_PARAMS];
    let mut stack: Vec<(Vec<Step>, usize, f64)> = (0..N_STATES).map(|s| (Vec::new(), s, game.init[s])).collect();
    while let Some((hist, s, p)) = stack.pop() {
        if hist.len() == game.horizon {
            let g = trajectory_gradient(game, pol, est, &hist);
            for (acc, v) in total.iter_mut().zip(g) {
                *acc += p * v;
            }
            continue;
        }
        let (p0, p1) = (pol.probs(0, s), pol.probs(1, s));
        for a0 in 0..N_ACTIONS {
            for a1 in 0..N_ACTIONS {
                let pa = p * p0[a0] * p1[a1];
                let mut h = hist.clone();
                h.push(Step { s, a: [a0, a1] });
                if h.len() == game.horizon {
                    stack.push((h, s, pa));
                } else {
                    for s2 in 0..N_STATES {
                        stack.push((h.clone(), s2, pa * game.trans[s][a0][a1][s2]));
                    }
                }
            }
        }
    }
    total
}

fn draw<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut c = 0.0;
    for (i, &v) in p.iter().enumerate() {
        c += v;
        if u < c {
            return i;
        }
    }
    p.len() - 1
}

/// Monte Carlo mean and standard error of the estimator over `n` episodes.
pub fn sample_gradient(
    game: &TabularGame,
    pol: &TabularPolicy,
    est: &Estimator,
    n: usize,
    seed: u64,
) -> ([f64; GROUP_PARAMS], [f64; GROUP_PARAMS]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = [0.0; GROUP_PARAMS];
    let mut sq = [0.0; GROUP_PARAMS];
    for _ in 0..n {
        let mut s = draw(&game.init, &mut rng);
        let mut steps = Vec::with_capacity(game.horizon);
        for _ in 0..game.horizon {
            let a = [draw(&pol.probs(0, s), &mut rng), draw(&pol.probs(1, s), &mut rng)];
            steps.push(Step { s, a });
            s = draw(&game.trans[s][a[0]][a[1]], &mut rng);
        }
        let g = trajectory_gradient(game, pol, est, &steps);
        for k in 0..GROUP_PARAMS {
            sum[k] += g[k];
            sq[k] += g[k] * g[k];
        }
    }
    let nf = n as f64;
    let mut mean = [0.0; GROUP_PARAMS];
    let mut se = [0.0; GROUP_PARAMS];
    for k in 0..GROUP_PARAMS {
        mean[k] = sum[k] / nf;
        let var = (sq[k] / nf - mean[k] * mean[k]).max(0.0) * nf / (nf - 1.0).max(1.0);
        se[k] = (var / nf).sqrt();
    }
    (mean, se)
}
