use crate::diffcore::Tensor;

use super::config::{Action, EnvConfig, TaskKind};
use super::world::{generate_world, in_right_half, GenerationReport, Grid, Pos, WorldState};
use super::GridError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EnvMode {
    /// Task-specific early termination enabled.
    #[default]
    Train,
    /// Fixed horizon only.
    Eval,
}

/// Counters that termination depends on besides the world itself.
#[derive(Clone, Debug, PartialEq)]
pub struct StepCounters {
    /// Steps since each agent last earned a coverage reward.
    pub stall: Vec<usize>,
    /// Some agent has stood in the right half this episode.
    pub reached_right: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub rewards: Vec<f64>,
    /// Early termination by the task rule; value bootstraps to 0.
    pub terminated: bool,
    /// Horizon reached without a terminal state.
    pub truncated: bool,
    pub observations: Vec<Tensor<f32>>,
    pub edges: Vec<(usize, usize)>,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

fn rewardable(task: TaskKind, p: Pos, width: usize) -> bool {
    match task {
        TaskKind::SplitCoverage => in_right_half(p, width),
        _ => true,
    }
}

fn target_cell(obstacles: &Grid, p: Pos, a: Action) -> Option<Pos> {
    let (dx, dy) = a.delta();
    let (nx, ny) = (p.x as i64 + dx, p.y as i64 + dy);
    if obstacles.get_signed(nx, ny, true) {
        None
    } else {
        Some(Pos::new(nx as usize, ny as usize))
    }
}

/// Advances the world by one joint action and returns per-agent rewards.
///
/// Coverage tasks move all agents simultaneously (co-occupancy allowed), then
/// credit newly covered cells in ascending agent order, so two agents entering
/// the same uncovered cell yield one reward (to the lower index). The path task
/// resolves moves in ascending index order against the current positions of all
/// other agents; a blocked agent stays.
pub fn apply_actions(cfg: &EnvConfig, state: &mut WorldState, actions: &[Action]) -> Result<Vec<f64>, GridError> {
    let n = state.n_agents();
    if actions.len() != n {
        return Err(GridError::BadActions {
            expected: n,
            got: actions.len(),
        });
    }
    let mut rewards = vec![0.0; n];
    if cfg.task.is_coverage() {
        let mut global = state.global_coverage();
        for (i, &a) in actions.iter().enumerate() {
            if let Some(p) = target_cell(&state.obstacles, state.positions[i], a) {
                state.positions[i] = p;
            }
        }
        for i in 0..n {
            let p = state.positions[i];
            if !global.get(p) {
                global.set(p, true);
                if rewardable(cfg.task, p, cfg.width) {
                    rewards[i] = 1.0;
                }
            }
            state.coverage[i].set(p, true);
        }
    } else {
        for (i, &a) in actions.iter().enumerate() {
            if let Some(p) = target_cell(&state.obstacles, state.positions[i], a) {
                let occupied = state.positions.iter().enumerate().any(|(j, &q)| j != i && q == p);
                if !occupied {
                    state.positions[i] = p;
                }
            }
        }
        for i in 0..n {
            if state.positions[i] == state.goals[i] {
                rewards[i] = 1.0;
            }
        }
    }
    state.t += 1;
    Ok(rewards)
}

/// `(terminated, truncated)` after step `t`.
pub fn termination_check(cfg: &EnvConfig, t: usize, counters: &StepCounters, mode: EnvMode) -> (bool, bool) {
    let horizon = match mode {
        EnvMode::Train => cfg.horizon,
        EnvMode::Eval => cfg.eval_horizon(),
    };
    let terminated = mode == EnvMode::Train
        && match cfg.task {
            TaskKind::Coverage => counters.stall.iter().any(|&s| s >= cfg.stall_limit),
            TaskKind::SplitCoverage => {
                counters.reached_right && counters.stall.iter().any(|&s| s >= cfg.stall_limit)
            }
            TaskKind::PathPlanning => false,
        };
    (terminated, !terminated && t >= horizon)
}

/// Egocentric `[2, H_fov, W_fov]` window. Pixel `(r, c)` shows world cell
/// `(x + c − W_fov/2, y + r − H_fov/2)`.
pub fn observe(cfg: &EnvConfig, state: &WorldState, agent: usize) -> Tensor<f32> {
    let (fw, fh) = (cfg.fov_w, cfg.fov_h);
    let (rw, rh) = ((fw / 2) as i64, (fh / 2) as i64);
    let p = state.positions[agent];
    let (px, py) = (p.x as i64, p.y as i64);
    let mut data = vec![0.0f32; 2 * fw * fh];
    let (obst, info) = data.split_at_mut(fw * fh);
    for r in 0..fh as i64 {
        for c in 0..fw as i64 {
            let (x, y) = (px + c - rw, py + r - rh);
            let idx = (r as usize) * fw + c as usize;
            obst[idx] = state.obstacles.get_signed(x, y, true) as u8 as f32;
            if cfg.task.is_coverage() {
                info[idx] = state.coverage[agent].get_signed(x, y, false) as u8 as f32;
            }
        }
    }
    if !cfg.task.is_coverage() {
        let (r, c) = goal_pixel(p, state.goals[agent], rw, rh);
        info[r * fw + c] = 1.0;
    }
    Tensor::new(vec![2, fh, fw], data).expect("2*fh*fw entries")
}

/// Goal pixel in the FOV; goals outside are projected onto the perimeter along
/// the ray from the centre.
pub fn goal_pixel(p: Pos, g: Pos, rw: i64, rh: i64) -> (usize, usize) {
    let dx = g.x as i64 - p.x as i64;
    let dy = g.y as i64 - p.y as i64;
    let (ox, oy) = if dx.abs() <= rw && dy.abs() <= rh {
        (dx, dy)
    } else {
        let sx = if dx != 0 { rw as f64 / dx.abs() as f64 } else { f64::INFINITY };
        let sy = if dy != 0 { rh as f64 / dy.abs() as f64 } else { f64::INFINITY };
        let s = sx.min(sy);
        let ox = ((dx as f64 * s).round() as i64).clamp(-rw, rw);
        let oy = ((dy as f64 * s).round() as i64).clamp(-rh, rh);
        (ox, oy)
    };
    ((rh + oy) as usize, (rw + ox) as usize)
}

/// Undirected pairs `i < j` with `‖pᵢ − pⱼ‖ < d`.
pub fn comm_graph(state: &WorldState, d: f64) -> Vec<(usize, usize)> {
    let n = state.n_agents();
    let d2 = d * d;
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if state.positions[i].dist2(state.positions[j]) < d2 {
                edges.push((i, j));
            }
        }
    }
    edges
}

pub const GLOBAL_CHANNELS: usize = 4;

/// `[4, H, W]`: obstacles, cooperative positions, self-interested position,
/// global coverage (coverage tasks) or all goals (path task).
pub fn global_state(cfg: &EnvConfig, state: &WorldState) -> Tensor<f32> {
    let (w, h) = (state.width(), state.height());
    let plane = w * h;
    let mut data = vec![0.0f32; GLOBAL_CHANNELS * plane];
    for (i, &o) in state.obstacles.cells().iter().enumerate() {
        data[i] = o as u8 as f32;
    }
    for (a, p) in state.positions.iter().enumerate() {
        let ch = if cfg.si_agent == Some(a) { 2 } else { 1 };
        data[ch * plane + p.y * w + p.x] = 1.0;
    }
    if cfg.task.is_coverage() {
        for (i, &c) in state.global_coverage().cells().iter().enumerate() {
            data[3 * plane + i] = c as u8 as f32;
        }
    } else {
        for g in &state.goals {
            data[3 * plane + g.y * w + g.x] = 1.0;
        }
    }
    Tensor::new(vec![GLOBAL_CHANNELS, h, w], data).expect("4*h*w entries")
}

/// One environment instance.
#[derive(Clone, Debug)]
pub struct Env {
    config: EnvConfig,
    state: WorldState,
    counters: StepCounters,
    mode: EnvMode,
    report: GenerationReport,
}

impl Env {
    pub fn new(config: EnvConfig, seed: u64, mode: EnvMode) -> Result<Self, GridError> {
        let (state, report) = generate_world(&config, seed)?;
        Ok(Self::from_state(config, state, mode, report))
    }

    pub fn from_state(config: EnvConfig, state: WorldState, mode: EnvMode, report: GenerationReport) -> Self {
        let counters = StepCounters {
            stall: vec![0; state.n_agents()],
            reached_right: state.positions.iter().any(|&p| in_right_half(p, config.width)),
        };
        Self {
            config,
            state,
            counters,
            mode,
            report,
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn mode(&self) -> EnvMode {
        self.mode
    }

    pub fn generation_report(&self) -> GenerationReport {
        self.report
    }

    pub fn counters(&self) -> &StepCounters {
        &self.counters
    }

    pub fn n_agents(&self) -> usize {
        self.state.n_agents()
    }

    pub fn observe(&self, agent: usize) -> Result<Tensor<f32>, GridError> {
        if agent >= self.n_agents() {
            return Err(GridError::AgentOutOfRange {
                agent,
                n: self.n_agents(),
            });
        }
        Ok(observe(&self.config, &self.state, agent))
    }

    pub fn observations(&self) -> Vec<Tensor<f32>> {
        (0..self.n_agents()).map(|i| observe(&self.config, &self.state, i)).collect()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        comm_graph(&self.state, self.config.comm_range)
    }

    pub fn global_state(&self) -> Tensor<f32> {
        global_state(&self.config, &self.state)
    }

    pub fn step(&mut self, actions: &[Action]) -> Result<StepResult, GridError> {
        let rewards = apply_actions(&self.config, &mut self.state, actions)?;
        for (s, &r) in self.counters.stall.iter_mut().zip(&rewards) {
            if r > 0.0 {
                *s = 0;
            } else {
                *s += 1;
            }
        }
        if self.state.positions.iter().any(|&p| in_right_half(p, self.config.width)) {
            self.counters.reached_right = true;
        }
        let (terminated, truncated) = termination_check(&self.config, self.state.t, &self.counters, self.mode);
        Ok(StepResult {
            rewards,
            terminated,
            truncated,
            observations: self.observations(),
            edges: self.edges(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::config::Layout;
    use super::*;

    fn open_cfg(task: TaskKind, n: usize) -> EnvConfig {
        EnvConfig {
            task,
            width: 6,
            height: 6,
            n_agents: n,
            obstacle_fraction: 0.0,
            fov_w: 5,
            fov_h: 5,
            horizon: 50,
            layout: Layout::Random,
            ..EnvConfig::coverage()
        }
    }

    fn state_with(cfg: &EnvConfig, positions: Vec<Pos>, goals: Vec<Pos>) -> WorldState {
        let coverage = if cfg.task.is_coverage() {
            positions
                .iter()
                .map(|&p| {
                    let mut g = Grid::new(cfg.width, cfg.height);
                    g.set(p, true);
                    g
                })
                .collect()
        } else {
            Vec::new()
        };
        WorldState {
            obstacles: Grid::new(cfg.width, cfg.height),
            positions,
            coverage,
            goals,
            t: 0,
        }
    }

    #[test]
    fn new_cell_rewards_one_wait_zero() {
        let cfg = open_cfg(TaskKind::Coverage, 1);
        let mut s = state_with(&cfg, vec![Pos::new(2, 2)], vec![]);
        let r = apply_actions(&cfg, &mut s, &[Action::Right]).unwrap();
        assert_eq!(r, vec![1.0]);
        assert!(s.coverage[0].get(Pos::new(3, 2)));
        let r = apply_actions(&cfg, &mut s, &[Action::Wait]).unwrap();
        assert_eq!(r, vec![0.0]);
        assert_eq!(s.positions[0], Pos::new(3, 2));
    }

    #[test]
    fn same_new_cell_rewards_once() {
        let cfg = open_cfg(TaskKind::Coverage, 2);
        let mut s = state_with(&cfg, vec![Pos::new(1, 2), Pos::new(3, 2)], vec![]);
        let r = apply_actions(&cfg, &mut s, &[Action::Right, Action::Left]).unwrap();
        assert_eq!(r, vec![1.0, 0.0]);
        assert!(s.coverage[0].get(Pos::new(2, 2)) && s.coverage[1].get(Pos::new(2, 2)));
    }

    #[test]
    fn margin_blocks_moves() {
        let cfg = open_cfg(TaskKind::Coverage, 1);
        let mut s = state_with(&cfg, vec![Pos::new(0, 0)], vec![]);
        apply_actions(&cfg, &mut s, &[Action::Up]).unwrap();
        apply_actions(&cfg, &mut s, &[Action::Left]).unwrap();
        assert_eq!(s.positions[0], Pos::new(0, 0));
    }

    #[test]
    fn path_agent_on_goal_collects_horizon() {
        let cfg = open_cfg(TaskKind::PathPlanning, 1);
        let s = state_with(&cfg, vec![Pos::new(1, 1)], vec![Pos::new(1, 1)]);
        let mut env = Env::from_state(cfg, s, EnvMode::Eval, GenerationReport { retries: 0 });
        let mut total = 0.0;
        loop {
            let r = env.step(&[Action::Wait]).unwrap();
            total += r.rewards[0];
            if r.done() {
                assert!(r.truncated);
                break;
            }
        }
        assert_eq!(total, 50.0);
    }

    #[test]
    fn path_conflict_lower_index_wins() {
        let cfg = open_cfg(TaskKind::PathPlanning, 2);
        let mut s = state_with(&cfg, vec![Pos::new(1, 2), Pos::new(3, 2)], vec![Pos::new(0, 0), Pos::new(5, 5)]);
        apply_actions(&cfg, &mut s, &[Action::Right, Action::Left]).unwrap();
        assert_eq!(s.positions, vec![Pos::new(2, 2), Pos::new(3, 2)]);
    }

    #[test]
    fn stall_terminates_in_training_only() {
        let cfg = open_cfg(TaskKind::Coverage, 2);
        let c = StepCounters {
            stall: vec![3, 10],
            reached_right: false,
        };
        assert_eq!(termination_check(&cfg, 5, &c, EnvMode::Train), (true, false));
        assert_eq!(termination_check(&cfg, 5, &c, EnvMode::Eval), (false, false));
        let calm = StepCounters {
            stall: vec![3, 9],
            reached_right: false,
        };
        assert_eq!(termination_check(&cfg, 5, &calm, EnvMode::Train), (false, false));
    }

    #[test]
    fn split_stall_needs_right_side() {
        let cfg = EnvConfig::split_coverage();
        let c = StepCounters {
            stall: vec![10, 0, 0, 0, 0, 0],
            reached_right: false,
        };
        assert_eq!(termination_check(&cfg, 5, &c, EnvMode::Train), (false, false));
        let c = StepCounters { reached_right: true, ..c };
        assert_eq!(termination_check(&cfg, 5, &c, EnvMode::Train), (true, false));
    }

    #[test]
    fn corner_padding_reads_occupied() {
        let cfg = open_cfg(TaskKind::Coverage, 1);
        let s = state_with(&cfg, vec![Pos::new(0, 0)], vec![]);
        let o = observe(&cfg, &s, 0);
        let d = o.data();
        for r in 0..5 {
            for c in 0..5 {
                let want = if r < 2 || c < 2 { 1.0 } else { 0.0 };
                assert_eq!(d[r * 5 + c], want);
            }
        }
        assert_eq!(d[25 + 2 * 5 + 2], 1.0);
    }

    #[test]
    fn fully_covered_fov_is_ones() {
        let cfg = open_cfg(TaskKind::Coverage, 1);
        let mut s = state_with(&cfg, vec![Pos::new(3, 3)], vec![]);
        for y in 0..6 {
            for x in 0..6 {
                s.coverage[0].set(Pos::new(x, y), true);
            }
        }
        let o = observe(&cfg, &s, 0);
        assert!(o.data()[25..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn far_goal_projected_to_perimeter() {
        assert_eq!(goal_pixel(Pos::new(0, 5), Pos::new(8, 5), 2, 2), (2, 4));
        assert_eq!(goal_pixel(Pos::new(0, 0), Pos::new(6, 6), 2, 2), (4, 4));
        assert_eq!(goal_pixel(Pos::new(5, 5), Pos::new(5, 0), 2, 2), (0, 2));
    }

    #[test]
    fn comm_range_is_strict() {
        let cfg = open_cfg(TaskKind::Coverage, 3);
        let s = state_with(&cfg, vec![Pos::new(0, 0), Pos::new(1, 0), Pos::new(2, 0)], vec![]);
        assert_eq!(comm_graph(&s, 1.5), vec![(0, 1), (1, 2)]);
        assert_eq!(comm_graph(&s, 2.0), vec![(0, 1), (1, 2)]);
        let t = state_with(&cfg, vec![Pos::new(1, 1), Pos::new(1, 1)], vec![]);
        assert_eq!(comm_graph(&t, 0.5), vec![(0, 1)]);
    }

    #[test]
    fn malformed_actions_rejected() {
        let cfg = open_cfg(TaskKind::Coverage, 2);
        let mut s = state_with(&cfg, vec![Pos::new(0, 0), Pos::new(1, 1)], vec![]);
        assert!(apply_actions(&cfg, &mut s, &[Action::Wait]).is_err());
    }
}
