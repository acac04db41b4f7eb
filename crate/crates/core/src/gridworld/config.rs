use serde::{Deserialize, Serialize};

use super::GridError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Coverage,
    SplitCoverage,
    PathPlanning,
}

impl TaskKind {
    pub fn is_coverage(self) -> bool {
        !matches!(self, TaskKind::PathPlanning)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Coverage => "coverage",
            TaskKind::SplitCoverage => "split_coverage",
            TaskKind::PathPlanning => "path_planning",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coverage" => Ok(TaskKind::Coverage),
            "split_coverage" | "split" => Ok(TaskKind::SplitCoverage),
            "path_planning" | "path" => Ok(TaskKind::PathPlanning),
            _ => Err(GridError::InvalidConfig(format!("unknown task '{}'", s))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Random obstacles at `obstacle_fraction`, free space 4-connected.
    Random,
    /// Wall at column `W/2` with a single opening at row `H/2`.
    Split,
    /// Wall at column `W/2` without opening.
    SplitDisconnected,
    /// Single-cell obstacles at every odd (x, y) intersection away from the border.
    Warehouse,
}

/// Where the self-interested agent starts.
///
/// * split coverage task: everyone starts in the left half regardless;
/// * split layouts otherwise: `Shared` puts everyone in the right half, `Left`
///   puts the self-interested agent alone in the left half;
/// * other layouts: `Shared` places anywhere, `Left` separates the
///   self-interested agent (left) from the team (right).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SiPlacement {
    #[default]
    Shared,
    Left,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub task: TaskKind,
    pub width: usize,
    pub height: usize,
    pub n_agents: usize,
    pub obstacle_fraction: f64,
    /// Euclidean communication range `d`; edges need distance `< d`.
    pub comm_range: f64,
    pub fov_w: usize,
    pub fov_h: usize,
    pub horizon: usize,
    pub stall_limit: usize,
    pub layout: Layout,
    #[serde(default)]
    pub si_agent: Option<usize>,
    #[serde(default)]
    pub si_placement: SiPlacement,
    #[serde(default)]
    pub seed: u64,
}

impl EnvConfig {
    pub fn coverage() -> Self {
        Self {
            task: TaskKind::Coverage,
            width: 24,
            height: 24,
            n_agents: 6,
            obstacle_fraction: 0.4,
            comm_range: 8.0,
            fov_w: 11,
            fov_h: 11,
            horizon: coverage_horizon(24, 24),
            stall_limit: 10,
            layout: Layout::Random,
            si_agent: None,
            si_placement: SiPlacement::Shared,
            seed: 0,
        }
    }

    pub fn split_coverage() -> Self {
        Self {
            task: TaskKind::SplitCoverage,
            obstacle_fraction: 0.0,
            horizon: split_horizon(24, 24),
            layout: Layout::Split,
            ..Self::coverage()
        }
    }

    pub fn path_planning() -> Self {
        Self {
            task: TaskKind::PathPlanning,
            width: 12,
            height: 12,
            n_agents: 6,
            obstacle_fraction: 0.0,
            comm_range: 5.0,
            horizon: 50,
            layout: Layout::Warehouse,
            ..Self::coverage()
        }
    }

    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Coverage => Self::coverage(),
            TaskKind::SplitCoverage => Self::split_coverage(),
            TaskKind::PathPlanning => Self::path_planning(),
        }
    }

    /// Fixed evaluation horizon for the task at this world size.
    pub fn eval_horizon(&self) -> usize {
        match self.task {
            TaskKind::Coverage => coverage_horizon(self.width, self.height),
            TaskKind::SplitCoverage => split_horizon(self.width, self.height),
            TaskKind::PathPlanning => self.horizon,
        }
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let bad = |m: String| Err(GridError::InvalidConfig(m));
        if self.width == 0 || self.height == 0 || self.n_agents == 0 {
            return bad(format!("W={}, H={}, N={} must be >= 1", self.width, self.height, self.n_agents));
        }
        if self.fov_w % 2 == 0 || self.fov_h % 2 == 0 {
            return bad(format!("FOV {}x{} must be odd", self.fov_w, self.fov_h));
        }
        if !(0.0..1.0).contains(&self.obstacle_fraction) {
            return bad(format!("obstacle_fraction {} outside [0, 1)", self.obstacle_fraction));
        }
        if !(self.comm_range > 0.0) {
            return bad(format!("comm_range {} must be positive", self.comm_range));
        }
        if self.horizon == 0 {
            return bad("horizon must be >= 1".into());
        }
        if let Some(n) = self.si_agent {
            if n >= self.n_agents {
                return bad(format!("si_agent {} >= N = {}", n, self.n_agents));
            }
        }
        let split = matches!(self.layout, Layout::Split | Layout::SplitDisconnected);
        if (split || self.task == TaskKind::SplitCoverage || self.si_placement == SiPlacement::Left) && self.width < 3 {
            return bad("split placement needs W >= 3".into());
        }
        if self.task == TaskKind::SplitCoverage && !split {
            return bad("split_coverage needs a split layout".into());
        }
        Ok(())
    }
}

/// `⌈W·H·0.6⌉`.
pub fn coverage_horizon(w: usize, h: usize) -> usize {
    (w * h * 6).div_ceil(10)
}

/// `⌈W·H/2⌉`.
pub fn split_horizon(w: usize, h: usize) -> usize {
    (w * h).div_ceil(2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Wait,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Wait];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    /// `(dx, dy)` with `y` growing downwards.
    pub fn delta(self) -> (i64, i64) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Wait => (0, 0),
        }
    }
}
