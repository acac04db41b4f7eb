use serde::{Deserialize, Serialize};

use super::config::TaskKind;
use super::world::{Grid, Pos, WorldState};
use super::GridError;

/// Portable JSON form of a [`WorldState`]. Grids are rows of `#`/`.`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub task: TaskKind,
    pub width: usize,
    pub height: usize,
    pub t: usize,
    pub obstacles: Vec<String>,
    pub positions: Vec<Pos>,
    #[serde(default)]
    pub coverage: Vec<Vec<String>>,
    #[serde(default)]
    pub goals: Vec<Pos>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
}

impl Snapshot {
    pub fn capture(task: TaskKind, state: &WorldState) -> Self {
        Self {
            task,
            width: state.width(),
            height: state.height(),
            t: state.t,
            obstacles: state.obstacles.to_rows('#', '.'),
            positions: state.positions.clone(),
            coverage: state.coverage.iter().map(|c| c.to_rows('#', '.')).collect(),
            goals: state.goals.clone(),
            seed: None,
            manifest: None,
        }
    }

    pub fn restore(&self) -> Result<WorldState, GridError> {
        let obstacles = Grid::from_rows(&self.obstacles, '#')?;
        if obstacles.width() != self.width || obstacles.height() != self.height {
            return Err(GridError::Snapshot("grid size disagrees with header".into()));
        }
        let coverage = self
            .coverage
            .iter()
            .map(|rows| Grid::from_rows(rows, '#'))
            .collect::<Result<Vec<_>, _>>()?;
        let n = self.positions.len();
        let ok = if self.task.is_coverage() {
            coverage.len() == n && self.goals.is_empty()
        } else {
            self.goals.len() == n && coverage.is_empty()
        };
        if !ok {
            return Err(GridError::Snapshot("coverage/goal count does not match agents".into()));
        }
        for p in self.positions.iter().chain(&self.goals) {
            if p.x >= self.width || p.y >= self.height {
                return Err(GridError::Snapshot(format!("cell {:?} out of bounds", p)));
            }
        }
        Ok(WorldState {
            obstacles,
            positions: self.positions.clone(),
            coverage,
            goals: self.goals.clone(),
            t: self.t,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("snapshot serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, GridError> {
        serde_json::from_str(s).map_err(|e| GridError::Snapshot(e.to_string()))
    }
}
