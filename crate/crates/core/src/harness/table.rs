use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::gridworld::TaskKind;
use crate::policy::{CommMode, Group};

use super::eval::{mean_std, EvalStats};
use super::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    CoopComms,
    CoopNoComms,
    SiAdvComms,
    SiNoAdvComms,
    ReadaptAdvComms,
}

impl Column {
    pub const ALL: [Column; 5] = [
        Column::CoopComms,
        Column::CoopNoComms,
        Column::SiAdvComms,
        Column::SiNoAdvComms,
        Column::ReadaptAdvComms,
    ];

    pub fn title(self) -> &'static str {
        match self {
            Column::CoopComms => "coop w/ comms",
            Column::CoopNoComms => "coop w/o comms",
            Column::SiAdvComms => "SI w/ adv comms",
            Column::SiNoAdvComms => "SI w/o adv comms",
            Column::ReadaptAdvComms => "readapt w/ adv comms",
        }
    }

    pub fn has_si(self) -> bool {
        !matches!(self, Column::CoopComms | Column::CoopNoComms)
    }

    /// Communication mode used both to train and to evaluate the column.
    pub fn mode(self) -> CommMode {
        match self {
            Column::CoopNoComms => CommMode::NoComms,
            Column::SiNoAdvComms => CommMode::MaskSiOutgoing,
            _ => CommMode::Full,
        }
    }
}

/// One evaluation of one checkpoint, as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task: TaskKind,
    pub column: Column,
    pub seed: u64,
    pub manifest: String,
    pub stats: EvalStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Cell {
    Value { mean: f64, std: f64, episodes: usize },
    NotApplicable,
    Missing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub task: TaskKind,
    pub group: Group,
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub manifests: Vec<String>,
    pub rows: Vec<TableRow>,
}

pub const TASKS: [TaskKind; 3] = [TaskKind::Coverage, TaskKind::SplitCoverage, TaskKind::PathPlanning];

/// Pools per-episode per-agent returns over every seed of a (task, column).
pub fn render_results_table(records: &[EvalRecord]) -> ResultsTable {
    let mut rows = Vec::new();
    for task in TASKS {
        for group in [Group::Cooperative, Group::SelfInterested] {
            let cells = Column::ALL
                .iter()
                .map(|&col| {
                    if group == Group::SelfInterested && !col.has_si() {
                        return Cell::NotApplicable;
                    }
                    let eps: Vec<f64> = records
                        .iter()
                        .filter(|r| r.task == task && r.column == col)
                        .filter_map(|r| match group {
                            Group::Cooperative => Some(&r.stats.cooperative),
                            Group::SelfInterested => r.stats.self_interested.as_ref(),
                        })
                        .flat_map(|s| s.episodes.iter().copied())
                        .collect();
                    if eps.is_empty() {
                        Cell::Missing
                    } else {
                        let (mean, std) = mean_std(&eps);
                        Cell::Value {
                            mean,
                            std,
                            episodes: eps.len(),
                        }
                    }
                })
                .collect();
            rows.push(TableRow { task, group, cells });
        }
    }
    let mut manifests: Vec<String> = records.iter().map(|r| r.manifest.clone()).collect();
    manifests.sort();
    manifests.dedup();
    ResultsTable { manifests, rows }
}

impl ResultsTable {
    pub fn missing(&self) -> usize {
        self.rows
            .iter()
            .flat_map(|r| &r.cells)
            .filter(|c| matches!(c, Cell::Missing))
            .count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<16}{:<4}", "task", "grp");
        for c in Column::ALL {
            let _ = write!(s, "{:>22}", c.title());
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<16}{:<4}", r.task.name(), r.group.short());
            for c in &r.cells {
                let txt = match c {
                    Cell::Value { mean, std, .. } => format!("{:.2} ± {:.2}", mean, std),
                    Cell::NotApplicable => "N/A".into(),
                    Cell::Missing => "MISSING".into(),
                };
                let _ = write!(s, "{:>22}", txt);
            }
            s.push('\n');
        }
        for m in &self.manifests {
            let _ = writeln!(s, "manifest {}", m);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(s).map_err(|e| HarnessError::Format(e.to_string()))
    }
}
