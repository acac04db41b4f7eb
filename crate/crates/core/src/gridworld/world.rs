use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{EnvConfig, Layout, SiPlacement, TaskKind};
use super::GridError;

/// Cell coordinates; `x` is the column, `y` the row (growing downwards).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub x: usize,
    pub y: usize,
}

impl Pos {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn dist2(self, o: Pos) -> f64 {
        let dx = self.x as f64 - o.x as f64;
        let dy = self.y as f64 - o.y as f64;
        dx * dx + dy * dy
    }
}

/// Row-major boolean `W×H` map.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Grid {
    width: usize,
    height: usize,
    cells: Vec<bool>,
}

impl Grid {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            cells: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, p: Pos) -> bool {
        self.cells[p.y * self.width + p.x]
    }

    pub fn set(&mut self, p: Pos, v: bool) {
        self.cells[p.y * self.width + p.x] = v;
    }

    /// Out-of-bounds reads return `outside`.
    pub fn get_signed(&self, x: i64, y: i64, outside: bool) -> bool {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            outside
        } else {
            self.cells[y as usize * self.width + x as usize]
        }
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn or_assign(&mut self, o: &Grid) {
        for (a, &b) in self.cells.iter_mut().zip(&o.cells) {
            *a |= b;
        }
    }

    /// `true` where `self` is set, `other` must be too.
    pub fn is_subset_of(&self, other: &Grid) -> bool {
        self.cells.iter().zip(&other.cells).all(|(&a, &b)| !a || b)
    }

    pub fn positions(&self) -> impl Iterator<Item = Pos> + '_ {
        let w = self.width;
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(move |(i, _)| Pos::new(i % w, i / w))
    }

    /// Rows as strings of `on`/`off` characters.
    pub fn to_rows(&self, on: char, off: char) -> Vec<String> {
        self.cells
            .chunks(self.width)
            .map(|r| r.iter().map(|&c| if c { on } else { off }).collect())
            .collect()
    }

    pub fn from_rows(rows: &[String], on: char) -> Result<Self, GridError> {
        let height = rows.len();
        let width = rows.first().map(|r| r.chars().count()).unwrap_or(0);
        if height == 0 || width == 0 || rows.iter().any(|r| r.chars().count() != width) {
            return Err(GridError::Snapshot("ragged or empty grid rows".into()));
        }
        let cells = rows.iter().flat_map(|r| r.chars().map(move |c| c == on)).collect();
        Ok(Self { width, height, cells })
    }
}

/// Number of 4-connected components of the cells where `grid` is `false`.
pub fn free_components(grid: &Grid) -> usize {
    let (w, h) = (grid.width, grid.height);
    let mut seen = vec![false; w * h];
    let mut stack = Vec::new();
    let mut count = 0;
    for start in 0..w * h {
        if grid.cells[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(c) = stack.pop() {
            let (x, y) = (c % w, c / w);
            let mut visit = |n: usize| {
                if !grid.cells[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            };
            if x > 0 {
                visit(c - 1);
            }
            if x + 1 < w {
                visit(c + 1);
            }
            if y > 0 {
                visit(c - w);
            }
            if y + 1 < h {
                visit(c + w);
            }
        }
    }
    count
}

/// Free cells reachable from `from` (4-connectivity).
pub fn flood_fill(grid: &Grid, from: Pos) -> Grid {
    let (w, h) = (grid.width, grid.height);
    let mut seen = Grid::new(w, h);
    if grid.get(from) {
        return seen;
    }
    let mut stack = vec![from];
    seen.set(from, true);
    while let Some(p) = stack.pop() {
        let mut nbrs = Vec::with_capacity(4);
        if p.x > 0 {
            nbrs.push(Pos::new(p.x - 1, p.y));
        }
        if p.x + 1 < w {
            nbrs.push(Pos::new(p.x + 1, p.y));
        }
        if p.y > 0 {
            nbrs.push(Pos::new(p.x, p.y - 1));
        }
        if p.y + 1 < h {
            nbrs.push(Pos::new(p.x, p.y + 1));
        }
        for n in nbrs {
            if !grid.get(n) && !seen.get(n) {
                seen.set(n, true);
                stack.push(n);
            }
        }
    }
    seen
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub obstacles: Grid,
    pub positions: Vec<Pos>,
    /// Per-agent coverage `Cᵢ`; empty for the path task.
    pub coverage: Vec<Grid>,
    /// Per-agent goals; empty for coverage tasks.
    pub goals: Vec<Pos>,
    pub t: usize,
}

impl WorldState {
    pub fn width(&self) -> usize {
        self.obstacles.width()
    }

    pub fn height(&self) -> usize {
        self.obstacles.height()
    }

    pub fn n_agents(&self) -> usize {
        self.positions.len()
    }

    /// `C = ∨ᵢ Cᵢ`.
    pub fn global_coverage(&self) -> Grid {
        let mut g = Grid::new(self.width(), self.height());
        for c in &self.coverage {
            g.or_assign(c);
        }
        g
    }
}

/// Column where split layouts put their wall.
pub fn wall_column(width: usize) -> usize {
    width / 2
}

/// Whether `p` lies in the right half (`x ≥ W/2`).
pub fn in_right_half(p: Pos, width: usize) -> bool {
    p.x >= wall_column(width)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenerationReport {
    /// Layouts discarded before the returned one.
    pub retries: usize,
}

pub const MAX_GENERATION_RETRIES: usize = 100;

fn fixed_obstacles(cfg: &EnvConfig) -> Grid {
    let (w, h) = (cfg.width, cfg.height);
    let mut g = Grid::new(w, h);
    match cfg.layout {
        Layout::Random => {}
        Layout::Split | Layout::SplitDisconnected => {
            let wc = wall_column(w);
            for y in 0..h {
                g.set(Pos::new(wc, y), true);
            }
            if cfg.layout == Layout::Split {
                g.set(Pos::new(wc, h / 2), false);
            }
        }
        Layout::Warehouse => {
            for y in (1..h.saturating_sub(1)).step_by(2) {
                for x in (1..w.saturating_sub(1)).step_by(2) {
                    g.set(Pos::new(x, y), true);
                }
            }
        }
    }
    g
}

/// Adds random obstacles one at a time, keeping each only if the number of free
/// components does not grow, until `target` obstacles exist.
fn add_random_obstacles<R: Rng>(base: &Grid, target: usize, rng: &mut R) -> Option<Grid> {
    let mut g = base.clone();
    let baseline = free_components(&g);
    let mut candidates: Vec<Pos> = (0..g.height)
        .flat_map(|y| (0..g.width).map(move |x| Pos::new(x, y)))
        .filter(|&p| !g.get(p))
        .collect();
    candidates.shuffle(rng);
    let mut placed = g.count();
    for p in candidates {
        if placed >= target {
            break;
        }
        g.set(p, true);
        if free_components(&g) == baseline && g.count() < g.cells.len() {
            placed += 1;
        } else {
            g.set(p, false);
        }
    }
    (placed >= target).then_some(g)
}

fn free_cells_where(g: &Grid, pred: impl Fn(Pos) -> bool) -> Vec<Pos> {
    (0..g.height)
        .flat_map(|y| (0..g.width).map(move |x| Pos::new(x, y)))
        .filter(|&p| !g.get(p) && pred(p))
        .collect()
}

fn pick_distinct<R: Rng>(pool: &[Pos], k: usize, taken: &[Pos], rng: &mut R) -> Option<Vec<Pos>> {
    let avail: Vec<Pos> = pool.iter().copied().filter(|p| !taken.contains(p)).collect();
    if avail.len() < k {
        return None;
    }
    Some(avail.choose_multiple(rng, k).copied().collect())
}

fn place_agents<R: Rng>(cfg: &EnvConfig, obstacles: &Grid, rng: &mut R) -> Option<Vec<Pos>> {
    let w = cfg.width;
    let left = free_cells_where(obstacles, |p| !in_right_half(p, w));
    let right = free_cells_where(obstacles, |p| in_right_half(p, w));
    let all = free_cells_where(obstacles, |_| true);
    let split_layout = matches!(cfg.layout, Layout::Split | Layout::SplitDisconnected);
    let n = cfg.n_agents;
    if cfg.task == TaskKind::SplitCoverage {
        return pick_distinct(&left, n, &[], rng);
    }
    match (cfg.si_placement, cfg.si_agent) {
        (SiPlacement::Left, Some(si)) => {
            let si_pos = pick_distinct(&left, 1, &[], rng)?[0];
            let team = pick_distinct(&right, n - 1, &[si_pos], rng)?;
            let mut out = team;
            out.insert(si, si_pos);
            Some(out)
        }
        _ if split_layout => pick_distinct(&right, n, &[], rng),
        _ => pick_distinct(&all, n, &[], rng),
    }
}

/// Builds a fresh world for `cfg`. Obstacle layouts (random layout) are built
/// incrementally so that free space keeps its component count; whole layouts
/// are redrawn when agent placement fails, up to [`MAX_GENERATION_RETRIES`].
pub fn generate_world(cfg: &EnvConfig, seed: u64) -> Result<(WorldState, GenerationReport), GridError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = fixed_obstacles(cfg);
    let total = cfg.width * cfg.height;
    let target = if cfg.layout == Layout::Warehouse {
        base.count()
    } else {
        base.count().max((cfg.obstacle_fraction * total as f64).round() as usize)
    };
    for retries in 0..=MAX_GENERATION_RETRIES {
        let Some(obstacles) = add_random_obstacles(&base, target, &mut rng) else {
            continue;
        };
        let Some(positions) = place_agents(cfg, &obstacles, &mut rng) else {
            continue;
        };
        let (coverage, goals) = if cfg.task.is_coverage() {
            let cov = positions
                .iter()
                .map(|&p| {
                    let mut g = Grid::new(cfg.width, cfg.height);
                    g.set(p, true);
                    g
                })
                .collect();
            (cov, Vec::new())
        } else {
            let free = free_cells_where(&obstacles, |_| true);
            let Some(goals) = pick_distinct(&free, cfg.n_agents, &[], &mut rng) else {
                continue;
            };
            (Vec::new(), goals)
        };
        let state = WorldState {
            obstacles,
            positions,
            coverage,
            goals,
            t: 0,
        };
        return Ok((state, GenerationReport { retries }));
    }
    Err(GridError::Generation {
        retries: MAX_GENERATION_RETRIES,
    })
}
