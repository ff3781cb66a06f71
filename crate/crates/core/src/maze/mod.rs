//! Grid-world localization benchmark.
//!
//! Cell `(row i, col j)` covers `x ∈ [j, j+1]`, `y ∈ [i, i+1]`. Maps are
//! mirror-symmetric about the vertical center line, so a single observation
//! rarely pins down the robot's position.

mod bootstrap;
mod dataset;
mod robot;

use std::collections::{BTreeSet, VecDeque};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub use bootstrap::{bootstrap_pf, heading_error, BootstrapConfig, BootstrapFilter, BootstrapRun};
pub use dataset::{
    generate_dataset, input_stats, load_dataset, read_trajectories, simulate_dataset,
    write_trajectories, Dataset, DatasetMeta, DatasetSpec, INPUT_DIM, METADATA_FILE, TARGET_DIM,
};
pub use robot::{
    observe, simulate_trajectory, step_robot, true_ranges, wrap_angle, Action, Pose, Trajectory,
    NUM_RANGES, OBS_NOISE, STEP_JITTER, STEP_LENGTH,
};

const MAX_MAP_TRIES: usize = 100;
const MAP_STREAM: u64 = 0x6d61_7a65;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Free,
    /// Obstacle without landmarks.
    Gray,
    /// Obstacle with a landmark on each corner.
    Black,
}

impl CellKind {
    pub fn is_obstacle(self) -> bool {
        self != CellKind::Free
    }

    fn symbol(self) -> char {
        match self {
            CellKind::Free => '.',
            CellKind::Gray => '+',
            CellKind::Black => '#',
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MazeMap {
    n: usize,
    cells: Vec<CellKind>,
    landmarks: Vec<[f64; 2]>,
}

impl MazeMap {
    /// Build from row strings (`#` black, `+` gray, `.` free); row 0 is `y ∈ [0, 1]`.
    pub fn from_rows<S: AsRef<str>>(rows: &[S]) -> Result<Self> {
        let n = rows.len();
        let mut cells = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.chars().count() != n {
                return Err(Error::Map(format!("row {i} has {} cells, expected {n}", row.chars().count())));
            }
            for c in row.chars() {
                cells.push(match c {
                    '.' => CellKind::Free,
                    '+' => CellKind::Gray,
                    '#' => CellKind::Black,
                    other => return Err(Error::Map(format!("unknown cell symbol {other:?}"))),
                });
            }
        }
        Ok(Self::from_cells(n, cells))
    }

    fn from_cells(n: usize, cells: Vec<CellKind>) -> Self {
        let mut corners = BTreeSet::new();
        for i in 0..n {
            for j in 0..n {
                if cells[i * n + j] == CellKind::Black {
                    for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        corners.insert((j + dx, i + dy));
                    }
                }
            }
        }
        let landmarks = corners.into_iter().map(|(x, y)| [x as f64, y as f64]).collect();
        Self { n, cells, landmarks }
    }

    /// Replace the corner-derived landmarks.
    pub fn with_landmarks(mut self, landmarks: Vec<[f64; 2]>) -> Self {
        self.landmarks = landmarks;
        self
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn cell(&self, row: usize, col: usize) -> CellKind {
        self.cells[row * self.n + col]
    }

    pub fn landmarks(&self) -> &[[f64; 2]] {
        &self.landmarks
    }

    pub fn rows(&self) -> Vec<String> {
        self.cells
            .chunks(self.n)
            .map(|r| r.iter().map(|c| c.symbol()).collect())
            .collect()
    }

    /// `(row, col)` of every free cell in row-major order.
    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        (0..self.n * self.n)
            .filter(|&k| !self.cells[k].is_obstacle())
            .map(|k| (k / self.n, k % self.n))
            .collect()
    }

    /// Whether `(x, y)` lies inside the grid and in a free cell.
    pub fn is_free(&self, x: f64, y: f64) -> bool {
        if !(x >= 0.0 && y >= 0.0 && x < self.n as f64 && y < self.n as f64) {
            return false;
        }
        !self.cell(y as usize, x as usize).is_obstacle()
    }

    /// Whether the segment from `a` to `b` touches any obstacle cell or
    /// leaves the grid.
    pub fn segment_blocked(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        let n = self.n as f64;
        let inside = |p: [f64; 2]| p[0] >= 0.0 && p[1] >= 0.0 && p[0] < n && p[1] < n;
        if !inside(a) || !inside(b) {
            return true;
        }
        let (x0, x1) = (a[0].min(b[0]) as usize, a[0].max(b[0]) as usize);
        let (y0, y1) = (a[1].min(b[1]) as usize, a[1].max(b[1]) as usize);
        for i in y0..=y1 {
            for j in x0..=x1 {
                if self.cell(i, j).is_obstacle()
                    && segment_hits_box(a, b, [j as f64, i as f64], [j as f64 + 1.0, i as f64 + 1.0])
                {
                    return true;
                }
            }
        }
        false
    }

    /// Whether every free cell is reachable from every other (4-connected).
    pub fn is_connected(&self) -> bool {
        let free = self.free_cells();
        let Some(&start) = free.first() else {
            return false;
        };
        let n = self.n;
        let mut seen = vec![false; n * n];
        let mut queue = VecDeque::from([start]);
        seen[start.0 * n + start.1] = true;
        let mut reached = 0;
        while let Some((i, j)) = queue.pop_front() {
            reached += 1;
            let neighbors = [
                (i.wrapping_sub(1), j),
                (i + 1, j),
                (i, j.wrapping_sub(1)),
                (i, j + 1),
            ];
            for (a, b) in neighbors {
                if a < n && b < n && !seen[a * n + b] && !self.cell(a, b).is_obstacle() {
                    seen[a * n + b] = true;
                    queue.push_back((a, b));
                }
            }
        }
        reached == free.len()
    }

    /// The map reflected about the vertical center line.
    pub fn mirrored(&self) -> MazeMap {
        let n = self.n;
        let cells = (0..n * n).map(|k| self.cells[(k / n) * n + (n - 1 - k % n)]).collect();
        Self::from_cells(n, cells)
    }
}

/// Closed segment / axis-aligned box intersection by the slab method.
fn segment_hits_box(a: [f64; 2], b: [f64; 2], lo: [f64; 2], hi: [f64; 2]) -> bool {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for k in 0..2 {
        let d = b[k] - a[k];
        if d == 0.0 {
            if a[k] < lo[k] || a[k] > hi[k] {
                return false;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[k] - a[k]) / d, (hi[k] - a[k]) / d);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return false;
        }
    }
    true
}

/// A mirror-symmetric `n×n` maze with an obstacle border.
///
/// Interior cells in the left half (and the center column when `n` is odd)
/// become obstacles with probability `density`; the right half mirrors them.
/// Interior obstacles alternate black/gray in row-major order over the left
/// half. Maps whose free space is disconnected, covers less than a quarter
/// of the interior, or that have fewer than five landmarks are redrawn.
pub fn generate_maze(n: usize, density: f64, seed: u64) -> Result<MazeMap> {
    if n < 6 {
        return Err(Error::Config(format!("maze size must be at least 6, got {n}")));
    }
    if !(0.0..1.0).contains(&density) {
        return Err(Error::Config(format!("obstacle density must lie in [0, 1), got {density}")));
    }
    let mut rng = RngStream::with_stream(seed, MAP_STREAM);
    for _ in 0..MAX_MAP_TRIES {
        let mut cells = vec![CellKind::Free; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == 0 || j == 0 || i == n - 1 || j == n - 1 {
                    cells[i * n + j] = CellKind::Gray;
                }
            }
        }
        let mut black = true;
        for i in 1..n - 1 {
            for j in 1..=(n - 1) / 2 {
                if rng.uniform() >= density {
                    continue;
                }
                let kind = if black { CellKind::Black } else { CellKind::Gray };
                black = !black;
                cells[i * n + j] = kind;
                cells[i * n + (n - 1 - j)] = kind;
            }
        }
        let map = MazeMap::from_cells(n, cells);
        let roomy = 4 * map.free_cells().len() >= (n - 2) * (n - 2);
        if roomy && map.landmarks.len() >= NUM_RANGES && map.is_connected() {
            return Ok(map);
        }
    }
    Err(Error::Map(format!(
        "no connected {n}x{n} maze with enough landmarks at density {density} after {MAX_MAP_TRIES} tries"
    )))
}
