//! A* search on occupancy grids and demonstration post-processing.
//!
//! Path costs are kept exactly as `straight + diagonal·√2` with integer move
//! counts, so optimality comparisons never depend on floating-point
//! summation order.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::floorgrid::{GridError, GridMap};
use crate::geometry::{wrap_angle, Action, PixelCoord, Pose, WorldPoint};

/// Orientation at step `i` looks at the point this many steps ahead.
pub const ORIENTATION_LOOKAHEAD: usize = 6;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("{which} cell ({col}, {row}) is not free on the planning grid")]
    Blocked {
        which: &'static str,
        col: usize,
        row: usize,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Exact path cost `straight + diagonal·√2`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cost {
    pub straight: u32,
    pub diagonal: u32,
}

impl Cost {
    pub const ZERO: Cost = Cost {
        straight: 0,
        diagonal: 0,
    };

    pub fn value(self) -> f64 {
        self.straight as f64 + self.diagonal as f64 * std::f64::consts::SQRT_2
    }

    fn add(self, o: Cost) -> Cost {
        Cost {
            straight: self.straight + o.straight,
            diagonal: self.diagonal + o.diagonal,
        }
    }

    /// Octile distance between two cells.
    pub fn octile(a: PixelCoord, b: PixelCoord) -> Cost {
        let dx = a.col.abs_diff(b.col) as u32;
        let dy = a.row.abs_diff(b.row) as u32;
        Cost {
            straight: dx.max(dy) - dx.min(dy),
            diagonal: dx.min(dy),
        }
    }
}

impl Ord for Cost {
    fn cmp(&self, o: &Self) -> Ordering {
        // sign of da + db·√2, decided with integer arithmetic
        let da = self.straight as i64 - o.straight as i64;
        let db = self.diagonal as i64 - o.diagonal as i64;
        match (da.signum(), db.signum()) {
            (0, 0) => Ordering::Equal,
            (a, b) if a >= 0 && b >= 0 => Ordering::Greater,
            (a, b) if a <= 0 && b <= 0 => Ordering::Less,
            (1, _) => (da * da).cmp(&(2 * db * db)),
            _ => (2 * db * db).cmp(&(da * da)),
        }
    }
}

impl PartialOrd for Cost {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelPath {
    pub cells: Vec<PixelCoord>,
    pub cost: Cost,
}

impl PixelPath {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn to_world(&self, grid: &GridMap) -> Result<Vec<WorldPoint>, GridError> {
        self.cells.iter().map(|&u| grid.pixel_to_world(u)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
}

impl Trajectory {
    pub fn positions(&self) -> impl Iterator<Item = WorldPoint> + '_ {
        self.poses.iter().map(|p| p.position)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

#[derive(PartialEq, Eq)]
struct Open {
    f: Cost,
    h: Cost,
    index: usize,
}

impl Ord for Open {
    // min-heap on (f, h, row-major index)
    fn cmp(&self, o: &Self) -> Ordering {
        o.f.cmp(&self.f)
            .then_with(|| o.h.cmp(&self.h))
            .then_with(|| o.index.cmp(&self.index))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

const MOVES: [(i64, i64); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];

/// 8-connected A* on the free cells of `grid` with octile heuristic.
///
/// Diagonal moves require both orthogonally adjacent cells to be free.
/// Returns `Ok(None)` when the goal is unreachable.
pub fn astar(grid: &GridMap, start: PixelCoord, goal: PixelCoord) -> Result<Option<PixelPath>, PlanError> {
    search(grid, start, goal, true)
}

/// Same search with a zero heuristic, i.e. Dijkstra.
pub fn dijkstra(grid: &GridMap, start: PixelCoord, goal: PixelCoord) -> Result<Option<PixelPath>, PlanError> {
    search(grid, start, goal, false)
}

fn search(
    grid: &GridMap,
    start: PixelCoord,
    goal: PixelCoord,
    heuristic: bool,
) -> Result<Option<PixelPath>, PlanError> {
    for (which, u) in [("start", start), ("goal", goal)] {
        if !grid.is_free(u) {
            return Err(PlanError::Blocked {
                which,
                col: u.col,
                row: u.row,
            });
        }
    }
    let h = |u: PixelCoord| if heuristic { Cost::octile(u, goal) } else { Cost::ZERO };
    let n = grid.width() * grid.height();
    let mut g = vec![None::<Cost>; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    let si = grid.index(start);
    let gi = grid.index(goal);
    g[si] = Some(Cost::ZERO);
    open.push(Open {
        f: h(start),
        h: h(start),
        index: si,
    });
    while let Some(Open { index, .. }) = open.pop() {
        if closed[index] {
            continue;
        }
        closed[index] = true;
        if index == gi {
            break;
        }
        let u = grid.coord(index);
        let gu = g[index].expect("open node has a cost");
        for (dc, dr) in MOVES {
            let (nc, nr) = (u.col as i64 + dc, u.row as i64 + dr);
            if grid.get_signed(nc, nr).blocks() {
                continue;
            }
            let diagonal = dc != 0 && dr != 0;
            if diagonal
                && (grid.get_signed(u.col as i64 + dc, u.row as i64).blocks()
                    || grid.get_signed(u.col as i64, u.row as i64 + dr).blocks())
            {
                continue;
            }
            let v = PixelCoord::new(nc as usize, nr as usize);
            let vi = grid.index(v);
            if closed[vi] {
                continue;
            }
            let step = if diagonal {
                Cost {
                    straight: 0,
                    diagonal: 1,
                }
            } else {
                Cost {
                    straight: 1,
                    diagonal: 0,
                }
            };
            let cand = gu.add(step);
            if g[vi].is_none_or(|old| cand < old) {
                g[vi] = Some(cand);
                parent[vi] = index;
                let hv = h(v);
                open.push(Open {
                    f: cand.add(hv),
                    h: hv,
                    index: vi,
                });
            }
        }
    }
    if !closed[gi] {
        return Ok(None);
    }
    let mut cells = vec![goal];
    let mut at = gi;
    while at != si {
        at = parent[at];
        cells.push(grid.coord(at));
    }
    cells.reverse();
    Ok(Some(PixelPath {
        cells,
        cost: g[gi].expect("goal reached"),
    }))
}

/// Sum of Euclidean segment lengths, meters.
pub fn path_length(points: &[WorldPoint]) -> f64 {
    points.windows(2).map(|w| w[0].distance(w[1])).sum()
}

pub fn pixel_path_length(path: &PixelPath, grid: &GridMap) -> Result<f64, GridError> {
    Ok(path_length(&path.to_world(grid)?))
}

pub fn trajectory_length(t: &Trajectory) -> f64 {
    t.poses.windows(2).map(|w| w[0].position.distance(w[1].position)).sum()
}

/// Heading at each point toward the point [`ORIENTATION_LOOKAHEAD`] steps
/// ahead, clamped to the final point. A zero look-ahead vector reuses the
/// previous heading (0 at the first point).
pub fn assign_orientations(points: &[WorldPoint]) -> Trajectory {
    let last = points.len().saturating_sub(1);
    let mut prev = 0.0;
    let poses = points
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let ahead = points[(i + ORIENTATION_LOOKAHEAD).min(last)];
            let (dx, dy) = (ahead.x - p.x, ahead.y - p.y);
            if dx != 0.0 || dy != 0.0 {
                prev = dy.atan2(dx);
            }
            Pose {
                position: p,
                theta: wrap_angle(prev),
            }
        })
        .collect();
    Trajectory { poses }
}

/// Actions `a_t = p_t − p_{t−1}`; one fewer than the number of poses.
pub fn path_to_actions(traj: &Trajectory) -> Vec<Action> {
    traj.poses.windows(2).map(|w| w[1].position - w[0].position).collect()
}
