//! Occupancy grids: the floor plan and the furnished truth map.
//!
//! Cells are stored row-major; row `r` spans world `y ∈ [r·μ + δy, (r+1)·μ + δy]`
//! and column `c` spans `x ∈ [c·μ + δx, (c+1)·μ + δx]`, where `μ` is the
//! resolution in meters per cell and `δ` the world offset of the grid corner.

mod io;
mod scene;

pub(crate) use io::write_rgb_png;
pub use io::{load_map, save_map, MapMeta};
pub use scene::{load_scene, save_scene, synth_scene, Scene, SceneParams, SizeClass};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{PixelCoord, Pose, WorldPoint};

/// Default grid resolution, meters per cell.
pub const DEFAULT_RESOLUTION: f64 = 0.1;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("pixel ({col}, {row}) outside {width}x{height} grid")]
    PixelOutOfBounds {
        col: usize,
        row: usize,
        width: usize,
        height: usize,
    },
    #[error("world point ({x:.4}, {y:.4}) outside grid")]
    WorldOutOfBounds { x: f64, y: f64 },
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("map file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cell {
    Free,
    Occupied,
    Unknown,
}

impl Cell {
    /// Occupied and unknown cells both block motion and sight.
    #[inline]
    pub fn blocks(self) -> bool {
        !matches!(self, Cell::Free)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridMap {
    width: usize,
    height: usize,
    resolution: f64,
    offset: WorldPoint,
    cells: Vec<Cell>,
}

impl GridMap {
    pub fn new(
        width: usize,
        height: usize,
        resolution: f64,
        offset: WorldPoint,
        fill: Cell,
    ) -> Result<Self, GridError> {
        Self::from_cells(width, height, resolution, offset, vec![fill; width * height])
    }

    pub fn from_cells(
        width: usize,
        height: usize,
        resolution: f64,
        offset: WorldPoint,
        cells: Vec<Cell>,
    ) -> Result<Self, GridError> {
        if width == 0 || height == 0 {
            return Err(GridError::Invalid("width and height must be at least 1".into()));
        }
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(GridError::Invalid(format!(
                "resolution must be positive, got {resolution}"
            )));
        }
        if !(offset.x.is_finite() && offset.y.is_finite()) {
            return Err(GridError::Invalid("offset must be finite".into()));
        }
        if cells.len() != width * height {
            return Err(GridError::Invalid(format!(
                "{} cells for a {width}x{height} grid",
                cells.len()
            )));
        }
        Ok(Self {
            width,
            height,
            resolution,
            offset,
            cells,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn offset(&self) -> WorldPoint {
        self.offset
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    /// Same dimensions, resolution and offset.
    pub fn same_frame(&self, other: &GridMap) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.resolution == other.resolution
            && self.offset == other.offset
    }

    #[inline]
    pub fn index(&self, u: PixelCoord) -> usize {
        u.row * self.width + u.col
    }

    #[inline]
    pub fn coord(&self, index: usize) -> PixelCoord {
        PixelCoord::new(index % self.width, index / self.width)
    }

    #[inline]
    pub fn in_bounds(&self, col: i64, row: i64) -> bool {
        col >= 0 && row >= 0 && (col as usize) < self.width && (row as usize) < self.height
    }

    pub fn get(&self, u: PixelCoord) -> Option<Cell> {
        (u.col < self.width && u.row < self.height).then(|| self.cells[self.index(u)])
    }

    /// Cell state, with everything outside the grid reported as `Unknown`.
    #[inline]
    pub fn get_signed(&self, col: i64, row: i64) -> Cell {
        if self.in_bounds(col, row) {
            self.cells[row as usize * self.width + col as usize]
        } else {
            Cell::Unknown
        }
    }

    pub fn set(&mut self, u: PixelCoord, c: Cell) {
        let i = self.index(u);
        self.cells[i] = c;
    }

    pub fn is_free(&self, u: PixelCoord) -> bool {
        self.get(u) == Some(Cell::Free)
    }

    pub fn count(&self, c: Cell) -> usize {
        self.cells.iter().filter(|&&x| x == c).count()
    }

    /// Coordinates of every free cell in row-major order.
    pub fn free_cells(&self) -> Vec<PixelCoord> {
        (0..self.cells.len())
            .filter(|&i| self.cells[i] == Cell::Free)
            .map(|i| self.coord(i))
            .collect()
    }

    /// World coordinates of the center of cell `u`.
    pub fn pixel_to_world(&self, u: PixelCoord) -> Result<WorldPoint, GridError> {
        if u.col >= self.width || u.row >= self.height {
            return Err(GridError::PixelOutOfBounds {
                col: u.col,
                row: u.row,
                width: self.width,
                height: self.height,
            });
        }
        Ok(WorldPoint::new(
            (u.col as f64 + 0.5) * self.resolution + self.offset.x,
            (u.row as f64 + 0.5) * self.resolution + self.offset.y,
        ))
    }

    /// Cell containing `p`. A point exactly on a shared cell edge belongs to
    /// the lower-index cell; the grid's outer boundary is inclusive.
    pub fn world_to_pixel(&self, p: WorldPoint) -> Result<PixelCoord, GridError> {
        let oob = || GridError::WorldOutOfBounds { x: p.x, y: p.y };
        let col = axis_index((p.x - self.offset.x) / self.resolution, self.width).ok_or_else(oob)?;
        let row = axis_index((p.y - self.offset.y) / self.resolution, self.height).ok_or_else(oob)?;
        Ok(PixelCoord::new(col, row))
    }

    /// Signed cell index of a world point, without bounds checks.
    #[inline]
    pub fn world_to_signed(&self, p: WorldPoint) -> (i64, i64) {
        (
            ((p.x - self.offset.x) / self.resolution).floor() as i64,
            ((p.y - self.offset.y) / self.resolution).floor() as i64,
        )
    }

    /// World-space extent `(min, max)` of the grid.
    pub fn bounds(&self) -> (WorldPoint, WorldPoint) {
        (
            self.offset,
            WorldPoint::new(
                self.offset.x + self.width as f64 * self.resolution,
                self.offset.y + self.height as f64 * self.resolution,
            ),
        )
    }

    /// Dilates every blocking cell by `radius` meters.
    ///
    /// An output cell is `Occupied` iff some `Occupied`/`Unknown` input cell
    /// center lies within `radius + resolution/2` of its center; all other
    /// cells become `Free`.
    pub fn inflate(&self, radius: f64) -> GridMap {
        assert!(radius >= 0.0, "inflation radius must be non-negative");
        let reach = radius / self.resolution + 0.5;
        let reach_sq = reach * reach + 1e-9;
        let span = reach.floor() as i64;
        let mut disk = Vec::new();
        for dr in -span..=span {
            for dc in -span..=span {
                if ((dr * dr + dc * dc) as f64) <= reach_sq {
                    disk.push((dc, dr));
                }
            }
        }
        let mut out = vec![Cell::Free; self.cells.len()];
        for (i, &c) in self.cells.iter().enumerate() {
            if !c.blocks() {
                continue;
            }
            let (col, row) = ((i % self.width) as i64, (i / self.width) as i64);
            for &(dc, dr) in &disk {
                let (nc, nr) = (col + dc, row + dr);
                if self.in_bounds(nc, nr) {
                    out[nr as usize * self.width + nc as usize] = Cell::Occupied;
                }
            }
        }
        GridMap {
            cells: out,
            ..self.clone()
        }
    }

    /// Number of 4-connected components of free cells.
    pub fn free_components(&self) -> usize {
        let mut label = vec![usize::MAX; self.cells.len()];
        let mut n = 0;
        let mut stack = Vec::new();
        for start in 0..self.cells.len() {
            if self.cells[start] != Cell::Free || label[start] != usize::MAX {
                continue;
            }
            label[start] = n;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (c, r) = ((i % self.width) as i64, (i / self.width) as i64);
                for (dc, dr) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                    let (nc, nr) = (c + dc, r + dr);
                    if !self.in_bounds(nc, nr) {
                        continue;
                    }
                    let j = nr as usize * self.width + nc as usize;
                    if self.cells[j] == Cell::Free && label[j] == usize::MAX {
                        label[j] = n;
                        stack.push(j);
                    }
                }
            }
            n += 1;
        }
        n
    }

    /// Area-averaged occupancy downsampled to `side × side`, row-major.
    pub fn occupancy_patch(&self, side: usize) -> Vec<f64> {
        let mut sum = vec![0.0; side * side];
        let mut cnt = vec![0.0; side * side];
        for r in 0..self.height {
            let tr = r * side / self.height;
            for c in 0..self.width {
                let tc = c * side / self.width;
                let k = tr * side + tc;
                cnt[k] += 1.0;
                if self.cells[r * self.width + c].blocks() {
                    sum[k] += 1.0;
                }
            }
        }
        sum.iter()
            .zip(&cnt)
            .map(|(s, n)| if *n > 0.0 { s / n } else { 1.0 })
            .collect()
    }

    /// Occupancy of a `side × side` square of width `extent` meters centered
    /// on `pose` and aligned with its heading. Row `i` runs along the heading
    /// (forward), column `j` to the left. Each output cell averages a
    /// `SUB × SUB` lattice of point samples; out-of-grid samples count as
    /// blocked.
    pub fn body_patch(&self, pose: &Pose, side: usize, extent: f64) -> Vec<f64> {
        const SUB: usize = 4;
        let (sin, cos) = pose.theta.sin_cos();
        let step = extent / (side * SUB) as f64;
        let half = extent / 2.0;
        let mut out = vec![0.0; side * side];
        for i in 0..side {
            for j in 0..side {
                let mut hits = 0;
                for a in 0..SUB {
                    let fx = (i * SUB + a) as f64 * step + step / 2.0 - half;
                    for b in 0..SUB {
                        let fy = (j * SUB + b) as f64 * step + step / 2.0 - half;
                        let w = WorldPoint::new(
                            pose.position.x + cos * fx - sin * fy,
                            pose.position.y + sin * fx + cos * fy,
                        );
                        let (c, r) = self.world_to_signed(w);
                        if self.get_signed(c, r).blocks() {
                            hits += 1;
                        }
                    }
                }
                out[i * side + j] = hits as f64 / (SUB * SUB) as f64;
            }
        }
        out
    }
}

fn axis_index(v: f64, n: usize) -> Option<usize> {
    if !(v >= 0.0 && v <= n as f64) {
        return None;
    }
    if v == 0.0 {
        return Some(0);
    }
    Some(v.ceil() as usize - 1)
}
