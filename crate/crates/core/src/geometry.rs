//! Planar points, poses and displacement actions shared by every module.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::ops::{Add, Sub};

/// A position in world coordinates, meters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
}

impl WorldPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: WorldPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }
}

impl Add<Action> for WorldPoint {
    type Output = WorldPoint;
    fn add(self, a: Action) -> WorldPoint {
        WorldPoint::new(self.x + a.dx, self.y + a.dy)
    }
}

impl Sub for WorldPoint {
    type Output = Action;
    fn sub(self, o: WorldPoint) -> Action {
        Action::new(self.x - o.x, self.y - o.y)
    }
}

/// A grid cell address. `col` indexes x, `row` indexes y.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelCoord {
    pub col: usize,
    pub row: usize,
}

impl PixelCoord {
    pub const fn new(col: usize, row: usize) -> Self {
        Self { col, row }
    }
}

/// Position plus heading in radians (counter-clockwise from +x, y up).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: WorldPoint,
    pub theta: f64,
}

impl Pose {
    pub const fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            position: WorldPoint::new(x, y),
            theta,
        }
    }
}

/// One-step planar displacement `p_t - p_{t-1}` in meters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
}

impl Action {
    pub const fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy }
    }

    pub fn norm(self) -> f64 {
        self.dx.hypot(self.dy)
    }

    pub fn scaled(self, s: f64) -> Action {
        Action::new(self.dx * s, self.dy * s)
    }

    /// Counter-clockwise rotation by `angle` radians.
    pub fn rotated(self, angle: f64) -> Action {
        let (s, c) = angle.sin_cos();
        Action::new(c * self.dx - s * self.dy, s * self.dx + c * self.dy)
    }
}

/// Wraps an angle to `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    if (-PI..PI).contains(&theta) {
        return theta;
    }
    let t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t >= PI {
        t - 2.0 * PI
    } else {
        t
    }
}

/// Smallest absolute difference between two angles.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}
