//! Kinematic execution on the truth map.
//!
//! The agent is a disk of `agent_radius`. A step moves it by the commanded
//! displacement, checked at `substeps` evenly spaced points; on contact the
//! agent stops at the last clear sub-position and one collision is counted.
//! Observations are raycast distances over the camera field of view, which
//! stand in for the RGB frames a real robot would see.

use std::f64::consts::{FRAC_PI_4, PI};
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::floorgrid::GridMap;
use crate::geometry::{wrap_angle, Action, Pose, WorldPoint};

/// Collision-count threshold `τ_c`; `Unbounded` is the explicit `∞`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CollisionLimit {
    Bounded(u32),
    Unbounded,
}

impl CollisionLimit {
    pub fn allows(self, collisions: u32) -> bool {
        match self {
            CollisionLimit::Bounded(n) => collisions <= n,
            CollisionLimit::Unbounded => true,
        }
    }
}

impl fmt::Display for CollisionLimit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CollisionLimit::Bounded(n) => write!(f, "{n}"),
            CollisionLimit::Unbounded => f.write_str("inf"),
        }
    }
}

impl std::str::FromStr for CollisionLimit {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "inf" | "infinity" | "∞" => Ok(CollisionLimit::Unbounded),
            v => v
                .parse()
                .map(CollisionLimit::Bounded)
                .map_err(|_| format!("collision limit must be an integer or \"inf\", got {v:?}")),
        }
    }
}

impl Serialize for CollisionLimit {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            CollisionLimit::Bounded(n) => s.serialize_u32(*n),
            CollisionLimit::Unbounded => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for CollisionLimit {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u32),
            F(f64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(CollisionLimit::Bounded(n)),
            Raw::F(f) if f == f64::INFINITY => Ok(CollisionLimit::Unbounded),
            Raw::F(f) => Err(serde::de::Error::custom(format!(
                "collision limit {f} is neither a count nor inf"
            ))),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub agent_radius: f64,
    pub tau_d: f64,
    pub tau_c: CollisionLimit,
    /// Travel cap in meters; longer runs are failures.
    pub max_travel: f64,
    pub fov_deg: f64,
    pub rays: usize,
    pub substeps: usize,
    pub max_range: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            agent_radius: 0.18,
            tau_d: 0.3,
            tau_c: CollisionLimit::Unbounded,
            max_travel: 100.0,
            fov_deg: 45.0,
            rays: 32,
            substeps: 8,
            max_range: 10.0,
        }
    }
}

impl SimConfig {
    /// Dilation radius for planning grids: the agent radius plus one cell.
    ///
    /// Inflating by `agent_radius + resolution` guarantees that a disk moving
    /// between adjacent free cell centers never touches a blocked cell.
    pub fn planning_radius(&self, resolution: f64) -> f64 {
        self.agent_radius + resolution
    }

    pub fn validate(&self) -> Result<(), String> {
        let pos = |v: f64, n: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("{n} must be positive, got {v}"))
            }
        };
        pos(self.agent_radius, "agent_radius")?;
        pos(self.tau_d, "tau_d")?;
        pos(self.max_travel, "max_travel")?;
        pos(self.fov_deg, "fov_deg")?;
        pos(self.max_range, "max_range")?;
        if self.rays == 0 || self.substeps == 0 {
            return Err("rays and substeps must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub pose: Pose,
    pub collision_count: u32,
    pub traveled: f64,
    pub step_count: u32,
}

impl AgentState {
    pub fn new(pose: Pose) -> Self {
        Self {
            pose,
            collision_count: 0,
            traveled: 0.0,
            step_count: 0,
        }
    }
}

/// Whether a disk overlaps any blocking cell (cells outside the grid block).
pub fn disk_collides(map: &GridMap, center: WorldPoint, radius: f64) -> bool {
    let res = map.resolution();
    let off = map.offset();
    let (c0, r0) = map.world_to_signed(WorldPoint::new(center.x - radius, center.y - radius));
    let (c1, r1) = map.world_to_signed(WorldPoint::new(center.x + radius, center.y + radius));
    let r2 = radius * radius;
    for row in r0..=r1 {
        for col in c0..=c1 {
            if !map.get_signed(col, row).blocks() {
                continue;
            }
            let (x0, y0) = (off.x + col as f64 * res, off.y + row as f64 * res);
            let nx = center.x.clamp(x0, x0 + res);
            let ny = center.y.clamp(y0, y0 + res);
            let (dx, dy) = (center.x - nx, center.y - ny);
            if dx * dx + dy * dy < r2 {
                return true;
            }
        }
    }
    false
}

/// Moves the agent by `action`, stopping at the last collision-free
/// sub-position on contact. Returns the new state and whether it collided.
pub fn step(state: &AgentState, action: Action, map: &GridMap, cfg: &SimConfig) -> (AgentState, bool) {
    let mut next = *state;
    next.step_count += 1;
    if action.dx == 0.0 && action.dy == 0.0 {
        return (next, false);
    }
    next.pose.theta = action.dy.atan2(action.dx);
    let start = state.pose.position;
    let n = cfg.substeps.max(1);
    let mut reached = start;
    let mut collided = false;
    for j in 1..=n {
        let p = if j == n {
            start + action
        } else {
            start + action.scaled(j as f64 / n as f64)
        };
        if disk_collides(map, p, cfg.agent_radius) {
            collided = true;
            break;
        }
        reached = p;
    }
    if collided {
        next.collision_count += 1;
    }
    next.traveled += start.distance(reached);
    next.pose.position = reached;
    (next, collided)
}

/// Collision response: rotate 45° clockwise in place.
pub fn recover(state: &AgentState) -> AgentState {
    let mut next = *state;
    next.pose.theta = wrap_angle(state.pose.theta - FRAC_PI_4);
    next
}

/// Executes `actions` from `start` without any recovery behavior.
pub fn replay(start: Pose, actions: &[Action], map: &GridMap, cfg: &SimConfig) -> AgentState {
    actions
        .iter()
        .fold(AgentState::new(start), |s, &a| step(&s, a, map, cfg).0)
}

/// Raycast observation: normalized hit distances in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub rays: Vec<f64>,
}

/// Distance along a ray to the first blocking cell (or the grid edge),
/// capped at `max_range`.
pub fn cast_ray(map: &GridMap, origin: WorldPoint, angle: f64, max_range: f64) -> f64 {
    let res = map.resolution();
    let off = map.offset();
    let (dx, dy) = (angle.cos(), angle.sin());
    let gx = (origin.x - off.x) / res;
    let gy = (origin.y - off.y) / res;
    let (mut col, mut row) = (gx.floor() as i64, gy.floor() as i64);
    if map.get_signed(col, row).blocks() {
        return 0.0;
    }
    let step_c: i64 = if dx > 0.0 { 1 } else { -1 };
    let step_r: i64 = if dy > 0.0 { 1 } else { -1 };
    let t_delta_x = if dx != 0.0 { res / dx.abs() } else { f64::INFINITY };
    let t_delta_y = if dy != 0.0 { res / dy.abs() } else { f64::INFINITY };
    let mut t_max_x = if dx > 0.0 {
        ((col + 1) as f64 - gx) * res / dx
    } else if dx < 0.0 {
        (gx - col as f64) * res / -dx
    } else {
        f64::INFINITY
    };
    let mut t_max_y = if dy > 0.0 {
        ((row + 1) as f64 - gy) * res / dy
    } else if dy < 0.0 {
        (gy - row as f64) * res / -dy
    } else {
        f64::INFINITY
    };
    loop {
        let t = if t_max_x < t_max_y {
            col += step_c;
            let t = t_max_x;
            t_max_x += t_delta_x;
            t
        } else {
            row += step_r;
            let t = t_max_y;
            t_max_y += t_delta_y;
            t
        };
        if t >= max_range {
            return max_range;
        }
        if map.get_signed(col, row).blocks() {
            return t;
        }
    }
}

/// Ray headings, evenly spanning the field of view around `theta`.
pub fn ray_angles(theta: f64, cfg: &SimConfig) -> Vec<f64> {
    let fov = cfg.fov_deg.to_radians();
    if cfg.rays == 1 {
        return vec![theta];
    }
    (0..cfg.rays)
        .map(|i| theta + fov * (i as f64 / (cfg.rays - 1) as f64 - 0.5))
        .collect()
}

pub fn observe(pose: &Pose, map: &GridMap, cfg: &SimConfig) -> Observation {
    let rays = ray_angles(pose.theta, cfg)
        .into_iter()
        .map(|a| (cast_ray(map, pose.position, a, cfg.max_range) / cfg.max_range).clamp(0.0, 1.0))
        .collect();
    Observation { rays }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrientationNoise {
    /// Keep the true heading.
    Keep,
    /// Replace the heading with a uniform draw over `[0, 2π)`.
    Uniform,
}

/// Pose corrupted by isotropic Gaussian position noise of variance
/// `pos_var` (m²) per axis.
pub fn noisy_pose(pose: &Pose, pos_var: f64, mode: OrientationNoise, rng: &mut impl Rng) -> Pose {
    assert!(pos_var >= 0.0, "position variance must be non-negative");
    let mut out = *pose;
    if pos_var > 0.0 {
        let n = Normal::new(0.0, pos_var.sqrt()).expect("finite std");
        out.position.x += n.sample(rng);
        out.position.y += n.sample(rng);
    }
    if mode == OrientationNoise::Uniform {
        out.theta = rng.random_range(0.0..2.0 * PI);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailReason {
    Distance,
    Collisions,
    Travel,
}

impl fmt::Display for FailReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailReason::Distance => "distance",
            FailReason::Collisions => "collisions",
            FailReason::Travel => "travel",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Judgement {
    pub success: bool,
    pub reason: Option<FailReason>,
}

/// Success test shared by every agent and metric.
pub fn judge_values(
    final_distance: f64,
    collisions: u32,
    traveled: f64,
    tau_d: f64,
    tau_c: CollisionLimit,
    max_travel: f64,
) -> Judgement {
    let reason = if final_distance > tau_d {
        Some(FailReason::Distance)
    } else if !tau_c.allows(collisions) {
        Some(FailReason::Collisions)
    } else if traveled > max_travel {
        Some(FailReason::Travel)
    } else {
        None
    };
    Judgement {
        success: reason.is_none(),
        reason,
    }
}

pub fn judge(state: &AgentState, goal: WorldPoint, cfg: &SimConfig) -> Judgement {
    judge_values(
        state.pose.position.distance(goal),
        state.collision_count,
        state.traveled,
        cfg.tau_d,
        cfg.tau_c,
        cfg.max_travel,
    )
}
