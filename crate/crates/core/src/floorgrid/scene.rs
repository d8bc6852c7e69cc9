//! Synthetic multi-room scenes: a wall-only floor plan and a furnished
//! truth map sharing one frame.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{io, Cell, GridError, GridMap, DEFAULT_RESOLUTION};
use crate::geometry::{PixelCoord, WorldPoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    pub fn name(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        }
    }

    /// Footprint area range in m²: small < 20, medium 20–80, large > 80.
    fn area_range(self) -> (f64, f64) {
        match self {
            SizeClass::Small => (14.0, 19.5),
            SizeClass::Medium => (24.0, 75.0),
            SizeClass::Large => (85.0, 140.0),
        }
    }

    fn max_rooms(self) -> usize {
        match self {
            SizeClass::Small => 2,
            SizeClass::Medium => 4,
            SizeClass::Large => 7,
        }
    }

    pub fn classify(area_m2: f64) -> SizeClass {
        if area_m2 < 20.0 {
            SizeClass::Small
        } else if area_m2 <= 80.0 {
            SizeClass::Medium
        } else {
            SizeClass::Large
        }
    }
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SizeClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "small" => Ok(SizeClass::Small),
            "medium" => Ok(SizeClass::Medium),
            "large" => Ok(SizeClass::Large),
            _ => Err(format!("unknown size class {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub size_class: SizeClass,
    pub floor_plan: GridMap,
    pub truth_map: GridMap,
}

impl Scene {
    pub fn new(
        id: impl Into<String>,
        size_class: SizeClass,
        floor_plan: GridMap,
        truth_map: GridMap,
    ) -> Result<Self, GridError> {
        if !floor_plan.same_frame(&truth_map) {
            return Err(GridError::Invalid("floor plan and truth map frames differ".into()));
        }
        if floor_plan
            .cells()
            .iter()
            .zip(truth_map.cells())
            .any(|(p, t)| p.blocks() && !t.blocks())
        {
            return Err(GridError::Invalid(
                "truth map frees a cell the floor plan blocks".into(),
            ));
        }
        Ok(Self {
            id: id.into(),
            size_class,
            floor_plan,
            truth_map,
        })
    }
}

/// Geometry knobs for [`synth_scene`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    pub resolution: f64,
    pub agent_radius: f64,
    /// Obstacle dilation used when checking that free space stays connected.
    pub clearance: f64,
    pub wall_thickness: f64,
    pub min_room: f64,
    /// Door gap width; at least four agent diameters.
    pub door_width: f64,
    /// Furniture is kept this far from door gaps on both sides of the wall.
    pub door_keepout: f64,
    pub furniture_min: f64,
    pub furniture_max: f64,
    pub max_attempts: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            agent_radius: 0.18,
            clearance: 0.28,
            wall_thickness: 0.2,
            min_room: 2.2,
            door_width: 1.5,
            door_keepout: 0.8,
            furniture_min: 0.3,
            furniture_max: 1.2,
            max_attempts: 6000,
        }
    }
}

/// Half-open cell rectangle `[c0, c1) × [r0, r1)`.
#[derive(Clone, Copy, Debug)]
struct Rect {
    c0: usize,
    r0: usize,
    c1: usize,
    r1: usize,
}

impl Rect {
    fn w(&self) -> usize {
        self.c1 - self.c0
    }
    fn h(&self) -> usize {
        self.r1 - self.r0
    }
    fn grow(&self, m: usize) -> (i64, i64, i64, i64) {
        let m = m as i64;
        (
            self.c0 as i64 - m,
            self.r0 as i64 - m,
            self.c1 as i64 + m,
            self.r1 as i64 + m,
        )
    }
    fn intersects(a: (i64, i64, i64, i64), b: (i64, i64, i64, i64)) -> bool {
        a.0 < b.2 && b.0 < a.2 && a.1 < b.3 && b.1 < a.3
    }
}

#[derive(Clone, Copy, Debug)]
struct Door {
    rect: Rect,
    /// True when the gap is cut through a vertical wall (passage along x).
    vertical_wall: bool,
}

fn fill(map: &mut GridMap, r: Rect, c: Cell) {
    for row in r.r0..r.r1 {
        for col in r.c0..r.c1 {
            map.set(PixelCoord::new(col, row), c);
        }
    }
}

fn cells(m: f64, res: f64) -> usize {
    (m / res).round().max(1.0) as usize
}

struct Layout {
    plan: GridMap,
    doors: Vec<Door>,
    rooms: usize,
}

fn split_rooms(rng: &mut ChaCha8Rng, class: SizeClass, p: &SceneParams, plan: &mut GridMap, interior: Rect) -> Layout {
    let res = p.resolution;
    let wall = cells(p.wall_thickness, res);
    let min_room = cells(p.min_room, res);
    let door = cells(p.door_width, res);
    let margin = cells(0.5, res);
    let mut doors: Vec<Door> = Vec::new();
    let mut rooms = 1;
    let mut stack = vec![interior];
    let mut leaves = Vec::new();
    while let Some(r) = stack.pop() {
        let area = (r.w() * r.h()) as f64 * res * res;
        let want = rooms < class.max_rooms() && (area > 14.0 || rng.random_bool(0.5));
        let can_v = r.w() >= 2 * min_room + wall && r.h() >= door + 2;
        let can_h = r.h() >= 2 * min_room + wall && r.w() >= door + 2;
        if !want || !(can_v || can_h) {
            leaves.push(r);
            continue;
        }
        let vertical = if can_v && can_h { r.w() >= r.h() } else { can_v };
        let mut placed = None;
        for _ in 0..40 {
            let (wall_rect, door_rect, a, b) = if vertical {
                let s = rng.random_range(r.c0 + min_room..=r.c1 - min_room - wall);
                let d = rng.random_range(r.r0 + 1..=r.r1 - door - 1);
                (
                    Rect {
                        c0: s,
                        r0: r.r0,
                        c1: s + wall,
                        r1: r.r1,
                    },
                    Rect {
                        c0: s,
                        r0: d,
                        c1: s + wall,
                        r1: d + door,
                    },
                    Rect {
                        c0: r.c0,
                        r0: r.r0,
                        c1: s,
                        r1: r.r1,
                    },
                    Rect {
                        c0: s + wall,
                        r0: r.r0,
                        c1: r.c1,
                        r1: r.r1,
                    },
                )
            } else {
                let s = rng.random_range(r.r0 + min_room..=r.r1 - min_room - wall);
                let d = rng.random_range(r.c0 + 1..=r.c1 - door - 1);
                (
                    Rect {
                        c0: r.c0,
                        r0: s,
                        c1: r.c1,
                        r1: s + wall,
                    },
                    Rect {
                        c0: d,
                        r0: s,
                        c1: d + door,
                        r1: s + wall,
                    },
                    Rect {
                        c0: r.c0,
                        r0: r.r0,
                        c1: r.c1,
                        r1: s,
                    },
                    Rect {
                        c0: r.c0,
                        r0: s + wall,
                        c1: r.c1,
                        r1: r.r1,
                    },
                )
            };
            // a new wall must stay clear of existing door gaps
            let grown = wall_rect.grow(margin);
            if doors.iter().any(|d| Rect::intersects(grown, d.rect.grow(0))) {
                continue;
            }
            placed = Some((wall_rect, door_rect, a, b));
            break;
        }
        match placed {
            Some((wall_rect, door_rect, a, b)) => {
                fill(plan, wall_rect, Cell::Occupied);
                fill(plan, door_rect, Cell::Free);
                doors.push(Door {
                    rect: door_rect,
                    vertical_wall: vertical,
                });
                rooms += 1;
                stack.push(a);
                stack.push(b);
            }
            None => leaves.push(r),
        }
    }
    Layout {
        plan: plan.clone(),
        doors,
        rooms,
    }
}

/// Generates a connected multi-room scene.
///
/// The floor plan holds the outer and inner walls; door gaps of
/// `door_width` join the rooms. The truth map adds axis-aligned furniture
/// until `furniture_density` of the free floor is covered, rejecting
/// placements that intrude on a door gap or that split the (clearance-dilated)
/// free space. The result is a pure function of the arguments.
pub fn synth_scene(
    seed: u64,
    size_class: SizeClass,
    furniture_density: f64,
    p: &SceneParams,
) -> Result<Scene, GridError> {
    if !(0.0..1.0).contains(&furniture_density) {
        return Err(GridError::Generation(format!(
            "furniture density must lie in [0, 1), got {furniture_density}"
        )));
    }
    if p.door_width < 4.0 * 2.0 * p.agent_radius - 1e-9 {
        return Err(GridError::Generation("door width below four agent diameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE4_E5EE_D000_0000 ^ size_class as u64);
    let res = p.resolution;
    let (lo, hi) = size_class.area_range();
    let area = rng.random_range(lo..hi);
    let aspect = rng.random_range(0.75..1.34);
    let w_m = (area * aspect).sqrt();
    let h_m = area / w_m;
    let wall = cells(p.wall_thickness, res);
    let (iw, ih) = (cells(w_m, res), cells(h_m, res));
    let (gw, gh) = (iw + 2 * wall, ih + 2 * wall);
    let mut plan = GridMap::new(gw, gh, res, WorldPoint::new(0.0, 0.0), Cell::Occupied)?;
    let interior = Rect {
        c0: wall,
        r0: wall,
        c1: wall + iw,
        r1: wall + ih,
    };
    fill(&mut plan, interior, Cell::Free);
    let layout = split_rooms(&mut rng, size_class, p, &mut plan, interior);
    let plan = layout.plan;
    log::debug!(
        "scene seed {seed}: {} rooms, {} doors",
        layout.rooms,
        layout.doors.len()
    );

    let clearance_reach = p.clearance / res + 0.5;
    if plan.inflate(p.clearance).free_components() != 1 || plan.free_components() != 1 {
        return Err(GridError::Generation(format!(
            "seed {seed}: floor plan is not connected"
        )));
    }

    let keepout = cells(p.door_keepout, res);
    let keepouts: Vec<(i64, i64, i64, i64)> = layout
        .doors
        .iter()
        .map(|d| {
            let (c0, r0, c1, r1) = d.rect.grow(0);
            let k = keepout as i64;
            if d.vertical_wall {
                (c0 - k, r0, c1 + k, r1)
            } else {
                (c0, r0 - k, c1, r1 + k)
            }
        })
        .collect();

    let mut truth = plan.clone();
    let free_floor = plan.count(Cell::Free);
    let target = (furniture_density * free_floor as f64).ceil() as usize;
    let mut covered = 0usize;
    let mut inflated = truth.inflate(p.clearance);
    let (fmin, fmax) = (cells(p.furniture_min, res), cells(p.furniture_max, res));
    let mut attempts = 0;
    while covered < target {
        attempts += 1;
        if attempts > p.max_attempts {
            return Err(GridError::Generation(format!(
                "seed {seed}: furniture placement retry limit exceeded ({covered}/{target} cells)"
            )));
        }
        let fw = rng.random_range(fmin..=fmax).min(iw);
        let fh = rng.random_range(fmin..=fmax).min(ih);
        let c0 = rng.random_range(interior.c0..=interior.c1 - fw);
        let r0 = rng.random_range(interior.r0..=interior.r1 - fh);
        let rect = Rect {
            c0,
            r0,
            c1: c0 + fw,
            r1: r0 + fh,
        };
        if keepouts.iter().any(|&k| Rect::intersects(rect.grow(0), k)) {
            continue;
        }
        let mut cand = truth.clone();
        let mut added = 0;
        for row in rect.r0..rect.r1 {
            for col in rect.c0..rect.c1 {
                let u = PixelCoord::new(col, row);
                if cand.is_free(u) {
                    cand.set(u, Cell::Occupied);
                    added += 1;
                }
            }
        }
        if added == 0 {
            continue;
        }
        // dilate only the new rectangle into the running inflated map
        let mut cand_inflated = inflated.clone();
        let reach = clearance_reach.floor() as i64;
        let reach_sq = clearance_reach * clearance_reach + 1e-9;
        for row in rect.r0 as i64 - reach..rect.r1 as i64 + reach {
            for col in rect.c0 as i64 - reach..rect.c1 as i64 + reach {
                if !cand.in_bounds(col, row) {
                    continue;
                }
                let dc = (col - (rect.c1 as i64 - 1).min(col.max(rect.c0 as i64))) as f64;
                let dr = (row - (rect.r1 as i64 - 1).min(row.max(rect.r0 as i64))) as f64;
                if dc * dc + dr * dr <= reach_sq {
                    cand_inflated.set(PixelCoord::new(col as usize, row as usize), Cell::Occupied);
                }
            }
        }
        if cand_inflated.free_components() != 1 || cand.free_components() != 1 {
            continue;
        }
        truth = cand;
        inflated = cand_inflated;
        covered += added;
    }
    let id = format!("{}-{seed}", size_class.name());
    Scene::new(id, size_class, plan, truth)
}

/// Writes `dir/floor_plan.png`, `dir/truth_map.png` (with sidecars) and
/// `dir/scene.meta`.
pub fn save_scene(scene: &Scene, dir: &Path) -> Result<(), GridError> {
    fs::create_dir_all(dir)?;
    io::save_map(&scene.floor_plan, &dir.join("floor_plan.png"), &scene.id)?;
    io::save_map(&scene.truth_map, &dir.join("truth_map.png"), &scene.id)?;
    fs::write(
        dir.join("scene.meta"),
        format!("scene_id={}\nsize_class={}\n", scene.id, scene.size_class),
    )?;
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<Scene, GridError> {
    let meta_path = dir.join("scene.meta");
    let text = fs::read_to_string(&meta_path).map_err(|e| GridError::Format {
        path: meta_path.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut id = None;
    let mut class = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match line.split_once('=') {
            Some(("scene_id", v)) => id = Some(v.to_string()),
            Some(("size_class", v)) => {
                class = Some(v.parse::<SizeClass>().map_err(|reason| GridError::Format {
                    path: meta_path.display().to_string(),
                    reason,
                })?)
            }
            _ => {
                return Err(GridError::Format {
                    path: meta_path.display().to_string(),
                    reason: format!("unexpected line {line:?}"),
                })
            }
        }
    }
    let bad = |what: &str| GridError::Format {
        path: meta_path.display().to_string(),
        reason: format!("missing {what}"),
    };
    let id = id.ok_or_else(|| bad("scene_id"))?;
    let class = class.ok_or_else(|| bad("size_class"))?;
    let (plan, pm) = io::load_map(&dir.join("floor_plan.png"))?;
    let (truth, tm) = io::load_map(&dir.join("truth_map.png"))?;
    if pm.scene_id != id || tm.scene_id != id {
        return Err(bad("matching scene ids in map sidecars"));
    }
    Scene::new(id, class, plan, truth)
}
