//! Demonstration episodes: sampling, JSONL storage and summary statistics.
//!
//! Start and goal are drawn uniformly from free cells of the truth map after
//! dilation by the planning radius, and the demonstration is the A* path on
//! that same dilated grid. Demonstrations therefore avoid furniture.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::floorgrid::{GridMap, Scene, SizeClass};
use crate::geometry::{Action, PixelCoord, Pose, WorldPoint};
use crate::planner::{assign_orientations, astar, path_to_actions, trajectory_length, PlanError, Trajectory};

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("scene {scene}: {reason}")]
    Sampling { scene: String, reason: String },
    #[error("empty episode set")]
    Empty,
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub scene_id: String,
    pub start: Pose,
    pub goal: WorldPoint,
    pub trajectory: Trajectory,
    pub actions: Vec<Action>,
    pub shortest_length: f64,
}

impl Episode {
    pub fn straight_line(&self) -> f64 {
        self.start.position.distance(self.goal)
    }

    pub fn positions(&self) -> Vec<WorldPoint> {
        self.trajectory.positions().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeParams {
    /// Minimum straight-line start/goal separation, meters.
    pub min_separation: f64,
    /// Dilation applied to the truth map before sampling and planning.
    pub planning_radius: f64,
    pub max_attempts: usize,
}

impl Default for EpisodeParams {
    fn default() -> Self {
        Self {
            min_separation: 3.0,
            planning_radius: 0.28,
            max_attempts: 2000,
        }
    }
}

/// Per-scene sampler; dilates the truth map once.
pub struct EpisodeSampler<'a> {
    scene: &'a Scene,
    grid: GridMap,
    free: Vec<PixelCoord>,
    params: EpisodeParams,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(scene: &'a Scene, params: &EpisodeParams) -> Self {
        let grid = scene.truth_map.inflate(params.planning_radius);
        let free = grid.free_cells();
        Self {
            scene,
            grid,
            free,
            params: params.clone(),
        }
    }

    pub fn planning_grid(&self) -> &GridMap {
        &self.grid
    }

    fn fail(&self, reason: impl Into<String>) -> EpisodeError {
        EpisodeError::Sampling {
            scene: self.scene.id.clone(),
            reason: reason.into(),
        }
    }

    pub fn sample(&self, seed: u64) -> Result<Episode, EpisodeError> {
        if self.free.len() < 2 {
            return Err(self.fail("fewer than two free cells after dilation"));
        }
        if self.max_extent() < self.params.min_separation {
            return Err(self.fail(format!(
                "no free cells {} m apart after dilation",
                self.params.min_separation
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..self.params.max_attempts {
            let s = self.free[rng.random_range(0..self.free.len())];
            let g = self.free[rng.random_range(0..self.free.len())];
            let (ps, pg) = (
                self.grid.pixel_to_world(s).expect("free cell"),
                self.grid.pixel_to_world(g).expect("free cell"),
            );
            if ps.distance(pg) < self.params.min_separation {
                continue;
            }
            let Some(path) = astar(&self.grid, s, g)? else {
                continue;
            };
            let points = path.to_world(&self.grid).expect("path cells in bounds");
            let trajectory = assign_orientations(&points);
            let actions = path_to_actions(&trajectory);
            return Ok(Episode {
                scene_id: self.scene.id.clone(),
                start: trajectory.poses[0],
                goal: pg,
                shortest_length: trajectory_length(&trajectory),
                trajectory,
                actions,
            });
        }
        Err(self.fail(format!(
            "rejection budget of {} draws exhausted",
            self.params.max_attempts
        )))
    }

    /// Diagonal of the bounding box of free cell centers; an upper bound on
    /// any pairwise separation.
    fn max_extent(&self) -> f64 {
        let (mut c0, mut c1, mut r0, mut r1) = (usize::MAX, 0, usize::MAX, 0);
        for u in &self.free {
            c0 = c0.min(u.col);
            c1 = c1.max(u.col);
            r0 = r0.min(u.row);
            r1 = r1.max(u.row);
        }
        let res = self.grid.resolution();
        ((c1 - c0) as f64 * res).hypot((r1 - r0) as f64 * res)
    }
}

pub fn sample_episode(scene: &Scene, seed: u64, params: &EpisodeParams) -> Result<Episode, EpisodeError> {
    EpisodeSampler::new(scene, params).sample(seed)
}

/// Full-scale counts are 150 / 180 / 200; desk runs divide by `factor`.
pub fn episodes_per_scene(class: SizeClass, factor: u32) -> usize {
    let full = match class {
        SizeClass::Small => 150,
        SizeClass::Medium => 180,
        SizeClass::Large => 200,
    };
    (full / factor.max(1) as usize).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
}

impl Summary {
    fn of(mut v: Vec<f64>) -> Summary {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        Summary {
            min: v[0],
            max: v[n - 1],
            mean: v.iter().sum::<f64>() / n as f64,
            median,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: usize,
    pub straight_line: Summary,
    pub travel: Summary,
}

pub fn compute_stats(episodes: &[Episode]) -> Result<DatasetStats, EpisodeError> {
    if episodes.is_empty() {
        return Err(EpisodeError::Empty);
    }
    Ok(DatasetStats {
        count: episodes.len(),
        straight_line: Summary::of(episodes.iter().map(Episode::straight_line).collect()),
        travel: Summary::of(episodes.iter().map(|e| e.shortest_length).collect()),
    })
}

#[derive(Serialize, Deserialize)]
struct XyTheta {
    x: f64,
    y: f64,
    theta: f64,
}

#[derive(Serialize, Deserialize)]
struct Xy {
    x: f64,
    y: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    scene_id: String,
    start: XyTheta,
    goal: Xy,
    positions: Vec<[f64; 2]>,
    orientations: Vec<f64>,
    actions: Vec<[f64; 2]>,
    shortest_length: f64,
}

impl From<&Episode> for Record {
    fn from(e: &Episode) -> Self {
        Record {
            scene_id: e.scene_id.clone(),
            start: XyTheta {
                x: e.start.position.x,
                y: e.start.position.y,
                theta: e.start.theta,
            },
            goal: Xy {
                x: e.goal.x,
                y: e.goal.y,
            },
            positions: e
                .trajectory
                .poses
                .iter()
                .map(|p| [p.position.x, p.position.y])
                .collect(),
            orientations: e.trajectory.poses.iter().map(|p| p.theta).collect(),
            actions: e.actions.iter().map(|a| [a.dx, a.dy]).collect(),
            shortest_length: e.shortest_length,
        }
    }
}

impl TryFrom<Record> for Episode {
    type Error = String;
    fn try_from(r: Record) -> Result<Self, String> {
        if r.positions.len() != r.orientations.len() {
            return Err(format!(
                "{} positions but {} orientations",
                r.positions.len(),
                r.orientations.len()
            ));
        }
        if r.actions.len() + 1 != r.positions.len() && !(r.actions.is_empty() && r.positions.is_empty()) {
            return Err(format!(
                "{} actions for {} positions",
                r.actions.len(),
                r.positions.len()
            ));
        }
        let poses = r
            .positions
            .iter()
            .zip(&r.orientations)
            .map(|(p, &t)| Pose::new(p[0], p[1], t))
            .collect();
        Ok(Episode {
            scene_id: r.scene_id,
            start: Pose::new(r.start.x, r.start.y, r.start.theta),
            goal: WorldPoint::new(r.goal.x, r.goal.y),
            trajectory: Trajectory { poses },
            actions: r.actions.iter().map(|a| Action::new(a[0], a[1])).collect(),
            shortest_length: r.shortest_length,
        })
    }
}

pub fn write_dataset(episodes: &[Episode], w: &mut impl Write) -> std::io::Result<()> {
    for e in episodes {
        serde_json::to_writer(&mut *w, &Record::from(e))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(episodes: &[Episode], path: &Path) -> Result<(), EpisodeError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(episodes, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(r: impl BufRead, name: &str) -> Result<Vec<Episode>, EpisodeError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| EpisodeError::Parse {
            path: name.to_string(),
            line: i + 1,
            reason,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        out.push(Episode::try_from(rec).map_err(err)?);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Episode>, EpisodeError> {
    read_dataset(BufReader::new(File::open(path)?), &path.display().to_string())
}
