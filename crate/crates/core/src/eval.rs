//! Benchmark runner, success metrics, result tables and trajectory renders.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{run_episode, AgentConfig, AgentError, AgentSpec, EvalRecord, SceneContext, StepLogEntry};
use crate::episodes::{EpisodeParams, EpisodeSampler};
use crate::floorgrid::{write_rgb_png, Cell, GridError, Scene};
use crate::geometry::{Pose, WorldPoint};
use crate::policy::Policy;
use crate::seeds::derive_seed;
use crate::simulator::{judge_values, CollisionLimit, SimConfig};

pub const TAU_D: [f64; 3] = [0.25, 0.30, 0.35];
pub const TAU_C: [CollisionLimit; 4] = [
    CollisionLimit::Bounded(10),
    CollisionLimit::Bounded(30),
    CollisionLimit::Bounded(50),
    CollisionLimit::Unbounded,
];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to aggregate")]
    Empty,
    #[error("record {index} has nonpositive shortest length {value}")]
    BadShortest { index: usize, value: f64 },
    #[error("no scenes to evaluate")]
    NoScenes,
    #[error("track for scene {found} rendered on scene {expected}")]
    SceneMismatch { expected: String, found: String },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EvalRecord {
    pub fn succeeded(&self, tau_d: f64, tau_c: CollisionLimit) -> bool {
        judge_values(
            self.final_distance,
            self.collisions,
            self.traveled,
            tau_d,
            tau_c,
            self.max_travel,
        )
        .success
    }
}

/// Fraction of successful records.
pub fn sr(records: &[EvalRecord], tau_d: f64, tau_c: CollisionLimit) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = records.iter().filter(|r| r.succeeded(tau_d, tau_c)).count();
    Ok(n as f64 / records.len() as f64)
}

/// Mean of S_i · l_i / max(p_i, l_i).
pub fn spl(records: &[EvalRecord], tau_d: f64, tau_c: CollisionLimit) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sum = 0.0;
    for (index, r) in records.iter().enumerate() {
        if r.shortest.is_nan() || r.shortest <= 0.0 {
            return Err(EvalError::BadShortest {
                index,
                value: r.shortest,
            });
        }
        if r.succeeded(tau_d, tau_c) {
            sum += r.shortest / r.traveled.max(r.shortest);
        }
    }
    Ok(sum / records.len() as f64)
}

/// Mean collision count over successful records; `None` when nothing succeeds.
pub fn mean_collisions(records: &[EvalRecord], tau_d: f64, tau_c: CollisionLimit) -> Option<f64> {
    let hits: Vec<u32> = records
        .iter()
        .filter(|r| r.succeeded(tau_d, tau_c))
        .map(|r| r.collisions)
        .collect();
    (!hits.is_empty()).then(|| hits.iter().map(|&c| c as f64).sum::<f64>() / hits.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub tau_d: f64,
    pub tau_c: CollisionLimit,
    pub sr: f64,
    pub spl: f64,
    pub mean_collisions: Option<f64>,
    pub n_episodes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    /// Full threshold sweep, ordered by τ_c, then method (first appearance),
    /// then τ_d.
    pub fn from_records(records: &[EvalRecord]) -> Result<Self, EvalError> {
        if records.is_empty() {
            return Err(EvalError::Empty);
        }
        let mut methods: Vec<&str> = Vec::new();
        for r in records {
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }
        let mut rows = Vec::new();
        for &tau_c in &TAU_C {
            for m in &methods {
                let mine: Vec<EvalRecord> = records.iter().filter(|r| r.method == *m).cloned().collect();
                for &tau_d in &TAU_D {
                    rows.push(ResultRow {
                        method: m.to_string(),
                        tau_d,
                        tau_c,
                        sr: sr(&mine, tau_d, tau_c)?,
                        spl: spl(&mine, tau_d, tau_c)?,
                        mean_collisions: mean_collisions(&mine, tau_d, tau_c),
                        n_episodes: mine.len(),
                    });
                }
            }
        }
        Ok(Self { rows })
    }

    pub fn get(&self, method: &str, tau_d: f64, tau_c: CollisionLimit) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.tau_d == tau_d && r.tau_c == tau_c)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,tau_d,tau_c,sr,spl,mean_collisions,n_episodes\n");
        for r in &self.rows {
            let mc = r.mean_collisions.map_or("NA".to_string(), |v| v.to_string());
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.method, r.tau_d, r.tau_c, r.sr, r.spl, mc, r.n_episodes
            )
            .unwrap();
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub scene_id: String,
    pub pair_index: usize,
    pub start: Pose,
    pub goal: WorldPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub pairs_per_scene: usize,
    pub sim: SimConfig,
    pub agent: AgentConfig,
    pub episodes: EpisodeParams,
    pub workers: usize,
    pub keep_logs: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            pairs_per_scene: 10,
            sim: SimConfig::default(),
            agent: AgentConfig::default(),
            episodes: EpisodeParams::default(),
            workers: 1,
            keep_logs: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub table: ResultTable,
    pub pairs: Vec<PairSpec>,
    pub records: Vec<EvalRecord>,
    /// Scenes skipped because no feasible pair could be drawn.
    pub warnings: Vec<String>,
}

/// Draws the shared start/goal pairs for every scene.
pub fn sample_pairs(scenes: &[Scene], cfg: &BenchmarkConfig, seed: u64) -> (Vec<PairSpec>, Vec<String>) {
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        let sampler = EpisodeSampler::new(scene, &cfg.episodes);
        for p in 0..cfg.pairs_per_scene {
            match sampler.sample(derive_seed(seed, "eval-pairs", (si * 1_000_000 + p) as u64)) {
                Ok(e) => pairs.push(PairSpec {
                    scene_id: scene.id.clone(),
                    pair_index: p,
                    start: e.start,
                    goal: e.goal,
                }),
                Err(e) => {
                    warnings.push(format!("skipping scene {}: {e}", scene.id));
                    break;
                }
            }
        }
    }
    (pairs, warnings)
}

/// Runs every agent on every shared pair. Record order is (agent, scene,
/// pair) regardless of the worker count.
pub fn run_benchmark(
    agents: &[(AgentSpec, Option<&Policy>)],
    scenes: &[Scene],
    cfg: &BenchmarkConfig,
    seed: u64,
) -> Result<BenchmarkResult, EvalError> {
    if scenes.is_empty() {
        return Err(EvalError::NoScenes);
    }
    let (pairs, warnings) = sample_pairs(scenes, cfg, seed);
    for w in &warnings {
        log::warn!("{w}");
    }
    let plan_side = agents.iter().find_map(|(_, p)| p.map(|p| p.config.plan_side));
    let contexts: Vec<SceneContext> = scenes
        .iter()
        .map(|s| SceneContext::new(s, &cfg.sim, plan_side))
        .collect();
    let ctx_of = |id: &str| {
        contexts
            .iter()
            .find(|c| c.scene.id == id)
            .expect("pair from known scene")
    };
    let jobs: Vec<(usize, usize)> = (0..agents.len())
        .flat_map(|a| (0..pairs.len()).map(move |p| (a, p)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    let records: Vec<Result<EvalRecord, AgentError>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(a, p)| {
                let (spec, policy) = &agents[a];
                let pair = &pairs[p];
                // seeded by pair only, so every agent sees the same noise stream
                let s = derive_seed(seed, "eval-episode", p as u64);
                let mut r = run_episode(
                    spec,
                    *policy,
                    ctx_of(&pair.scene_id),
                    pair.start,
                    pair.goal,
                    &cfg.sim,
                    &cfg.agent,
                    s,
                    cfg.keep_logs,
                )?;
                r.pair_index = pair.pair_index;
                Ok(r)
            })
            .collect()
    });
    let records = records.into_iter().collect::<Result<Vec<_>, _>>()?;
    let table = if records.is_empty() {
        ResultTable::default()
    } else {
        ResultTable::from_records(&records)?
    };
    Ok(BenchmarkResult {
        table,
        pairs,
        records,
        warnings,
    })
}

/// Writes `results.csv` and `results.json`; step logs go to `logs/` when kept.
pub fn write_results(res: &BenchmarkResult, dir: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), res.table.to_csv())?;
    let mut mirror = res.clone();
    for r in &mut mirror.records {
        r.log = None;
    }
    let json = serde_json::to_string_pretty(&mirror).map_err(std::io::Error::other)?;
    fs::write(dir.join("results.json"), json + "\n")?;
    if res.records.iter().any(|r| r.log.is_some()) {
        let logs = dir.join("logs");
        fs::create_dir_all(&logs)?;
        for r in &res.records {
            if let Some(log) = &r.log {
                let name = format!("{}__{}__{}.jsonl", r.method, r.scene_id, r.pair_index);
                crate::agents::write_step_log(log, &logs.join(name))?;
            }
        }
    }
    Ok(())
}

/// One trajectory to draw.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub scene_id: String,
    pub start: Pose,
    pub log: Vec<StepLogEntry>,
}

const PALETTE: [[u8; 3]; 6] = [
    [0, 158, 115],
    [230, 159, 0],
    [204, 121, 167],
    [86, 180, 233],
    [213, 94, 0],
    [120, 80, 200],
];
const GOAL: [u8; 3] = [220, 20, 20];
const START: [u8; 3] = [20, 60, 220];

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let i = 3 * (y as usize * self.w + x as usize);
            self.px[i..i + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, a: (i64, i64), b: (i64, i64), c: [u8; 3]) {
        let (mut x, mut y) = a;
        let (dx, dy) = ((b.0 - x).abs(), -(b.1 - y).abs());
        let (sx, sy) = ((b.0 - x).signum(), (b.1 - y).signum());
        let mut err = dx + dy;
        loop {
            self.put(x, y, c);
            if (x, y) == b {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn disk(&mut self, center: (i64, i64), r: i64, c: [u8; 3]) {
        for y in -r..=r {
            for x in -r..=r {
                if x * x + y * y <= r * r {
                    self.put(center.0 + x, center.1 + y, c);
                }
            }
        }
    }
}

/// Draws the floor plan (walls black), furniture present only in the truth
/// map (light gray), each track in its own color, the start as a blue arrow
/// and the goal as a red disk. North is up.
pub fn render_trajectory(
    scene: &Scene,
    tracks: &[Track],
    goal: WorldPoint,
    scale: usize,
    path: &Path,
) -> Result<(), EvalError> {
    for t in tracks {
        if t.scene_id != scene.id {
            return Err(EvalError::SceneMismatch {
                expected: scene.id.clone(),
                found: t.scene_id.clone(),
            });
        }
    }
    let scale = scale.max(1);
    let plan = &scene.floor_plan;
    let (w, h) = (plan.width() * scale, plan.height() * scale);
    let mut cv = Canvas {
        w,
        h,
        px: vec![255; 3 * w * h],
    };
    for (i, (&p, &t)) in plan.cells().iter().zip(scene.truth_map.cells()).enumerate() {
        let shade = match (p, t) {
            (Cell::Free, Cell::Free) => continue,
            (Cell::Free, _) => 200,
            (Cell::Unknown, _) => 127,
            (Cell::Occupied, _) => 0,
        };
        let u = plan.coord(i);
        let top = (plan.height() - 1 - u.row) * scale;
        for y in top..top + scale {
            for x in u.col * scale..(u.col + 1) * scale {
                cv.put(x as i64, y as i64, [shade; 3]);
            }
        }
    }
    let px_per_m = scale as f64 / plan.resolution();
    let origin = plan.offset();
    let to_px = |p: WorldPoint| -> (i64, i64) {
        let x = ((p.x - origin.x) * px_per_m).floor() as i64;
        let y = h as i64 - 1 - ((p.y - origin.y) * px_per_m).floor() as i64;
        (x, y)
    };
    for (k, t) in tracks.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut prev = to_px(t.start.position);
        for e in &t.log {
            let next = to_px(WorldPoint::new(e.x, e.y));
            cv.line(prev, next, color);
            prev = next;
        }
    }
    let marker = (0.15 * px_per_m).round().max(1.0) as i64;
    cv.disk(to_px(goal), marker, GOAL);
    if let Some(t) = tracks.first() {
        let s = t.start;
        let tip = WorldPoint::new(s.position.x + 0.4 * s.theta.cos(), s.position.y + 0.4 * s.theta.sin());
        cv.disk(to_px(s.position), (marker / 2).max(1), START);
        cv.line(to_px(s.position), to_px(tip), START);
        for side in [-1.0, 1.0] {
            let a = s.theta + std::f64::consts::PI + side * 0.5;
            let wing = WorldPoint::new(tip.x + 0.15 * a.cos(), tip.y + 0.15 * a.sin());
            cv.line(to_px(tip), to_px(wing), START);
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_rgb_png(path, w, h, &cv.px)?;
    Ok(())
}
