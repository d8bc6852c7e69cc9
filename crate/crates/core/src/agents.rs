//! Closed-loop navigation agents.
//!
//! Every agent runs the same loop: localize, plan a chunk of actions, execute
//! it step by step on the truth map, and replan. A collision triggers the
//! recovery rotation and an immediate replan from the new pose.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::floorgrid::{GridMap, Scene};
use crate::geometry::{Action, PixelCoord, Pose, WorldPoint};
use crate::planner::{astar, path_length, PlanError};
use crate::policy::{ContextInput, PlanFrame, Policy, PolicyError, Variant};
use crate::simulator::{noisy_pose, observe, recover, step, AgentState, OrientationNoise, SimConfig};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("infeasible episode in scene {scene}: {reason}")]
    Infeasible { scene: String, reason: String },
    #[error("agent {0} needs a trained policy")]
    MissingPolicy(String),
    #[error("policy variant {found} does not match agent kind {kind}")]
    VariantMismatch { kind: AgentKind, found: Variant },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    LocAstar,
    FloDiffLoc,
    FloDiffNaive,
    RandomWalk,
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentKind::LocAstar => "loc_astar",
            AgentKind::FloDiffLoc => "flodiff_loc",
            AgentKind::FloDiffNaive => "flodiff_naive",
            AgentKind::RandomWalk => "random_walk",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Localizer {
    GroundTruth,
    Noisy {
        pos_var: f64,
        orientation: OrientationNoise,
    },
}

impl Localizer {
    pub fn estimate(&self, truth: &Pose, rng: &mut impl Rng) -> Pose {
        match *self {
            Localizer::GroundTruth => *truth,
            Localizer::Noisy { pos_var, orientation } => noisy_pose(truth, pos_var, orientation, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    /// Method label used in result tables.
    pub name: String,
    pub kind: AgentKind,
    #[serde(default = "default_localizer")]
    pub localizer: Localizer,
    #[serde(default)]
    pub mask_floorplan: bool,
}

fn default_localizer() -> Localizer {
    Localizer::GroundTruth
}

impl AgentSpec {
    pub fn new(name: impl Into<String>, kind: AgentKind, localizer: Localizer) -> Self {
        Self {
            name: name.into(),
            kind,
            localizer,
            mask_floorplan: false,
        }
    }

    pub fn needs_policy(&self) -> Option<Variant> {
        match self.kind {
            AgentKind::FloDiffLoc => Some(Variant::Loc),
            AgentKind::FloDiffNaive => Some(Variant::Naive),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    /// The agent stops once this close to the goal.
    pub stop_radius: f64,
    pub replan_budget: usize,
    /// Off-grid or blocked pose estimates snap to a free cell within this distance.
    pub snap_radius: f64,
    pub random_step: f64,
    /// A chunk whose net displacement is below this ends the episode.
    pub idle_threshold: f64,
    /// Actions per chunk for agents without a policy.
    pub chunk: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            stop_radius: 0.25,
            replan_budget: 200,
            snap_radius: 1.0,
            random_step: 0.1,
            idle_threshold: 0.02,
            chunk: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLogEntry {
    pub step: u32,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub dx: f64,
    pub dy: f64,
    pub collided: bool,
    /// First step of a freshly planned chunk.
    pub replan: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    pub scene_id: String,
    pub pair_index: usize,
    pub final_distance: f64,
    pub collisions: u32,
    pub traveled: f64,
    pub shortest: f64,
    /// Travel cap the run was judged against.
    pub max_travel: f64,
    pub steps: u32,
    pub replans: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub log: Option<Vec<StepLogEntry>>,
}

/// Planning inputs shared by every agent in one scene.
pub struct SceneContext<'a> {
    pub scene: &'a Scene,
    /// Truth map dilated by the planning radius; defines shortest paths.
    pub truth_plan: GridMap,
    /// Floor plan dilated by the planning radius; what Loc-A* plans on.
    pub floor_plan: GridMap,
    pub plan_patch: Option<Arc<[f64]>>,
}

impl<'a> SceneContext<'a> {
    pub fn new(scene: &'a Scene, sim: &SimConfig, plan_side: Option<usize>) -> Self {
        let r = sim.planning_radius(scene.floor_plan.resolution());
        Self {
            scene,
            truth_plan: scene.truth_map.inflate(r),
            floor_plan: scene.floor_plan.inflate(r),
            plan_patch: plan_side.map(|s| scene.floor_plan.occupancy_patch(s).into()),
        }
    }

    /// Length of the A* path on the dilated truth map.
    pub fn shortest(&self, start: WorldPoint, goal: WorldPoint) -> Result<f64, AgentError> {
        let infeasible = |reason: String| AgentError::Infeasible {
            scene: self.scene.id.clone(),
            reason,
        };
        let s = self
            .truth_plan
            .world_to_pixel(start)
            .map_err(|e| infeasible(e.to_string()))?;
        let g = self
            .truth_plan
            .world_to_pixel(goal)
            .map_err(|e| infeasible(e.to_string()))?;
        let path = astar(&self.truth_plan, s, g)
            .map_err(|e| infeasible(e.to_string()))?
            .ok_or_else(|| infeasible("goal unreachable from start".into()))?;
        let pts = path.to_world(&self.truth_plan).expect("path in bounds");
        Ok(start.distance(pts[0]) + path_length(&pts) + pts.last().unwrap().distance(goal))
    }
}

/// Nearest free cell to `p` within `radius`, ties broken by row-major index.
pub fn snap_to_free(grid: &GridMap, p: WorldPoint, radius: f64) -> Option<PixelCoord> {
    if let Ok(u) = grid.world_to_pixel(p) {
        if grid.is_free(u) {
            return Some(u);
        }
    }
    let (c0, r0) = grid.world_to_signed(WorldPoint::new(p.x - radius, p.y - radius));
    let (c1, r1) = grid.world_to_signed(WorldPoint::new(p.x + radius, p.y + radius));
    let mut best: Option<(f64, PixelCoord)> = None;
    for row in r0.max(0)..=r1.min(grid.height() as i64 - 1) {
        for col in c0.max(0)..=c1.min(grid.width() as i64 - 1) {
            let u = PixelCoord::new(col as usize, row as usize);
            if !grid.is_free(u) {
                continue;
            }
            let d = grid.pixel_to_world(u).expect("in bounds").distance(p);
            if d <= radius && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, u));
            }
        }
    }
    best.map(|(_, u)| u)
}

/// Splits a displacement into pieces no longer than `max_len`.
fn split(a: Action, max_len: f64) -> Vec<Action> {
    let n = (a.norm() / max_len).ceil().max(1.0) as usize;
    vec![a.scaled(1.0 / n as f64); n]
}

/// Actions that follow the A* path on the dilated floor plan from the
/// estimated position; `None` when no plan exists.
pub fn loc_astar_plan(floor_plan: &GridMap, est: &Pose, goal: WorldPoint, snap_radius: f64) -> Option<Vec<Action>> {
    let s = snap_to_free(floor_plan, est.position, snap_radius)?;
    let g = snap_to_free(floor_plan, goal, snap_radius)?;
    let path = astar(floor_plan, s, g).ok()??;
    let pts = path.to_world(floor_plan).ok()?;
    let step = floor_plan.resolution();
    let mut actions = split(pts[0] - est.position, step);
    if actions.len() == 1 && actions[0].norm() == 0.0 {
        actions.clear();
    }
    actions.extend(pts.windows(2).map(|w| w[1] - w[0]));
    Some(actions)
}

struct Runner<'a> {
    ctx: &'a SceneContext<'a>,
    sim: &'a SimConfig,
    cfg: &'a AgentConfig,
    state: AgentState,
    goal: WorldPoint,
    history: Vec<Vec<f64>>,
    keep: usize,
    log: Option<Vec<StepLogEntry>>,
}

enum ChunkEnd {
    Continue,
    Collided,
    Done,
}

impl Runner<'_> {
    fn done(&self) -> bool {
        self.state.pose.position.distance(self.goal) <= self.cfg.stop_radius
            || self.state.traveled > self.sim.max_travel
    }

    fn push_obs(&mut self) {
        let o = observe(&self.state.pose, &self.ctx.scene.truth_map, self.sim).rays;
        self.history.push(o);
        if self.history.len() > self.keep {
            self.history.remove(0);
        }
    }

    fn execute(&mut self, actions: &[Action]) -> ChunkEnd {
        for (i, &a) in actions.iter().enumerate() {
            let (s, collided) = step(&self.state, a, &self.ctx.scene.truth_map, self.sim);
            self.state = if collided { recover(&s) } else { s };
            if let Some(log) = &mut self.log {
                log.push(StepLogEntry {
                    step: self.state.step_count,
                    x: self.state.pose.position.x,
                    y: self.state.pose.position.y,
                    theta: self.state.pose.theta,
                    dx: a.dx,
                    dy: a.dy,
                    collided,
                    replan: i == 0,
                });
            }
            self.push_obs();
            if collided {
                return ChunkEnd::Collided;
            }
            if self.done() {
                return ChunkEnd::Done;
            }
        }
        ChunkEnd::Continue
    }
}

/// Runs one navigation episode; `seed` drives localization noise, policy
/// sampling and the random walk.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    spec: &AgentSpec,
    policy: Option<&Policy>,
    ctx: &SceneContext,
    start: Pose,
    goal: WorldPoint,
    sim: &SimConfig,
    cfg: &AgentConfig,
    seed: u64,
    keep_log: bool,
) -> Result<EvalRecord, AgentError> {
    let shortest = ctx.shortest(start.position, goal)?;
    if let Some(v) = spec.needs_policy() {
        let p = policy.ok_or_else(|| AgentError::MissingPolicy(spec.name.clone()))?;
        if p.variant != v {
            return Err(AgentError::VariantMismatch {
                kind: spec.kind,
                found: p.variant,
            });
        }
    }
    let policy = policy.filter(|_| spec.needs_policy().is_some());
    let plan_patch = match (policy, &ctx.plan_patch) {
        (Some(p), Some(patch)) if patch.len() == p.config.plan_side * p.config.plan_side => Some(patch.clone()),
        (Some(p), _) => Some(ctx.scene.floor_plan.occupancy_patch(p.config.plan_side).into()),
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = Runner {
        ctx,
        sim,
        cfg,
        state: AgentState::new(start),
        goal,
        history: Vec::new(),
        keep: policy.map_or(1, |p| p.config.context_len + 1),
        log: keep_log.then(Vec::new),
    };
    run.push_obs();
    let mut replans = 0u32;
    while !run.done() && (replans as usize) < cfg.replan_budget {
        replans += 1;
        let before = run.state.pose.position;
        let chunk: Option<Vec<Action>> = match spec.kind {
            AgentKind::LocAstar => {
                let est = spec.localizer.estimate(&run.state.pose, &mut rng);
                loc_astar_plan(&ctx.floor_plan, &est, goal, cfg.snap_radius)
                    .map(|a| a.into_iter().take(cfg.chunk).collect())
            }
            AgentKind::RandomWalk => {
                let h: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                Some(vec![Action::new(h.cos(), h.sin()).scaled(cfg.random_step); cfg.chunk])
            }
            AgentKind::FloDiffLoc | AgentKind::FloDiffNaive => {
                let p = policy.expect("checked above");
                let pose =
                    (spec.kind == AgentKind::FloDiffLoc).then(|| spec.localizer.estimate(&run.state.pose, &mut rng));
                let global = plan_patch.as_ref().expect("policy agents have a patch");
                let raster = p.config.plan_raster(&ctx.scene.floor_plan, global, pose.as_ref());
                let input = ContextInput::with_history(
                    &run.history,
                    p.config.context_len,
                    raster,
                    PlanFrame::of(&ctx.scene.floor_plan),
                    goal,
                    pose,
                );
                Some(
                    p.act(&input, spec.mask_floorplan, &mut rng)?
                        .world_actions(run.state.pose.theta),
                )
            }
        };
        // no plan: the step budget is still consumed
        let Some(chunk) = chunk else { continue };
        match run.execute(&chunk) {
            ChunkEnd::Done => break,
            ChunkEnd::Collided => continue,
            ChunkEnd::Continue => {
                if run.state.pose.position.distance(before) < cfg.idle_threshold {
                    break;
                }
            }
        }
    }
    Ok(EvalRecord {
        method: spec.name.clone(),
        scene_id: ctx.scene.id.clone(),
        pair_index: 0,
        final_distance: run.state.pose.position.distance(goal),
        collisions: run.state.collision_count,
        traveled: run.state.traveled,
        shortest,
        max_travel: sim.max_travel,
        steps: run.state.step_count,
        replans,
        log: run.log,
    })
}

pub fn write_step_log(entries: &[StepLogEntry], path: &Path) -> Result<(), AgentError> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_step_log(path: &Path) -> Result<Vec<StepLogEntry>, AgentError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| std::io::Error::other(format!("{}:{}: {e}", path.display(), i + 1)).into())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{EpisodeParams, EpisodeSampler};
    use crate::floorgrid::{synth_scene, Cell, SceneParams, SizeClass};

    fn room(w: usize, h: usize) -> GridMap {
        let mut m = GridMap::new(w, h, 0.1, WorldPoint::default(), Cell::Free).unwrap();
        for c in 0..w {
            m.set(PixelCoord::new(c, 0), Cell::Occupied);
            m.set(PixelCoord::new(c, h - 1), Cell::Occupied);
        }
        for r in 0..h {
            m.set(PixelCoord::new(0, r), Cell::Occupied);
            m.set(PixelCoord::new(w - 1, r), Cell::Occupied);
        }
        m
    }

    fn gt(kind: AgentKind) -> AgentSpec {
        AgentSpec::new(kind.to_string(), kind, Localizer::GroundTruth)
    }

    #[test]
    fn astar_agent_reaches_goal_in_empty_room() {
        let m = room(60, 40);
        let scene = Scene::new("empty", SizeClass::Small, m.clone(), m).unwrap();
        let sim = SimConfig::default();
        let ctx = SceneContext::new(&scene, &sim, None);
        let start = Pose::new(0.55, 0.55, 0.0);
        let goal = WorldPoint::new(5.25, 3.35);
        let r = run_episode(
            &gt(AgentKind::LocAstar),
            None,
            &ctx,
            start,
            goal,
            &sim,
            &AgentConfig::default(),
            1,
            true,
        )
        .unwrap();
        assert!(r.final_distance <= 0.25, "{r:?}");
        assert_eq!(r.collisions, 0);
        assert!(r.traveled <= 1.05 * r.shortest);
        // with a zero stop radius the executed path ends exactly on the goal cell
        let exact = AgentConfig {
            stop_radius: 0.0,
            ..AgentConfig::default()
        };
        let r = run_episode(
            &gt(AgentKind::LocAstar),
            None,
            &ctx,
            start,
            goal,
            &sim,
            &exact,
            1,
            false,
        )
        .unwrap();
        assert!(r.final_distance < 1e-9, "{}", r.final_distance);
        assert!((r.traveled - r.shortest).abs() < 1e-9);
    }

    #[test]
    fn furniture_in_the_corridor_causes_collisions() {
        // corridor 1.2 m wide; a box the floor plan does not show blocks it
        let plan = room(80, 14);
        let mut truth = plan.clone();
        for c in 38..44 {
            for r in 1..13 {
                truth.set(PixelCoord::new(c, r), Cell::Occupied);
            }
        }
        let truth_scene = Scene::new("corridor", SizeClass::Small, plan.clone(), truth).unwrap();
        let sim = SimConfig::default();
        let ctx = SceneContext::new(&truth_scene, &sim, None);
        // the truth map is disconnected, so judge against the plan-only path
        assert!(ctx
            .shortest(WorldPoint::new(0.55, 0.65), WorldPoint::new(7.45, 0.65))
            .is_err());
        let start = Pose::new(0.55, 0.65, 0.0);
        let goal = WorldPoint::new(3.15, 0.65);
        let free_scene = Scene::new("corridor", SizeClass::Small, plan.clone(), plan).unwrap();
        let free_ctx = SceneContext::new(&free_scene, &sim, None);
        let mixed = SceneContext {
            scene: &truth_scene,
            truth_plan: free_ctx.truth_plan.clone(),
            floor_plan: free_ctx.floor_plan.clone(),
            plan_patch: None,
        };
        let far_goal = WorldPoint::new(7.45, 0.65);
        let r = run_episode(
            &gt(AgentKind::LocAstar),
            None,
            &mixed,
            start,
            far_goal,
            &sim,
            &AgentConfig::default(),
            1,
            true,
        )
        .unwrap();
        assert!(r.collisions > 0);
        let log = r.log.unwrap();
        assert!(log.iter().any(|e| e.collided));
        // every collision is followed by a freshly planned chunk
        for w in log.windows(2) {
            if w[0].collided {
                assert!(w[1].replan);
            }
        }
        let ok = run_episode(
            &gt(AgentKind::LocAstar),
            None,
            &mixed,
            start,
            goal,
            &sim,
            &AgentConfig::default(),
            1,
            false,
        )
        .unwrap();
        assert_eq!(ok.collisions, 0);
    }

    #[test]
    fn snapping_recovers_from_bad_estimates() {
        let mut m = room(40, 40);
        for c in 10..20 {
            for r in 10..20 {
                m.set(PixelCoord::new(c, r), Cell::Occupied);
            }
        }
        // estimate inside the block, 0.45 m from its free edge
        let p = WorldPoint::new(1.5, 1.5);
        let u = snap_to_free(&m, p, 1.0).unwrap();
        assert!(m.is_free(u));
        let d = m.pixel_to_world(u).unwrap().distance(p);
        assert!((d - 0.55f64.hypot(0.05)).abs() < 1e-9, "{d}");
        assert_eq!(snap_to_free(&m, p, 0.3), None);
        let plan = loc_astar_plan(&m, &Pose::new(1.5, 1.5, 0.0), WorldPoint::new(3.05, 3.05), 1.0).unwrap();
        assert!(plan.iter().all(|a| a.norm() <= 0.1 * std::f64::consts::SQRT_2 + 1e-12));
        assert_eq!(
            loc_astar_plan(&m, &Pose::new(1.5, 1.5, 0.0), WorldPoint::new(3.05, 3.05), 0.3),
            None
        );
    }

    #[test]
    fn random_walk_terminates_and_is_deterministic() {
        let scene = synth_scene(4, SizeClass::Small, 0.1, &SceneParams::default()).unwrap();
        let sim = SimConfig::default();
        let ctx = SceneContext::new(&scene, &sim, None);
        let sampler = EpisodeSampler::new(&scene, &EpisodeParams::default());
        let e = sampler.sample(3).unwrap();
        let spec = gt(AgentKind::RandomWalk);
        let a = run_episode(
            &spec,
            None,
            &ctx,
            e.start,
            e.goal,
            &sim,
            &AgentConfig::default(),
            9,
            true,
        )
        .unwrap();
        let b = run_episode(
            &spec,
            None,
            &ctx,
            e.start,
            e.goal,
            &sim,
            &AgentConfig::default(),
            9,
            true,
        )
        .unwrap();
        assert_eq!(a, b);
        assert!(a.traveled <= sim.max_travel + 0.2);
        assert!(a.replans as usize <= AgentConfig::default().replan_budget);
    }

    #[test]
    fn policy_agents_require_a_matching_policy() {
        let m = room(40, 40);
        let scene = Scene::new("s", SizeClass::Small, m.clone(), m).unwrap();
        let sim = SimConfig::default();
        let ctx = SceneContext::new(&scene, &sim, None);
        let spec = gt(AgentKind::FloDiffLoc);
        let r = run_episode(
            &spec,
            None,
            &ctx,
            Pose::new(0.55, 0.55, 0.0),
            WorldPoint::new(3.05, 3.05),
            &sim,
            &AgentConfig::default(),
            1,
            false,
        );
        assert!(matches!(r, Err(AgentError::MissingPolicy(_))));
        let p = Policy::new(Variant::Naive, Default::default(), Default::default(), 0).unwrap();
        let r = run_episode(
            &spec,
            Some(&p),
            &ctx,
            Pose::new(0.55, 0.55, 0.0),
            WorldPoint::new(3.05, 3.05),
            &sim,
            &AgentConfig::default(),
            1,
            false,
        );
        assert!(matches!(r, Err(AgentError::VariantMismatch { .. })));
    }

    #[test]
    fn step_log_round_trip() {
        let entries = vec![
            StepLogEntry {
                step: 1,
                x: 0.1,
                y: 0.2,
                theta: 0.3,
                dx: 0.1,
                dy: 0.0,
                collided: false,
                replan: true,
            },
            StepLogEntry {
                step: 2,
                x: 0.2,
                y: 0.2,
                theta: -0.5,
                dx: 0.1,
                dy: 0.0,
                collided: true,
                replan: false,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        write_step_log(&entries, &p).unwrap();
        assert_eq!(read_step_log(&p).unwrap(), entries);
    }
}
