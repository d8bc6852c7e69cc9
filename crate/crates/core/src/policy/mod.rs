//! Floor-plan-conditioned diffusion policy.
//!
//! Each observation in the history becomes one token through the shared
//! encoder ψ, the floor-plan raster becomes one token through φ, and a pre-LN
//! transformer fuses them; the context vector `c_t` is the final plan token.
//! The condition for the noise predictor and the distance head is `c_t`
//! plus pose and goal features. The Loc variant takes the pose as input; the
//! Naive variant regresses it with the pose head `f_p` and conditions on that
//! estimate.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use train::{build_samples, train, EpisodeView, TrainConfig, TrainData, TrainLog};

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{self, square_cosine_schedule, EpsNet, EpsNetShape, NoiseSchedule};
use crate::episodes::Episode;
use crate::floorgrid::GridMap;
use crate::geometry::{Action, Pose, WorldPoint};
use crate::nn::{Gradients, Graph, LayerNorm, Linear, Mlp2, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy configuration: {0}")]
    Config(String),
    #[error("input shape: {0}")]
    Shape(String),
    #[error("non-finite loss {0}")]
    NonFinite(f64),
    #[error("empty training set")]
    EmptyDataset,
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Pose regressed from the context by `f_p`.
    Naive,
    /// Pose supplied by a localizer.
    Loc,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Naive => "naive",
            Variant::Loc => "loc",
        })
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "naive" => Ok(Variant::Naive),
            "loc" => Ok(Variant::Loc),
            _ => Err(format!("unknown variant {s:?} (expected naive or loc)")),
        }
    }
}

/// How the floor plan is rasterized for φ.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanView {
    /// The whole plan, downsampled.
    #[default]
    Global,
    /// A crop centered on the pose estimate and aligned with its heading;
    /// the Naive variant has no estimate and keeps the whole plan.
    Local,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Rays per observation; must match the simulator.
    pub rays: usize,
    /// Context length `l`; the history holds `l + 1` observations.
    pub context_len: usize,
    /// Side of the square floor-plan raster fed to φ.
    pub plan_side: usize,
    pub ctx_dim: usize,
    pub enc_hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub positional: bool,
    /// Prediction horizon `H_p`.
    pub horizon: usize,
    /// Executed prefix `H_a`.
    pub exec_horizon: usize,
    pub diffusion_steps: usize,
    pub eps_width: usize,
    pub eps_blocks: usize,
    pub step_embed: usize,
    pub head_hidden: usize,
    /// Bound on the clean estimate during sampling, in normalized action
    /// units; 0 disables clamping.
    pub clip_sample: f64,
    pub plan_view: PlanView,
    /// Side of the local crop in meters.
    pub local_extent: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            rays: 32,
            context_len: 3,
            plan_side: 32,
            ctx_dim: 64,
            enc_hidden: 64,
            layers: 4,
            heads: 4,
            positional: false,
            horizon: 32,
            exec_horizon: 16,
            diffusion_steps: 10,
            eps_width: 256,
            eps_blocks: 3,
            step_embed: 32,
            head_hidden: 64,
            clip_sample: 1.0,
            plan_view: PlanView::Global,
            local_extent: 6.4,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::Config(m.to_string()));
        if [
            self.rays,
            self.plan_side,
            self.ctx_dim,
            self.enc_hidden,
            self.heads,
            self.horizon,
        ]
        .contains(&0)
            || [
                self.exec_horizon,
                self.diffusion_steps,
                self.eps_width,
                self.head_hidden,
            ]
            .contains(&0)
        {
            return bad("all sizes must be positive");
        }
        if !self.ctx_dim.is_multiple_of(self.heads) {
            return bad("ctx_dim must be divisible by heads");
        }
        if self.exec_horizon > self.horizon {
            return bad("exec_horizon must not exceed horizon");
        }
        if self.clip_sample.is_nan() || self.clip_sample < 0.0 {
            return bad("clip_sample must be nonnegative");
        }
        if !self.step_embed.is_multiple_of(2) {
            return bad("step_embed must be even");
        }
        if !(self.local_extent > 0.0 && self.local_extent.is_finite()) {
            return bad("local_extent must be positive");
        }
        Ok(())
    }

    /// Floor-plan raster for a decision taken at `pose`: a fresh body-frame
    /// crop of `plan` for the local view, else the whole-plan `global`.
    /// Without a pose (Naive) the local view falls back to the whole plan.
    pub fn plan_raster(&self, plan: &GridMap, global: &Arc<[f64]>, pose: Option<&Pose>) -> Arc<[f64]> {
        match (self.plan_view, pose) {
            (PlanView::Local, Some(p)) => plan.body_patch(p, self.plan_side, self.local_extent).into(),
            _ => Arc::clone(global),
        }
    }

    pub fn tokens(&self) -> usize {
        self.context_len + 2
    }

    /// Flattened action-sequence width `2·H_p`.
    pub fn action_dim(&self) -> usize {
        2 * self.horizon
    }

    pub fn cond_dim(&self) -> usize {
        self.ctx_dim + GOAL_FEATURES
    }
}

/// Pose (4), goal (2), goal minus pose in world (2) and agent (2) frames,
/// pose and goal positions in the floor-plan frame (2 + 2).
pub const GOAL_FEATURES: usize = 14;

/// World rectangle covered by the floor-plan raster.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanFrame {
    pub min: WorldPoint,
    pub max: WorldPoint,
}

impl PlanFrame {
    pub fn of(grid: &crate::floorgrid::GridMap) -> Self {
        let (min, max) = grid.bounds();
        Self { min, max }
    }

    /// Maps `p` into `[-1, 1]²` over the raster, matching its stretching.
    pub fn local(&self, p: WorldPoint) -> [f64; 2] {
        [
            2.0 * (p.x - self.min.x) / (self.max.x - self.min.x) - 1.0,
            2.0 * (p.y - self.min.y) / (self.max.y - self.min.y) - 1.0,
        ]
    }

    /// Per-axis `(scale, shift)` taking normalized positions to the plan frame.
    fn normalized_to_plan(&self, norm: &Normalizer) -> [(f64, f64); 2] {
        let axis = |lo: f64, hi: f64, c: f64| {
            let w = hi - lo;
            (2.0 * norm.pos_scale / w, 2.0 * (c - lo) / w - 1.0)
        };
        [
            axis(self.min.x, self.max.x, norm.pos_center[0]),
            axis(self.min.y, self.max.y, norm.pos_center[1]),
        ]
    }
}

/// Dataset-derived scaling constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    /// Largest action length; maps every component into `[-1, 1]` in any frame.
    pub action_scale: f64,
    pub pos_center: [f64; 2],
    pub pos_scale: f64,
    /// Largest demonstration path length.
    pub dist_scale: f64,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            action_scale: 0.1,
            pos_center: [0.0, 0.0],
            pos_scale: 1.0,
            dist_scale: 1.0,
        }
    }
}

impl Normalizer {
    pub fn from_episodes(episodes: &[Episode]) -> Result<Self, PolicyError> {
        if episodes.is_empty() {
            return Err(PolicyError::EmptyDataset);
        }
        let mut amax: f64 = 0.0;
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        let mut dmax: f64 = 0.0;
        for e in episodes {
            for a in &e.actions {
                amax = amax.max(a.norm());
            }
            for p in e.trajectory.positions().chain([e.goal]) {
                x0 = x0.min(p.x);
                x1 = x1.max(p.x);
                y0 = y0.min(p.y);
                y1 = y1.max(p.y);
            }
            dmax = dmax.max(e.shortest_length);
        }
        Ok(Self {
            action_scale: if amax > 0.0 { amax } else { 1.0 },
            pos_center: [(x0 + x1) / 2.0, (y0 + y1) / 2.0],
            pos_scale: ((x1 - x0).max(y1 - y0) / 2.0).max(1e-6),
            dist_scale: if dmax > 0.0 { dmax } else { 1.0 },
        })
    }

    pub fn normalize_action(&self, a: Action) -> [f64; 2] {
        [a.dx / self.action_scale, a.dy / self.action_scale]
    }

    pub fn denormalize_action(&self, v: [f64; 2]) -> Action {
        Action::new(v[0] * self.action_scale, v[1] * self.action_scale)
    }

    pub fn position(&self, p: WorldPoint) -> [f64; 2] {
        [
            (p.x - self.pos_center[0]) / self.pos_scale,
            (p.y - self.pos_center[1]) / self.pos_scale,
        ]
    }

    pub fn world(&self, v: [f64; 2]) -> WorldPoint {
        WorldPoint::new(
            v[0] * self.pos_scale + self.pos_center[0],
            v[1] * self.pos_scale + self.pos_center[1],
        )
    }

    /// `(x, y, cos θ, sin θ)` with normalized position.
    pub fn pose_features(&self, p: &Pose) -> [f64; 4] {
        let [x, y] = self.position(p.position);
        [x, y, p.theta.cos(), p.theta.sin()]
    }
}

/// Everything the policy sees at one decision point.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextInput {
    /// `l + 1` normalized ray vectors, oldest first.
    pub obs_history: Vec<Vec<f64>>,
    /// Flattened `plan_side²` occupancy raster of the floor plan.
    pub floorplan: Arc<[f64]>,
    pub frame: PlanFrame,
    pub goal: WorldPoint,
    pub pose: Option<Pose>,
}

impl ContextInput {
    /// Builds a history of length `l + 1` from the most recent observations,
    /// repeating the oldest one when fewer are available.
    pub fn with_history(
        recent: &[Vec<f64>],
        context_len: usize,
        floorplan: Arc<[f64]>,
        frame: PlanFrame,
        goal: WorldPoint,
        pose: Option<Pose>,
    ) -> Self {
        assert!(!recent.is_empty(), "history needs at least one observation");
        let need = context_len + 1;
        let tail = &recent[recent.len().saturating_sub(need)..];
        let mut obs_history = vec![tail[0].clone(); need - tail.len()];
        obs_history.extend(tail.iter().cloned());
        Self {
            obs_history,
            floorplan,
            frame,
            goal,
            pose,
        }
    }
}

/// One supervised example with its diffusion draw fixed in advance.
#[derive(Clone, Debug)]
pub struct Sample {
    pub input: ContextInput,
    /// Normalized clean action sequence in the body frame at the segment
    /// start, flattened (`1 × 2H_p`).
    pub actions: Tensor,
    /// Normalized path distance to the goal.
    pub dist: f64,
    pub pose_target: [f64; 4],
    pub k: usize,
    pub eps: Tensor,
}

/// Per-term loss values; `total` includes the λ weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub noise: f64,
    pub dist: f64,
    pub pose: f64,
}

/// λ weights of the auxiliary terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lambdas {
    pub dist: f64,
    pub pose: f64,
}

struct AttnLayer {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    ff: Mlp2,
}

struct Net {
    psi: Mlp2,
    phi: Mlp2,
    pos_embed: Option<ParamId>,
    layers: Vec<AttnLayer>,
    final_norm: LayerNorm,
    eps: EpsNet,
    f_d: Mlp2,
    f_p: Option<Mlp2>,
}

pub struct Policy {
    pub variant: Variant,
    pub config: PolicyConfig,
    pub norm: Normalizer,
    pub store: ParamStore,
    pub schedule: NoiseSchedule,
    net: Net,
}

/// Forward values of one batch.
pub struct BatchOutputs {
    pub eps_hat: Tensor,
    pub d_hat: Tensor,
    pub pose_hat: Option<Tensor>,
}

/// Result of one planning call. Actions are in the agent's body frame at
/// the planning instant (x forward, y left).
#[derive(Clone, Debug, PartialEq)]
pub struct PlanOutput {
    /// First `H_a` denormalized actions.
    pub actions: Vec<Action>,
    /// Full `H_p` denormalized prediction.
    pub full: Vec<Action>,
    pub d_hat: f64,
    /// Pose estimate of the Naive variant, world frame.
    pub pose_hat: Option<Pose>,
}

impl PlanOutput {
    /// The executed actions as world displacements for an agent facing `heading`.
    pub fn world_actions(&self, heading: f64) -> Vec<Action> {
        self.actions.iter().map(|a| a.rotated(heading)).collect()
    }
}

impl Policy {
    pub fn new(variant: Variant, config: PolicyConfig, norm: Normalizer, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let schedule =
            square_cosine_schedule(config.diffusion_steps).map_err(|e| PolicyError::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let c = config.ctx_dim;
        let psi = Mlp2::new(&mut s, "psi", config.rays, config.enc_hidden, c, &mut rng);
        let phi = Mlp2::new(
            &mut s,
            "phi",
            config.plan_side * config.plan_side,
            config.enc_hidden,
            c,
            &mut rng,
        );
        let pos_embed = config.positional.then(|| {
            s.add(
                "pos_embed",
                diffusion::gaussian(config.tokens(), c, &mut rng).map(|v| 0.02 * v),
            )
        });
        let layers = (0..config.layers)
            .map(|i| AttnLayer {
                ln1: LayerNorm::new(&mut s, &format!("fuse{i}.ln1"), c),
                wq: Linear::new(&mut s, &format!("fuse{i}.q"), c, c, &mut rng),
                wk: Linear::new(&mut s, &format!("fuse{i}.k"), c, c, &mut rng),
                wv: Linear::new(&mut s, &format!("fuse{i}.v"), c, c, &mut rng),
                wo: Linear::new(&mut s, &format!("fuse{i}.o"), c, c, &mut rng),
                ln2: LayerNorm::new(&mut s, &format!("fuse{i}.ln2"), c),
                ff: Mlp2::new(&mut s, &format!("fuse{i}.ff"), c, 2 * c, c, &mut rng),
            })
            .collect();
        let final_norm = LayerNorm::new(&mut s, "fuse.norm", c);
        let eps = EpsNet::new(
            &mut s,
            "eps",
            EpsNetShape {
                dim: config.action_dim(),
                cond_dim: config.cond_dim(),
                width: config.eps_width,
                blocks: config.eps_blocks,
                step_embed: config.step_embed,
            },
            &mut rng,
        );
        let f_d = Mlp2::new(&mut s, "f_d", config.cond_dim(), config.head_hidden, 1, &mut rng);
        let f_p = (variant == Variant::Naive).then(|| Mlp2::new(&mut s, "f_p", c, config.head_hidden, 4, &mut rng));
        Ok(Self {
            variant,
            config,
            norm,
            store: s,
            schedule,
            net: Net {
                psi,
                phi,
                pos_embed,
                layers,
                final_norm,
                eps,
                f_d,
                f_p,
            },
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn lambdas(&self, cfg: &TrainConfig) -> Lambdas {
        match self.variant {
            Variant::Naive => Lambdas {
                dist: cfg.lambda1,
                pose: cfg.lambda2,
            },
            Variant::Loc => Lambdas {
                dist: cfg.lambda3,
                pose: 0.0,
            },
        }
    }

    fn check_input(&self, x: &ContextInput) -> Result<(), PolicyError> {
        let c = &self.config;
        if x.obs_history.len() != c.context_len + 1 {
            return Err(PolicyError::Shape(format!(
                "history has {} observations, expected {}",
                x.obs_history.len(),
                c.context_len + 1
            )));
        }
        if let Some(o) = x.obs_history.iter().find(|o| o.len() != c.rays) {
            return Err(PolicyError::Shape(format!(
                "observation has {} rays, expected {}",
                o.len(),
                c.rays
            )));
        }
        if x.floorplan.len() != c.plan_side * c.plan_side {
            return Err(PolicyError::Shape(format!(
                "floor plan has {} entries, expected {}",
                x.floorplan.len(),
                c.plan_side * c.plan_side
            )));
        }
        if self.variant == Variant::Loc && x.pose.is_none() {
            return Err(PolicyError::Shape("Loc variant needs a pose".into()));
        }
        if !(x.frame.max.x > x.frame.min.x && x.frame.max.y > x.frame.min.y) {
            return Err(PolicyError::Shape("floor-plan frame has no area".into()));
        }
        Ok(())
    }

    /// Context vectors `c_t`, one row per input. `mask_plan` replaces the
    /// floor-plan token with zeros.
    fn encode(&self, g: &mut Graph, inputs: &[&ContextInput], mask_plan: bool) -> Var {
        let cfg = &self.config;
        let (b, h, t) = (inputs.len(), cfg.context_len + 1, cfg.tokens());
        let mut obs = Vec::with_capacity(b * h * cfg.rays);
        for x in inputs {
            for o in &x.obs_history {
                obs.extend_from_slice(o);
            }
        }
        let obs = g.constant(Tensor::from_vec(b * h, cfg.rays, obs));
        let obs_tok = self.net.psi.forward(g, obs);
        let plan_tok = if mask_plan {
            g.constant(Tensor::zeros(b, cfg.ctx_dim))
        } else {
            let mut plan = Vec::with_capacity(b * cfg.plan_side * cfg.plan_side);
            for x in inputs {
                plan.extend_from_slice(&x.floorplan);
            }
            let plan = g.constant(Tensor::from_vec(b, cfg.plan_side * cfg.plan_side, plan));
            self.net.phi.forward(g, plan)
        };
        let stacked = g.concat_rows(&[obs_tok, plan_tok]);
        let order = (0..b)
            .flat_map(|i| (0..h).map(move |j| i * h + j).chain([b * h + i]))
            .collect();
        let mut x = g.select_rows(stacked, order);
        if let Some(pe) = self.net.pos_embed {
            let pe = g.param(pe);
            let pe = g.repeat_rows(pe, b);
            x = g.add(x, pe);
        }
        for l in &self.net.layers {
            let n = l.ln1.forward(g, x);
            let q = l.wq.forward(g, n);
            let k = l.wk.forward(g, n);
            let v = l.wv.forward(g, n);
            let a = g.attention(q, k, v, b, t, cfg.heads);
            let a = l.wo.forward(g, a);
            x = g.add(x, a);
            let n = l.ln2.forward(g, x);
            let f = l.ff.forward(g, n);
            x = g.add(x, f);
        }
        let x = self.net.final_norm.forward(g, x);
        g.select_rows(x, (0..b).map(|i| i * t + t - 1).collect())
    }

    /// Condition rows `[c_t, pose, goal, goal − pose, goal − pose in the
    /// agent frame]` and the pose-head output when it was used.
    fn condition(&self, g: &mut Graph, ctx: Var, inputs: &[&ContextInput]) -> (Var, Option<Var>) {
        let b = inputs.len();
        let pose_hat = self.net.f_p.as_ref().map(|fp| {
            let raw = fp.forward(g, ctx);
            let xy = g.slice_cols(raw, 0, 2);
            let cs = g.slice_cols(raw, 2, 2);
            let cs = g.unit_pairs(cs);
            g.concat_cols(&[xy, cs])
        });
        let given = inputs.iter().all(|x| x.pose.is_some());
        let pose = if given {
            let data = inputs
                .iter()
                .flat_map(|x| self.norm.pose_features(&x.pose.expect("checked")))
                .collect();
            g.constant(Tensor::from_vec(b, 4, data))
        } else {
            pose_hat.expect("inputs without pose need the pose head")
        };
        let goal = g.constant(Tensor::from_vec(
            b,
            2,
            inputs.iter().flat_map(|x| self.norm.position(x.goal)).collect(),
        ));
        let xy = g.slice_cols(pose, 0, 2);
        let rel = g.sub(goal, xy);
        let (c, s) = (g.slice_cols(pose, 2, 1), g.slice_cols(pose, 3, 1));
        let (rx, ry) = (g.slice_cols(rel, 0, 1), g.slice_cols(rel, 1, 1));
        let (crx, sry) = (g.mul(c, rx), g.mul(s, ry));
        let (cry, srx) = (g.mul(c, ry), g.mul(s, rx));
        let ax = g.add(crx, sry);
        let ay = g.sub(cry, srx);
        let maps: Vec<[(f64, f64); 2]> = inputs.iter().map(|x| x.frame.normalized_to_plan(&self.norm)).collect();
        let scale = g.constant(Tensor::from_vec(
            b,
            2,
            maps.iter().flat_map(|m| [m[0].0, m[1].0]).collect(),
        ));
        let shift = g.constant(Tensor::from_vec(
            b,
            2,
            maps.iter().flat_map(|m| [m[0].1, m[1].1]).collect(),
        ));
        let scaled = g.mul(xy, scale);
        let pose_local = g.add(scaled, shift);
        let goal_local = g.constant(Tensor::from_vec(
            b,
            2,
            inputs.iter().flat_map(|x| x.frame.local(x.goal)).collect(),
        ));
        (
            g.concat_cols(&[ctx, pose, goal, rel, ax, ay, pose_local, goal_local]),
            pose_hat,
        )
    }

    fn dist_head(&self, g: &mut Graph, cond: Var) -> Var {
        let d = self.net.f_d.forward(g, cond);
        g.softplus(d)
    }

    /// Builds the loss graph; returns the total node and the output nodes.
    fn loss_graph(&self, g: &mut Graph, batch: &[Sample], lam: Lambdas, weight: f64) -> (Var, [Var; 3], Option<Var>) {
        let inputs: Vec<&ContextInput> = batch.iter().map(|s| &s.input).collect();
        let dim = self.config.action_dim();
        let b = batch.len();
        let ctx = self.encode(g, &inputs, false);
        let (cond, pose_hat) = self.condition(g, ctx, &inputs);
        let d_hat = self.dist_head(g, cond);
        let mut noisy = Tensor::zeros(b, dim);
        let mut eps = Tensor::zeros(b, dim);
        for (i, s) in batch.iter().enumerate() {
            let ak = diffusion::forward_noise(&s.actions, s.k, &s.eps, &self.schedule).expect("valid k");
            noisy.data[i * dim..(i + 1) * dim].copy_from_slice(&ak.data);
            eps.data[i * dim..(i + 1) * dim].copy_from_slice(&s.eps.data);
        }
        let ks: Vec<usize> = batch.iter().map(|s| s.k).collect();
        let x = g.constant(noisy);
        let eps_hat = self.net.eps.forward(g, x, &ks, Some(cond));
        let l_noise = g.mse(eps_hat, eps);
        let l_dist = g.mse(d_hat, Tensor::from_vec(b, 1, batch.iter().map(|s| s.dist).collect()));
        let mut total = g.scale(l_dist, lam.dist);
        total = g.add(l_noise, total);
        let l_pose = pose_hat.map(|p| {
            let target = Tensor::from_vec(b, 4, batch.iter().flat_map(|s| s.pose_target).collect());
            g.mse(p, target)
        });
        if let Some(lp) = l_pose {
            let w = g.scale(lp, lam.pose);
            total = g.add(total, w);
        }
        let total = g.scale(total, weight);
        (total, [l_noise, l_dist, d_hat], l_pose)
    }

    fn parts_of(&self, g: &Graph, total: Var, nodes: [Var; 3], pose: Option<Var>) -> LossParts {
        LossParts {
            total: g.value(total).data[0],
            noise: g.value(nodes[0]).data[0],
            dist: g.value(nodes[1]).data[0],
            pose: pose.map_or(0.0, |p| g.value(p).data[0]),
        }
    }

    pub fn loss(&self, batch: &[Sample], lam: Lambdas) -> LossParts {
        let mut g = Graph::new(&self.store);
        let (t, nodes, pose) = self.loss_graph(&mut g, batch, lam, 1.0);
        self.parts_of(&g, t, nodes, pose)
    }

    /// Loss and its analytic gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[Sample], lam: Lambdas) -> Result<(LossParts, Gradients), PolicyError> {
        self.weighted_loss_and_grad(batch, lam, 1.0)
    }

    pub(crate) fn weighted_loss_and_grad(
        &self,
        batch: &[Sample],
        lam: Lambdas,
        weight: f64,
    ) -> Result<(LossParts, Gradients), PolicyError> {
        let mut g = Graph::new(&self.store);
        let (t, nodes, pose) = self.loss_graph(&mut g, batch, lam, weight);
        let parts = self.parts_of(&g, t, nodes, pose);
        if !parts.total.is_finite() {
            return Err(PolicyError::NonFinite(parts.total));
        }
        Ok((parts, g.backward(t)))
    }

    /// Raw head outputs for a batch at the batch's diffusion draws.
    pub fn outputs(&self, batch: &[Sample]) -> BatchOutputs {
        let mut g = Graph::new(&self.store);
        let inputs: Vec<&ContextInput> = batch.iter().map(|s| &s.input).collect();
        let ctx = self.encode(&mut g, &inputs, false);
        let (cond, pose_hat) = self.condition(&mut g, ctx, &inputs);
        let d_hat = self.dist_head(&mut g, cond);
        let dim = self.config.action_dim();
        let mut noisy = Tensor::zeros(batch.len(), dim);
        for (i, s) in batch.iter().enumerate() {
            let ak = diffusion::forward_noise(&s.actions, s.k, &s.eps, &self.schedule).expect("valid k");
            noisy.data[i * dim..(i + 1) * dim].copy_from_slice(&ak.data);
        }
        let ks: Vec<usize> = batch.iter().map(|s| s.k).collect();
        let x = g.constant(noisy);
        let eps_hat = self.net.eps.forward(&mut g, x, &ks, Some(cond));
        BatchOutputs {
            eps_hat: g.value(eps_hat).clone(),
            d_hat: g.value(d_hat).clone(),
            pose_hat: pose_hat.map(|p| g.value(p).clone()),
        }
    }

    /// Context vector `c_t` for one input.
    pub fn encode_context(&self, input: &ContextInput) -> Result<Vec<f64>, PolicyError> {
        self.check_input(input)?;
        let mut g = Graph::new(&self.store);
        let ctx = self.encode(&mut g, &[input], false);
        Ok(g.value(ctx).data.clone())
    }

    /// Samples an action plan for one decision point.
    pub fn act(&self, input: &ContextInput, mask_plan: bool, rng: &mut impl Rng) -> Result<PlanOutput, PolicyError> {
        self.check_input(input)?;
        let (cond, d_hat, pose_hat) = {
            let mut g = Graph::new(&self.store);
            let ctx = self.encode(&mut g, &[input], mask_plan);
            let (cond, pose_hat) = self.condition(&mut g, ctx, &[input]);
            let d = self.dist_head(&mut g, cond);
            (
                g.value(cond).clone(),
                g.value(d).data[0] * self.norm.dist_scale,
                pose_hat.map(|p| g.value(p).data.clone()),
            )
        };
        let denoiser = |x: &Tensor, k: usize| {
            let mut g = Graph::new(&self.store);
            let xv = g.constant(x.clone());
            let c = g.constant(cond.clone());
            let y = self.net.eps.forward(&mut g, xv, &[k], Some(c));
            g.value(y).clone()
        };
        let clip = (self.config.clip_sample > 0.0).then_some(self.config.clip_sample);
        let a = diffusion::sample_clipped(&denoiser, 1, self.config.action_dim(), &self.schedule, clip, rng);
        let full: Vec<Action> = a
            .data
            .chunks(2)
            .map(|v| self.norm.denormalize_action([v[0], v[1]]))
            .collect();
        Ok(PlanOutput {
            actions: full[..self.config.exec_horizon].to_vec(),
            full,
            d_hat,
            pose_hat: pose_hat.map(|p| {
                let w = self.norm.world([p[0], p[1]]);
                Pose {
                    position: w,
                    theta: p[3].atan2(p[2]),
                }
            }),
        })
    }
}
