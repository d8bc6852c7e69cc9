//! Segment sampling and the optimization loop.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ContextInput, LossParts, Normalizer, PlanFrame, Policy, PolicyConfig, PolicyError, Sample, Variant};
use crate::diffusion::gaussian;
use crate::episodes::Episode;
use crate::floorgrid::{GridMap, Scene};
use crate::nn::{AdamW, Gradients, Tensor};
use crate::seeds::derive_seed;
use crate::simulator::{observe, SimConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Distance-head weight (Naive).
    pub lambda1: f64,
    /// Pose-head weight (Naive).
    pub lambda2: f64,
    /// Distance-head weight (Loc).
    pub lambda3: f64,
    /// Gradient steps per epoch; 0 means one pass over all segment starts.
    pub steps_per_epoch: usize,
    /// Samples per gradient chunk. Chunks are reduced in order, so results
    /// do not depend on the worker count.
    pub chunk: usize,
    pub workers: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs: 5,
            batch: 64,
            lambda1: 0.001,
            lambda2: 0.005,
            lambda3: 0.001,
            steps_per_epoch: 0,
            chunk: 8,
            workers: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.lr.is_nan() || self.lr <= 0.0 || self.batch == 0 || self.chunk == 0 || self.workers == 0 {
            return Err(PolicyError::Config(
                "lr, batch, chunk and workers must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One demonstration with its per-pose observations precomputed.
pub struct EpisodeView {
    pub episode: Episode,
    pub rays: Vec<Vec<f64>>,
    /// Whole-plan raster.
    pub floorplan: Arc<[f64]>,
    /// Floor plan the local view is cropped from.
    pub plan_map: Arc<GridMap>,
    pub frame: PlanFrame,
    /// Path length from the first pose to each pose.
    pub cumlen: Vec<f64>,
}

pub struct TrainData {
    pub views: Vec<EpisodeView>,
}

impl TrainData {
    pub fn new(episodes: &[Episode], scenes: &[Scene], sim: &SimConfig, plan_side: usize) -> Result<Self, PolicyError> {
        let by_id: HashMap<&str, &Scene> = scenes.iter().map(|s| (s.id.as_str(), s)).collect();
        let mut plans: HashMap<&str, (Arc<[f64]>, Arc<GridMap>)> = HashMap::new();
        let mut views = Vec::with_capacity(episodes.len());
        for e in episodes {
            let scene = by_id
                .get(e.scene_id.as_str())
                .ok_or_else(|| PolicyError::Config(format!("episode references unknown scene {}", e.scene_id)))?;
            if e.actions.is_empty() {
                continue;
            }
            let (plan, plan_map) = plans
                .entry(scene.id.as_str())
                .or_insert_with(|| {
                    (
                        scene.floor_plan.occupancy_patch(plan_side).into(),
                        Arc::new(scene.floor_plan.clone()),
                    )
                })
                .clone();
            let rays = e
                .trajectory
                .poses
                .iter()
                .map(|p| observe(p, &scene.truth_map, sim).rays)
                .collect();
            let mut cumlen = vec![0.0];
            for w in e.trajectory.poses.windows(2) {
                cumlen.push(cumlen.last().unwrap() + w[0].position.distance(w[1].position));
            }
            views.push(EpisodeView {
                episode: e.clone(),
                rays,
                floorplan: plan,
                plan_map,
                frame: PlanFrame::of(&scene.floor_plan),
                cumlen,
            });
        }
        if views.is_empty() {
            return Err(PolicyError::EmptyDataset);
        }
        Ok(Self { views })
    }

    pub fn total_steps(&self) -> usize {
        self.views.iter().map(|v| v.episode.actions.len()).sum()
    }
}

/// Draws `n` training samples: random episode, random segment start,
/// goal relabeled to a later trajectory point, fixed diffusion draw.
pub fn build_samples(
    data: &TrainData,
    n: usize,
    variant: Variant,
    cfg: &PolicyConfig,
    norm: &Normalizer,
    rng: &mut impl Rng,
) -> Vec<Sample> {
    let k_max = cfg.diffusion_steps;
    (0..n)
        .map(|_| {
            let v = &data.views[rng.random_range(0..data.views.len())];
            let e = &v.episode;
            let last = e.actions.len();
            let t = rng.random_range(0..last);
            let lo = t + cfg.exec_horizon;
            let j = if lo <= last { rng.random_range(lo..=last) } else { last };
            let goal = e.trajectory.poses[j].position;
            let mut actions = Tensor::zeros(1, cfg.action_dim());
            let heading = e.trajectory.poses[t].theta;
            for i in 0..cfg.horizon {
                // demonstration stops at the relabeled goal
                if t + i < j {
                    let a = norm.normalize_action(e.actions[t + i].rotated(-heading));
                    actions.data[2 * i] = a[0];
                    actions.data[2 * i + 1] = a[1];
                }
            }
            let obs_history = (0..=cfg.context_len)
                .map(|m| v.rays[(t + m).saturating_sub(cfg.context_len)].clone())
                .collect();
            let pose = e.trajectory.poses[t];
            let given = (variant == Variant::Loc).then_some(pose);
            let k = rng.random_range(1..=k_max);
            let eps = gaussian(1, cfg.action_dim(), rng);
            Sample {
                input: ContextInput {
                    obs_history,
                    floorplan: cfg.plan_raster(&v.plan_map, &v.floorplan, given.as_ref()),
                    frame: v.frame,
                    goal,
                    pose: given,
                },
                actions,
                dist: (v.cumlen[j] - v.cumlen[t]) / norm.dist_scale,
                pose_target: norm.pose_features(&pose),
                k,
                eps,
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<LossParts>,
    /// Mean total loss per epoch.
    pub epochs: Vec<f64>,
}

/// Batch loss and gradient, accumulated over fixed-size chunks.
pub(crate) fn chunked_grad(
    policy: &Policy,
    batch: &[Sample],
    cfg: &TrainConfig,
) -> Result<(LossParts, Gradients), PolicyError> {
    let lam = policy.lambdas(cfg);
    let n = batch.len() as f64;
    let parts: Vec<Result<(LossParts, Gradients), PolicyError>> = batch
        .par_chunks(cfg.chunk)
        .map(|c| policy.weighted_loss_and_grad(c, lam, c.len() as f64 / n))
        .collect();
    let mut total = LossParts::default();
    let mut grads = policy.store.zeros_like();
    for (r, c) in parts.into_iter().zip(batch.chunks(cfg.chunk)) {
        let (p, g) = r?;
        let w = c.len() as f64 / n;
        total.total += p.total;
        total.noise += p.noise * w;
        total.dist += p.dist * w;
        total.pose += p.pose * w;
        grads.add_assign(&g);
    }
    Ok((total, grads))
}

pub fn train(
    data: &TrainData,
    variant: Variant,
    pcfg: &PolicyConfig,
    tcfg: &TrainConfig,
    norm: Normalizer,
) -> Result<(Policy, TrainLog), PolicyError> {
    tcfg.validate()?;
    let mut policy = Policy::new(variant, pcfg.clone(), norm, derive_seed(tcfg.seed, "policy-init", 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, "policy-batches", 0));
    let mut opt = AdamW::new(tcfg.lr, tcfg.weight_decay);
    let steps = if tcfg.steps_per_epoch > 0 {
        tcfg.steps_per_epoch
    } else {
        data.total_steps().div_ceil(tcfg.batch)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(tcfg.workers)
        .build()
        .map_err(|e| PolicyError::Config(e.to_string()))?;
    let mut log = TrainLog::default();
    for epoch in 0..tcfg.epochs {
        let mut sum = 0.0;
        for _ in 0..steps {
            let batch = build_samples(data, tcfg.batch, variant, pcfg, &policy.norm, &mut rng);
            let (parts, grads) = pool.install(|| chunked_grad(&policy, &batch, tcfg))?;
            opt.step(&mut policy.store, &grads);
            sum += parts.total;
            log.steps.push(parts);
        }
        let mean = sum / steps as f64;
        log::info!("epoch {} mean loss {mean:.5}", epoch + 1);
        log.epochs.push(mean);
    }
    Ok((policy, log))
}
