//! DDPM over fixed-horizon action sequences.
//!
//! An action sequence is an `H_p × 2` matrix; batched code flattens each
//! sequence row-major into one row of a `B × 2H_p` tensor. The reverse
//! update is
//!
//! ```text
//! a^{k-1} = (a^k − γ_k·ε̂) / √α_k + σ_k·z,   γ_k = (1 − α_k) / √(1 − ᾱ_k)
//! ```
//!
//! with `z = 0` at `k = 1`.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::nn::{Graph, LayerNorm, Linear, Mlp2, ParamStore, Tensor, Var};

/// Offset of the square-cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip on per-step β; keeps `ᾱ_K` strictly positive.
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("schedule needs at least one step")]
    NoSteps,
    #[error("diffusion step {k} outside 1..={max}")]
    StepOutOfRange { k: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Coefficient table indexed by step `k ∈ 0..=K`; index 0 of the per-step
/// vectors is unused padding (α = 1, β = σ = 0).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub alpha_bar: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma: Vec<f64>,
}

fn cosine_f(t: f64) -> f64 {
    ((t + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2)
        .cos()
        .powi(2)
}

pub fn square_cosine_schedule(steps: usize) -> Result<NoiseSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::NoSteps);
    }
    let kf = steps as f64;
    let mut alpha_bar = vec![1.0; steps + 1];
    let mut alpha = vec![1.0; steps + 1];
    let mut beta = vec![0.0; steps + 1];
    let mut sigma = vec![0.0; steps + 1];
    for k in 1..=steps {
        let b = (1.0 - cosine_f(k as f64 / kf) / cosine_f((k - 1) as f64 / kf)).min(MAX_BETA);
        beta[k] = b;
        alpha[k] = 1.0 - b;
        alpha_bar[k] = alpha_bar[k - 1] * alpha[k];
        sigma[k] = (b * (1.0 - alpha_bar[k - 1]) / (1.0 - alpha_bar[k])).sqrt();
    }
    Ok(NoiseSchedule {
        alpha_bar,
        alpha,
        beta,
        sigma,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    fn check(&self, k: usize, allow_zero: bool) -> Result<(), DiffusionError> {
        if k > self.steps() || (k == 0 && !allow_zero) {
            return Err(DiffusionError::StepOutOfRange { k, max: self.steps() });
        }
        Ok(())
    }

    /// Noise coefficient `γ_k` of the reverse update.
    pub fn gamma(&self, k: usize) -> f64 {
        (1.0 - self.alpha[k]) / (1.0 - self.alpha_bar[k]).sqrt()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<(), DiffusionError> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `a^k = √ᾱ_k·a0 + √(1−ᾱ_k)·ε`; `k = 0` is the identity.
pub fn forward_noise(a0: &Tensor, k: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor, DiffusionError> {
    s.check(k, true)?;
    same_shape(a0, eps, "forward_noise")?;
    let (ca, ce) = (s.alpha_bar[k].sqrt(), (1.0 - s.alpha_bar[k]).sqrt());
    let data = a0.data.iter().zip(&eps.data).map(|(a, e)| ca * a + ce * e).collect();
    Ok(Tensor::from_vec(a0.rows, a0.cols, data))
}

/// Clean-sample estimate implied by a noise estimate at step `k`.
pub fn predict_x0(ak: &Tensor, k: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor, DiffusionError> {
    s.check(k, true)?;
    same_shape(ak, eps, "predict_x0")?;
    let (ca, ce) = (s.alpha_bar[k].sqrt(), (1.0 - s.alpha_bar[k]).sqrt());
    let data = ak.data.iter().zip(&eps.data).map(|(a, e)| (a - ce * e) / ca).collect();
    Ok(Tensor::from_vec(ak.rows, ak.cols, data))
}

/// One reverse update. `z` is ignored at `k = 1`.
pub fn reverse_step(
    ak: &Tensor,
    eps_hat: &Tensor,
    k: usize,
    z: &Tensor,
    s: &NoiseSchedule,
) -> Result<Tensor, DiffusionError> {
    s.check(k, false)?;
    same_shape(ak, eps_hat, "reverse_step eps")?;
    same_shape(ak, z, "reverse_step z")?;
    let inv = 1.0 / s.alpha[k].sqrt();
    let g = s.gamma(k);
    let sig = if k == 1 { 0.0 } else { s.sigma[k] };
    let data = ak
        .data
        .iter()
        .zip(&eps_hat.data)
        .zip(&z.data)
        .map(|((a, e), zz)| inv * (a - g * e) + sig * zz)
        .collect();
    Ok(Tensor::from_vec(ak.rows, ak.cols, data))
}

/// Noise predictor over a batch of flattened noisy sequences at step `k`.
pub trait Denoiser {
    fn predict(&self, noisy: &Tensor, k: usize) -> Tensor;
}

impl<F: Fn(&Tensor, usize) -> Tensor> Denoiser for F {
    fn predict(&self, noisy: &Tensor, k: usize) -> Tensor {
        self(noisy, k)
    }
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect(),
    )
}

/// Ancestral sampling of `batch` chains of width `dim`, starting from
/// `a^K ~ N(0, I)` with fresh `z` per step.
pub fn sample(denoiser: &impl Denoiser, batch: usize, dim: usize, s: &NoiseSchedule, rng: &mut impl Rng) -> Tensor {
    sample_clipped(denoiser, batch, dim, s, None, rng)
}

/// Noise consistent with the clean estimate clamped to `[-bound, bound]`.
/// Feeding it to `reverse_step` gives the posterior mean of the clamped
/// estimate, so the final sample always lies inside the bound.
pub fn clip_eps(
    ak: &Tensor,
    eps_hat: &Tensor,
    k: usize,
    bound: f64,
    s: &NoiseSchedule,
) -> Result<Tensor, DiffusionError> {
    s.check(k, false)?;
    let x0 = predict_x0(ak, k, eps_hat, s)?;
    let (ca, ce) = (s.alpha_bar[k].sqrt(), (1.0 - s.alpha_bar[k]).sqrt());
    let data = ak
        .data
        .iter()
        .zip(&x0.data)
        .map(|(a, x)| (a - ca * x.clamp(-bound, bound)) / ce)
        .collect();
    Ok(Tensor::from_vec(ak.rows, ak.cols, data))
}

/// Like [`sample`], optionally clamping the clean estimate at every step.
pub fn sample_clipped(
    denoiser: &impl Denoiser,
    batch: usize,
    dim: usize,
    s: &NoiseSchedule,
    clip: Option<f64>,
    rng: &mut impl Rng,
) -> Tensor {
    let mut a = gaussian(batch, dim, rng);
    for k in (1..=s.steps()).rev() {
        let mut eps = denoiser.predict(&a, k);
        assert_eq!(eps.shape(), a.shape(), "denoiser output shape");
        if let Some(b) = clip {
            eps = clip_eps(&a, &eps, k, b, s).expect("k in range");
        }
        let z = if k > 1 {
            gaussian(batch, dim, rng)
        } else {
            Tensor::zeros(batch, dim)
        };
        a = reverse_step(&a, &eps, k, &z, s).expect("k in range");
    }
    a
}

/// Sinusoidal embedding of diffusion steps, one row per entry of `ks`.
pub fn step_embedding(ks: &[usize], width: usize) -> Tensor {
    let half = width / 2;
    let mut t = Tensor::zeros(ks.len(), width);
    for (r, &k) in ks.iter().enumerate() {
        for i in 0..half {
            let w = (-(i as f64) / half as f64 * 100f64.ln()).exp();
            t.set(r, i, (k as f64 * w).sin());
            t.set(r, half + i, (k as f64 * w).cos());
        }
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EpsNetShape {
    /// Flattened sequence width `2·H_p`.
    pub dim: usize,
    pub cond_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub step_embed: usize,
}

struct Block {
    norm: LayerNorm,
    film: Linear,
    mlp: Mlp2,
}

/// Dense residual noise predictor conditioned on a step embedding and an
/// optional condition vector.
pub struct EpsNet {
    pub shape: EpsNetShape,
    input: Linear,
    embed: Linear,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
    out: Linear,
}

impl EpsNet {
    pub fn new(store: &mut ParamStore, name: &str, shape: EpsNetShape, rng: &mut impl Rng) -> Self {
        let w = shape.width;
        let input = Linear::new(store, &format!("{name}.in"), shape.dim, w, rng);
        let embed = Linear::new(
            store,
            &format!("{name}.embed"),
            shape.step_embed + shape.cond_dim,
            w,
            rng,
        );
        let blocks = (0..shape.blocks)
            .map(|b| Block {
                norm: LayerNorm::new(store, &format!("{name}.block{b}.norm"), w),
                film: Linear::new(store, &format!("{name}.block{b}.film"), w, w, rng),
                mlp: Mlp2::new(store, &format!("{name}.block{b}.mlp"), w, 2 * w, w, rng),
            })
            .collect();
        let out_norm = LayerNorm::new(store, &format!("{name}.out_norm"), w);
        let out = Linear::new(store, &format!("{name}.out"), w, shape.dim, rng);
        Self {
            shape,
            input,
            embed,
            blocks,
            out_norm,
            out,
        }
    }

    /// `x` is `B × dim`, `ks` has `B` entries, `cond` is `B × cond_dim`.
    pub fn forward(&self, g: &mut Graph, x: Var, ks: &[usize], cond: Option<Var>) -> Var {
        let temb = g.constant(step_embedding(ks, self.shape.step_embed));
        let e = match cond {
            Some(c) => g.concat_cols(&[temb, c]),
            None => temb,
        };
        let e = self.embed.forward(g, e);
        let e = g.silu(e);
        let h = self.input.forward(g, x);
        let mut h = g.add(h, e);
        for b in &self.blocks {
            let u = b.norm.forward(g, h);
            let f = b.film.forward(g, e);
            let u = g.add(u, f);
            let u = b.mlp.forward(g, u);
            h = g.add(h, u);
        }
        let h = self.out_norm.forward(g, h);
        let h = g.silu(h);
        self.out.forward(g, h)
    }
}
