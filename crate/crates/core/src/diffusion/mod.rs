//! Conditional latent diffusion over slice stacks.
//!
//! Latents are noised with `z_t = √α_t z₀ + √(1-α_t) ε`; the denoiser
//! predicts `z₀` directly and sampling runs a deterministic DDIM-style
//! reverse chain.

mod denoiser;
mod sampler;
mod train;

pub use denoiser::{BlockParams, Denoise, DenoiserParams, ForwardCache, HiddenOffsets};
pub use sampler::sample;
pub use train::{
    diffusion_objective, loss_and_gradient, scan_loss_gradient, train_diffusion, DiffusionSample, DiffusionTraining, LatentNorm,
    TrainConfig,
};

use crate::error::{Error, Result};
use crate::tokens::TokenGrid;

/// Signal-retention coefficients `α_1 > … > α_T`, all in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if alpha.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::InvalidArgument("schedule coefficients must lie in (0, 1)".into()));
        }
        if alpha.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidArgument("schedule must be strictly decreasing".into()));
        }
        Ok(Self { alpha })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    /// `α_t` for `1 <= t <= T`; `α_0 = 1`.
    pub fn alpha(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha[t - 1]
        }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// Geometric interpolation from `alpha_start` to `alpha_end` over `steps`.
pub fn make_schedule(steps: usize, alpha_start: f64, alpha_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(1.0 > alpha_start && alpha_start > alpha_end && alpha_end > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need 1 > alpha_start > alpha_end > 0, got {alpha_start} and {alpha_end}"
        )));
    }
    if steps == 1 {
        return NoiseSchedule::new(vec![alpha_start]);
    }
    let ratio = (alpha_end / alpha_start).ln() / (steps - 1) as f64;
    NoiseSchedule::new((0..steps).map(|k| alpha_start * (ratio * k as f64).exp()).collect())
}

/// `√α_t z₀ + √(1-α_t) ε`.
pub fn forward_diffuse(z0: &TokenGrid, t: usize, noise: &TokenGrid, schedule: &NoiseSchedule) -> Result<TokenGrid> {
    schedule.check_step(t)?;
    z0.check_shape(noise, "noise vs latent")?;
    Ok(mix(z0, noise, schedule.alpha(t)))
}

/// `√a z₀ + √(1-a) ε` for any `a` in `[0, 1]`.
pub fn mix(z0: &TokenGrid, noise: &TokenGrid, a: f64) -> TokenGrid {
    let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
    let data = z0.data.iter().zip(&noise.data).map(|(z, e)| s * z + n * e).collect();
    TokenGrid { data, ..z0.clone() }
}

/// Mean squared error over every element of every slice.
pub fn diffusion_loss(pred: &[TokenGrid], target: &[TokenGrid]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("{} predicted slices for {} targets", pred.len(), target.len())));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(target) {
        p.check_shape(t, "prediction vs target")?;
        sum += p.data.iter().zip(&t.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += p.data.len();
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Weights of the contrastive, denoising and scan terms of the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub info: f64,
    pub diff: f64,
    pub scan: f64,
}

impl LossWeights {
    pub fn new(info: f64, diff: f64, scan: f64) -> Result<Self> {
        let w = Self { info, diff, scan };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.info, self.diff, self.scan];
        if all.iter().any(|&v| !(v >= 0.0 && v.is_finite())) || all.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidArgument(format!("bad loss weights {all:?}")));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { info: 1.0, diff: 1.0, scan: 0.01 }
    }
}

pub fn total_loss(l_info: f64, l_diff: f64, l_scan: f64, weights: &LossWeights) -> f64 {
    weights.info * l_info + weights.diff * l_diff + weights.scan * l_scan
}
