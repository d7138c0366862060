use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{diffusion_loss, mix, total_loss, DenoiserParams, HiddenOffsets, LossWeights, NoiseSchedule};
use crate::embedder::ConditionEmbedding;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::scan::{scan_loss, ScanMode};
use crate::tokens::TokenGrid;

/// Smallest gate sharpness kept after an optimizer step.
const MIN_LAMBDA: f64 = 1e-3;
/// Largest hidden-state perturbation used to differentiate the scan loss.
const SCAN_PROBE: f64 = 1e-4;

/// Per-channel standardization of latents.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentNorm {
    pub fn identity(c: usize) -> Self {
        Self { mean: vec![0.0; c], std: vec![1.0; c] }
    }

    pub fn fit(grids: &[TokenGrid]) -> Result<Self> {
        let c = grids.first().ok_or_else(|| Error::InvalidArgument("no latents to normalize".into()))?.c;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut n = 0usize;
        for g in grids {
            if g.c != c {
                return Err(Error::Shape("latent channel counts differ".into()));
            }
            for i in 0..g.len() {
                for (ch, v) in g.token(i).iter().enumerate() {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            n += g.len();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt().max(1e-6)).collect();
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, g: &TokenGrid) -> TokenGrid {
        self.apply(g, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, g: &TokenGrid) -> TokenGrid {
        self.apply(g, |v, m, s| v * s + m)
    }

    fn apply(&self, g: &TokenGrid, f: impl Fn(f64, f64, f64) -> f64) -> TokenGrid {
        let c = g.c;
        let data = g.data.iter().enumerate().map(|(k, &v)| f(v, self.mean[k % c], self.std[k % c])).collect();
        TokenGrid { data, ..g.clone() }
    }
}

/// One training volume: per-slice conditions and normalized clean latents.
#[derive(Debug, Clone)]
pub struct DiffusionSample {
    pub cond: Vec<ConditionEmbedding>,
    pub target: Vec<TokenGrid>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub n_blocks: usize,
    pub lambda: f64,
    pub attn_weight: f64,
    pub attn_radius: usize,
    pub mode: ScanMode,
    /// Constant contrastive term contributed by the frozen embedder.
    pub l_info: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 2e-3,
            weights: LossWeights::default(),
            n_blocks: 4,
            lambda: 1.0,
            attn_weight: crate::attention::DEFAULT_MASK_WEIGHT,
            attn_radius: crate::attention::DEFAULT_RADIUS,
            mode: ScanMode::Tree,
            l_info: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiffusionTraining {
    pub params: DenoiserParams,
    /// Total loss per step.
    pub losses: Vec<f64>,
    /// Denoising term per step.
    pub diff_losses: Vec<f64>,
}

/// Loss terms `(total, denoising, scan)` for one noised volume.
pub fn diffusion_objective(
    params: &DenoiserParams,
    z_t: &[TokenGrid],
    t: usize,
    cond: &[ConditionEmbedding],
    target: &[TokenGrid],
    weights: &LossWeights,
    l_info: f64,
) -> Result<(f64, f64, f64)> {
    let (pred, cache) = params.forward(z_t, t, cond, None)?;
    let l_diff = diffusion_loss(&pred, target)?;
    let (_, eta) = params.backward(&cache, &mse_gradient(&pred, target))?;
    let l_scan = total_scan_loss(&eta);
    Ok((total_loss(l_info, l_diff, l_scan, weights), l_diff, l_scan))
}

fn total_scan_loss(eta: &HiddenOffsets) -> f64 {
    eta.iter().flatten().map(|e| scan_loss(e)).sum()
}

fn mse_gradient(pred: &[TokenGrid], target: &[TokenGrid]) -> Vec<TokenGrid> {
    let n: usize = pred.iter().map(|p| p.data.len()).sum();
    pred.iter()
        .zip(target)
        .map(|(p, t)| {
            let data = p.data.iter().zip(&t.data).map(|(a, b)| 2.0 * (a - b) / n as f64).collect();
            TokenGrid { data, ..p.clone() }
        })
        .collect()
}

/// Gradient of the denoising loss with hidden states shifted by `offsets`.
fn offset_gradient(
    params: &DenoiserParams,
    z_t: &[TokenGrid],
    t: usize,
    cond: &[ConditionEmbedding],
    target: &[TokenGrid],
    offsets: &HiddenOffsets,
) -> Result<DenoiserParams> {
    let (pred, cache) = params.forward(z_t, t, cond, Some(offsets))?;
    Ok(params.backward(&cache, &mse_gradient(&pred, target))?.0)
}

/// Parameter gradient of `Σ ½‖η‖²`, where `η` is the denoising-loss
/// gradient with respect to the hidden states.
///
/// Shifting every hidden state by `ε η` and differentiating the parameter
/// gradient in `ε` gives the mixed second derivative applied to `η`, which
/// is exactly the gradient of the scan loss. The `ε` derivative is taken by
/// central differences.
pub fn scan_loss_gradient(
    params: &DenoiserParams,
    z_t: &[TokenGrid],
    t: usize,
    cond: &[ConditionEmbedding],
    target: &[TokenGrid],
    eta: &HiddenOffsets,
) -> Result<DenoiserParams> {
    let peak = eta.iter().flatten().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Ok(params.zeros_like());
    }
    let eps = SCAN_PROBE / peak;
    let shift = |k: f64| -> HiddenOffsets {
        eta.iter().map(|b| b.iter().map(|s| s.iter().map(|v| k * v).collect()).collect()).collect()
    };
    let plus = offset_gradient(params, z_t, t, cond, target, &shift(eps))?;
    let minus = offset_gradient(params, z_t, t, cond, target, &shift(-eps))?;
    let mut g = params.zeros_like();
    for ((out, p), m) in g.tensors_mut().into_iter().zip(plus.tensors()).zip(minus.tensors()) {
        for k in 0..out.len() {
            out[k] = (p[k] - m[k]) / (2.0 * eps);
        }
    }
    Ok(g)
}

/// Total-loss value and parameter gradient for one noised volume.
pub fn loss_and_gradient(
    params: &DenoiserParams,
    z_t: &[TokenGrid],
    t: usize,
    cond: &[ConditionEmbedding],
    target: &[TokenGrid],
    weights: &LossWeights,
    l_info: f64,
) -> Result<(f64, f64, DenoiserParams)> {
    let (pred, cache) = params.forward(z_t, t, cond, None)?;
    let l_diff = diffusion_loss(&pred, target)?;
    let (mut grad, eta) = params.backward(&cache, &mse_gradient(&pred, target))?;
    let l_scan = total_scan_loss(&eta);
    grad.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|v| *v *= weights.diff));
    if weights.scan > 0.0 {
        let gs = scan_loss_gradient(params, z_t, t, cond, target, &eta)?;
        for (out, s) in grad.tensors_mut().into_iter().zip(gs.tensors()) {
            for (o, v) in out.iter_mut().zip(s) {
                *o += weights.scan * v;
            }
        }
    }
    Ok((total_loss(l_info, l_diff, l_scan, weights), l_diff, grad))
}

/// Adam on the total loss. Each step draws a volume, a step `t` and fresh
/// noise, noises the clean latents and regresses the prediction onto them.
pub fn train_diffusion(
    data: &[DiffusionSample],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<DiffusionTraining> {
    cfg.weights.validate()?;
    let first = data.first().ok_or_else(|| Error::InvalidArgument("no diffusion training volumes".into()))?;
    let shape = first.target.first().ok_or_else(|| Error::InvalidArgument("empty training volume".into()))?;
    for d in data {
        if d.cond.len() != d.target.len() || d.target.iter().any(|g| !g.same_shape(shape)) {
            return Err(Error::Shape("training volumes disagree in slice count or latent shape".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = DenoiserParams::init(
        shape.c,
        schedule,
        cfg.n_blocks,
        cfg.lambda,
        cfg.attn_weight,
        cfg.attn_radius,
        cfg.mode,
        &mut rng,
    )?;
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut diff_losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let sample = &data[rng.random_range(0..data.len())];
        let t = rng.random_range(1..=schedule.steps());
        let z_t: Vec<TokenGrid> = sample
            .target
            .iter()
            .map(|z0| {
                let noise: Vec<f64> = (0..z0.data.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
                mix(z0, &TokenGrid { data: noise, ..z0.clone() }, schedule.alpha(t))
            })
            .collect();
        let (total, l_diff, grad) =
            loss_and_gradient(&params, &z_t, t, &sample.cond, &sample.target, &cfg.weights, cfg.l_info)?;
        opt.step(params.tensors_mut(), grad.tensors());
        for b in &mut params.blocks {
            b.scan.lambda = b.scan.lambda.max(MIN_LAMBDA);
        }
        losses.push(total);
        diff_losses.push(l_diff);
    }
    params.validate().map_err(|_| Error::InvalidArgument("diffusion training diverged".into()))?;
    Ok(DiffusionTraining { params, losses, diff_losses })
}
