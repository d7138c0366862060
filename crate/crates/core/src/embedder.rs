//! Conditional vision embedder.
//!
//! Every token of a non-angiographic latent slice is described by the
//! average- and max-pooled latents of its 3x3 neighborhood. A two-layer MLP
//! maps that descriptor to a correction added to the token itself, giving the
//! token feature `T`, and a logistic head on `T` gives the vessel weight `M`. Training contrasts slice-pooled latents with
//! slice-pooled `T` (InfoNCE over the slices of a batch) and regresses `M`
//! onto the downsampled vessel mask.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{ema_blend, Codec};
use crate::error::{Error, Result};
use crate::linalg::{cosine, cosine_grad_acc, matvec, matvec_t_acc, outer_acc};
use crate::optim::Adam;
use crate::tokens::TokenGrid;
use crate::volume::{extract_slices, Axis, Image2D};
use crate::phantom::VolumePair;

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_EMA_DECAY: f64 = 0.999;

/// Mask weights `M` and token features `T` over one token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    /// Per-token weight in `[0, 1]`.
    pub mask: Vec<f64>,
    pub tokens: TokenGrid,
}

impl ConditionEmbedding {
    pub fn new(mask: Vec<f64>, tokens: TokenGrid) -> Result<Self> {
        if mask.len() != tokens.len() {
            return Err(Error::Shape(format!(
                "{} mask weights for {} tokens",
                mask.len(),
                tokens.len()
            )));
        }
        if mask.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::InvalidArgument("mask weights must lie in [0, 1]".into()));
        }
        Ok(Self { mask, tokens })
    }

    pub fn mean_mask(&self) -> f64 {
        self.mask.iter().sum::<f64>() / self.mask.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderWeights {
    pub latent_channels: usize,
    pub hidden: usize,
    pub embed_channels: usize,
    /// `hidden x 2c`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `c_e x hidden`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl EmbedderWeights {
    pub fn zeros(latent_channels: usize, embed_channels: usize) -> Self {
        let hidden = 4 * embed_channels;
        let input = 2 * latent_channels;
        Self {
            latent_channels,
            hidden,
            embed_channels,
            w1: vec![0.0; hidden * input],
            b1: vec![0.0; hidden],
            w2: vec![0.0; embed_channels * hidden],
            b2: vec![0.0; embed_channels],
            head_w: vec![0.0; embed_channels],
            head_b: vec![0.0],
        }
    }

    pub fn random(latent_channels: usize, embed_channels: usize, rng: &mut impl Rng) -> Self {
        let mut w = Self::zeros(latent_channels, embed_channels);
        let s1 = (6.0 / (w.hidden + 2 * latent_channels) as f64).sqrt();
        let s2 = (6.0 / (w.hidden + embed_channels) as f64).sqrt();
        w.w1.iter_mut().for_each(|x| *x = rng.random_range(-s1..s1));
        w.w2.iter_mut().for_each(|x| *x = rng.random_range(-s2..s2));
        w.head_w.iter_mut().for_each(|x| *x = rng.random_range(-0.1..0.1));
        w
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2, &self.head_w, &self.head_b]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn tensor_names() -> [&'static str; 6] {
        ["w1", "b1", "w2", "b2", "head_w", "head_b"]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn embed_slice(&self, tokens: &TokenGrid) -> Result<ConditionEmbedding> {
        Ok(self.forward(tokens)?.embedding)
    }

    fn forward(&self, tokens: &TokenGrid) -> Result<EmbedCache> {
        if tokens.c != self.latent_channels {
            return Err(Error::Shape(format!(
                "latent grid has {} channels, embedder expects {}",
                tokens.c, self.latent_channels
            )));
        }
        if !tokens.data.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite latent tokens".into()));
        }
        let l = tokens.len();
        let (input, hid, out) = (2 * self.latent_channels, self.hidden, self.embed_channels);
        let features = pooled_features(tokens);
        let mut pre = vec![0.0; l * hid];
        let mut t = TokenGrid::zeros(tokens.h, tokens.w, out);
        let mut mask = vec![0.0; l];
        let mut act = vec![0.0; hid];
        for i in 0..l {
            let p = &mut pre[i * hid..(i + 1) * hid];
            matvec(&self.w1, hid, input, &features[i * input..(i + 1) * input], p);
            for (k, v) in p.iter_mut().enumerate() {
                *v += self.b1[k];
                act[k] = silu(*v);
            }
            let ti = t.token_mut(i);
            matvec(&self.w2, out, hid, &act, ti);
            for (v, b) in ti.iter_mut().zip(&self.b2) {
                *v += b;
            }
            if out == self.latent_channels {
                for (v, z) in ti.iter_mut().zip(tokens.token(i)) {
                    *v += z;
                }
            }
            let logit: f64 = ti.iter().zip(&self.head_w).map(|(a, b)| a * b).sum::<f64>() + self.head_b[0];
            mask[i] = sigmoid(logit);
        }
        Ok(EmbedCache { features, pre, embedding: ConditionEmbedding { mask, tokens: t } })
    }

    /// Accumulates parameter gradients given `∂L/∂T` and `∂L/∂logit(M)`.
    fn backward(&self, cache: &EmbedCache, d_t: &[f64], d_logit: &[f64], grad: &mut EmbedderWeights) {
        let (input, hid, out) = (2 * self.latent_channels, self.hidden, self.embed_channels);
        let t = &cache.embedding.tokens;
        let mut dt = vec![0.0; out];
        let mut dact = vec![0.0; hid];
        let mut act = vec![0.0; hid];
        for i in 0..t.len() {
            let ti = t.token(i);
            dt.copy_from_slice(&d_t[i * out..(i + 1) * out]);
            let dl = d_logit[i];
            for k in 0..out {
                grad.head_w[k] += dl * ti[k];
                dt[k] += dl * self.head_w[k];
            }
            grad.head_b[0] += dl;
            let pre = &cache.pre[i * hid..(i + 1) * hid];
            for k in 0..hid {
                act[k] = silu(pre[k]);
            }
            outer_acc(&mut grad.w2, &dt, &act);
            for (b, d) in grad.b2.iter_mut().zip(&dt) {
                *b += d;
            }
            dact.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(&self.w2, out, hid, &dt, &mut dact);
            for k in 0..hid {
                dact[k] *= silu_grad(pre[k]);
            }
            outer_acc(&mut grad.w1, &dact, &cache.features[i * input..(i + 1) * input]);
            for (b, d) in grad.b1.iter_mut().zip(&dact) {
                *b += d;
            }
        }
    }
}

struct EmbedCache {
    features: Vec<f64>,
    pre: Vec<f64>,
    embedding: ConditionEmbedding,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `[avg-pool | max-pool]` over each token's zero-padded 3x3 neighborhood,
/// `L x 2c` row-major.
pub fn pooled_features(tokens: &TokenGrid) -> Vec<f64> {
    let (h, w, c) = (tokens.h as isize, tokens.w as isize, tokens.c);
    let mut out = vec![0.0; tokens.len() * 2 * c];
    for r in 0..h {
        for col in 0..w {
            let i = (r * w + col) as usize;
            let (avg, max) = out[i * 2 * c..(i + 1) * 2 * c].split_at_mut(c);
            max.iter_mut().for_each(|m| *m = f64::NEG_INFINITY);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, col + dc);
                    if rr < 0 || cc < 0 || rr >= h || cc >= w {
                        max.iter_mut().for_each(|m| *m = m.max(0.0));
                        continue;
                    }
                    let t = tokens.token((rr * w + cc) as usize);
                    for k in 0..c {
                        avg[k] += t[k] / 9.0;
                        max[k] = max[k].max(t[k]);
                    }
                }
            }
        }
    }
    out
}

/// Mean of InfoNCE terms over the batch, with cosine similarity:
///
/// `-log( exp(sim(z_i, t_i)/τ) / Σ_k exp(sim(z_i, t_k)/τ) )`.
pub fn infonce_loss(z: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> Result<f64> {
    Ok(infonce_with_grad(z, t, tau)?.0)
}

/// One vector per batch element.
pub type Batch = Vec<Vec<f64>>;

/// InfoNCE loss and its gradients with respect to `z` and `t`.
pub fn infonce_with_grad(z: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> Result<(f64, Batch, Batch)> {
    let n = z.len();
    if n < 2 || t.len() != n {
        return Err(Error::InvalidArgument(format!(
            "InfoNCE needs matching batches of at least 2, got {} and {}",
            n,
            t.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            sim[i * n + k] = match cosine(&z[i], &t[k]) {
                Some(s) => s,
                None => {
                    let index = if crate::linalg::norm(&z[i]) == 0.0 { i } else { k };
                    return Err(Error::ZeroNorm { index });
                }
            };
        }
    }
    let mut loss = 0.0;
    let mut dz = vec![vec![0.0; z[0].len()]; n];
    let mut dt = vec![vec![0.0; t[0].len()]; n];
    for i in 0..n {
        let row = &sim[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
        let denom: f64 = row.iter().map(|s| (s / tau - max).exp()).sum();
        loss += denom.ln() + max - row[i] / tau;
        for k in 0..n {
            let p = (row[k] / tau - max).exp() / denom;
            let ds = (p - if i == k { 1.0 } else { 0.0 }) / (tau * n as f64);
            let (zi, tk) = (&mut dz[i], &mut dt[k]);
            cosine_grad_acc(&z[i], &t[k], ds, zi, tk);
        }
    }
    Ok((loss / n as f64, dz, dt))
}

/// Live MLP weights, their EMA shadow (used at inference), temperature and
/// decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    pub live: EmbedderWeights,
    pub shadow: EmbedderWeights,
    pub tau: f64,
    pub ema_decay: f64,
}

impl Embedder {
    pub fn new(weights: EmbedderWeights, tau: f64, ema_decay: f64) -> Result<Self> {
        if !(tau > 0.0) || !(0.0..=1.0).contains(&ema_decay) {
            return Err(Error::InvalidArgument(format!("bad temperature {tau} or decay {ema_decay}")));
        }
        if weights.latent_channels != weights.embed_channels {
            return Err(Error::Shape(
                "embedding channels must equal latent channels for cosine contrast".into(),
            ));
        }
        Ok(Self { shadow: weights.clone(), live: weights, tau, ema_decay })
    }

    pub fn embed_slice(&self, tokens: &TokenGrid) -> Result<ConditionEmbedding> {
        self.shadow.embed_slice(tokens)
    }

    pub fn ema_update(&mut self, decay: f64) {
        let live = self.live.tensors();
        for (s, l) in self.shadow.tensors_mut().into_iter().zip(live) {
            ema_blend(s, l, decay);
        }
    }
}

/// Per-token vessel target: 1 if any voxel of the token's patch is vessel.
pub fn downsample_mask(mask: &Image2D, patch: usize) -> Vec<f64> {
    let (h, w) = (mask.rows / patch, mask.cols / patch);
    let mut out = vec![0.0; h * w];
    for r in 0..mask.rows - mask.rows % patch {
        for c in 0..mask.cols - mask.cols % patch {
            if mask.get(r, c) > 0.5 {
                out[(r / patch) * w + c / patch] = 1.0;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderConfig {
    pub embed_channels: usize,
    pub epochs: usize,
    pub lr: f64,
    pub tau: f64,
    pub ema_decay: f64,
    /// Weight of the vessel-mask cross-entropy added to InfoNCE.
    pub mask_weight: f64,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            embed_channels: 8,
            epochs: 200,
            lr: 3e-3,
            tau: DEFAULT_TAU,
            ema_decay: DEFAULT_EMA_DECAY,
            mask_weight: 1.0,
            seed: 0,
        }
    }
}

/// One contrastive batch: the latent slices of a volume and per-token vessel
/// targets.
#[derive(Debug, Clone)]
pub struct EmbedderBatch {
    pub latents: Vec<TokenGrid>,
    pub mask_targets: Vec<Vec<f64>>,
}

impl EmbedderBatch {
    pub fn from_pair(pair: &VolumePair, codec: &Codec) -> Result<Self> {
        let latents = extract_slices(&pair.non_angio, Axis::Z)
            .iter()
            .map(|s| codec.encode_slice(s))
            .collect::<Result<Vec<_>>>()?;
        let mask_targets = extract_slices(&pair.vessel_mask, Axis::Z)
            .iter()
            .map(|s| downsample_mask(s, codec.shadow.patch))
            .collect();
        Ok(Self { latents, mask_targets })
    }
}

fn mean_token(g: &TokenGrid) -> Vec<f64> {
    let mut m = vec![0.0; g.c];
    for i in 0..g.len() {
        for (a, b) in m.iter_mut().zip(g.token(i)) {
            *a += b / g.len() as f64;
        }
    }
    m
}

/// Loss of one batch and, if `grad` is given, its parameter gradient.
pub fn embedder_batch_loss(
    weights: &EmbedderWeights,
    batch: &EmbedderBatch,
    tau: f64,
    mask_weight: f64,
    grad: Option<&mut EmbedderWeights>,
) -> Result<(f64, f64)> {
    let caches = batch.latents.iter().map(|z| weights.forward(z)).collect::<Result<Vec<_>>>()?;
    let z: Vec<Vec<f64>> = batch.latents.iter().map(mean_token).collect();
    let t: Vec<Vec<f64>> = caches.iter().map(|c| mean_token(&c.embedding.tokens)).collect();
    let (info, _, dt_mean) = infonce_with_grad(&z, &t, tau)?;

    let n_tokens: usize = caches.iter().map(|c| c.embedding.mask.len()).sum();
    let mut bce = 0.0;
    for (cache, target) in caches.iter().zip(&batch.mask_targets) {
        for (&m, &y) in cache.embedding.mask.iter().zip(target) {
            let m = m.clamp(1e-12, 1.0 - 1e-12);
            bce -= y * m.ln() + (1.0 - y) * (1.0 - m).ln();
        }
    }
    bce /= n_tokens as f64;

    if let Some(grad) = grad {
        for ((cache, target), dtm) in caches.iter().zip(&batch.mask_targets).zip(&dt_mean) {
            let tokens = &cache.embedding.tokens;
            let l = tokens.len();
            let mut d_t = vec![0.0; tokens.data.len()];
            for i in 0..l {
                for k in 0..tokens.c {
                    d_t[i * tokens.c + k] = dtm[k] / l as f64;
                }
            }
            let d_logit: Vec<f64> = cache
                .embedding
                .mask
                .iter()
                .zip(target)
                .map(|(m, y)| mask_weight * (m - y) / n_tokens as f64)
                .collect();
            weights.backward(cache, &d_t, &d_logit, grad);
        }
    }
    Ok((info, bce))
}

#[derive(Debug, Clone)]
pub struct EmbedderTraining {
    pub embedder: Embedder,
    /// Mean training loss (InfoNCE + weighted mask term) per epoch.
    pub losses: Vec<f64>,
    /// Mean InfoNCE term per epoch.
    pub infonce: Vec<f64>,
}

/// Adam on InfoNCE plus the mask term, one batch (volume) per step, batches
/// visited in a seeded order each epoch. The EMA shadow follows every step.
pub fn train_embedder_on(batches: &[EmbedderBatch], cfg: &EmbedderConfig) -> Result<EmbedderTraining> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("no embedder batches".into()));
    }
    let c = batches[0].latents.first().map(|g| g.c).ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut embedder = Embedder::new(EmbedderWeights::random(c, cfg.embed_channels, &mut rng), cfg.tau, cfg.ema_decay)?;
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut infonce = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut info_total) = (0.0, 0.0);
        for &b in &order {
            let mut grad = EmbedderWeights::zeros(c, cfg.embed_channels);
            let (info, bce) = embedder_batch_loss(&embedder.live, &batches[b], cfg.tau, cfg.mask_weight, Some(&mut grad))?;
            total += info + cfg.mask_weight * bce;
            info_total += info;
            let grads = grad.tensors();
            opt.step(embedder.live.tensors_mut(), grads);
            embedder.ema_update(cfg.ema_decay);
        }
        losses.push(total / batches.len() as f64);
        infonce.push(info_total / batches.len() as f64);
    }
    if !embedder.live.is_finite() {
        return Err(Error::InvalidArgument("embedder training diverged".into()));
    }
    Ok(EmbedderTraining { embedder, losses, infonce })
}

/// Trains on the non-angiographic slices of `pairs`, encoded with `codec`.
pub fn train_embedder(pairs: &[VolumePair], codec: &Codec, cfg: &EmbedderConfig) -> Result<EmbedderTraining> {
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "embedder training needs at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let batches = pairs.iter().map(|p| EmbedderBatch::from_pair(p, codec)).collect::<Result<Vec<_>>>()?;
    train_embedder_on(&batches, cfg)
}
