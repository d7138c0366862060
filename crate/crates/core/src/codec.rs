//! Per-patch linear latent codec.
//!
//! Each non-overlapping `p x p` patch of a slice is flattened (row-major) and
//! mapped affinely to a `c`-channel token; decoding applies a second affine map
//! back to the patch.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::{matvec, matvec_t_acc, outer_acc};
use crate::tokens::TokenGrid;
use crate::volume::Image2D;

#[derive(Debug, Clone, PartialEq)]
pub struct CodecWeights {
    pub patch: usize,
    pub channels: usize,
    /// `channels x patch²`
    pub enc_w: Vec<f64>,
    pub enc_b: Vec<f64>,
    /// `patch² x channels`
    pub dec_w: Vec<f64>,
    pub dec_b: Vec<f64>,
}

impl CodecWeights {
    pub fn zeros(patch: usize, channels: usize) -> Self {
        let pp = patch * patch;
        Self {
            patch,
            channels,
            enc_w: vec![0.0; channels * pp],
            enc_b: vec![0.0; channels],
            dec_w: vec![0.0; pp * channels],
            dec_b: vec![0.0; pp],
        }
    }

    /// Lossless codec with `channels == patch²`.
    pub fn identity(patch: usize) -> Self {
        let pp = patch * patch;
        let mut w = Self::zeros(patch, pp);
        for i in 0..pp {
            w.enc_w[i * pp + i] = 1.0;
            w.dec_w[i * pp + i] = 1.0;
        }
        w
    }

    fn patch_len(&self) -> usize {
        self.patch * self.patch
    }

    pub fn tensors(&self) -> [&Vec<f64>; 4] {
        [&self.enc_w, &self.enc_b, &self.dec_w, &self.dec_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.enc_w, &mut self.enc_b, &mut self.dec_w, &mut self.dec_b]
    }

    fn encode_patch(&self, x: &[f64], out: &mut [f64]) {
        matvec(&self.enc_w, self.channels, self.patch_len(), x, out);
        for (o, b) in out.iter_mut().zip(&self.enc_b) {
            *o += b;
        }
    }

    fn decode_patch(&self, z: &[f64], out: &mut [f64]) {
        matvec(&self.dec_w, self.patch_len(), self.channels, z, out);
        for (o, b) in out.iter_mut().zip(&self.dec_b) {
            *o += b;
        }
    }

    pub fn encode_slice(&self, slice: &Image2D) -> Result<TokenGrid> {
        let p = self.patch;
        if !slice.rows.is_multiple_of(p) || !slice.cols.is_multiple_of(p) {
            return Err(Error::Shape(format!(
                "{}x{} slice is not divisible by patch size {p}",
                slice.rows, slice.cols
            )));
        }
        let patches = patchify(slice, p);
        let (h, w) = (slice.rows / p, slice.cols / p);
        let mut out = TokenGrid::zeros(h, w, self.channels);
        for (i, x) in patches.chunks_exact(self.patch_len()).enumerate() {
            self.encode_patch(x, out.token_mut(i));
        }
        Ok(out)
    }

    pub fn decode_slice(&self, tokens: &TokenGrid) -> Result<Image2D> {
        if tokens.c != self.channels {
            return Err(Error::Shape(format!(
                "token grid has {} channels, codec expects {}",
                tokens.c, self.channels
            )));
        }
        let pp = self.patch_len();
        let mut patches = vec![0.0; tokens.len() * pp];
        for (i, out) in patches.chunks_exact_mut(pp).enumerate() {
            self.decode_patch(tokens.token(i), out);
        }
        Ok(unpatchify(&patches, tokens.h, tokens.w, self.patch))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Flattens `p x p` patches in raster order of patch position.
fn patchify(slice: &Image2D, p: usize) -> Vec<f64> {
    let (h, w) = (slice.rows / p, slice.cols / p);
    let mut out = Vec::with_capacity(slice.rows * slice.cols);
    for ty in 0..h {
        for tx in 0..w {
            for dy in 0..p {
                for dx in 0..p {
                    out.push(slice.get(ty * p + dy, tx * p + dx) as f64);
                }
            }
        }
    }
    out
}

fn unpatchify(patches: &[f64], h: usize, w: usize, p: usize) -> Image2D {
    let cols = w * p;
    let mut data = vec![0.0f32; h * p * cols];
    let mut k = 0;
    for ty in 0..h {
        for tx in 0..w {
            for dy in 0..p {
                for dx in 0..p {
                    data[(ty * p + dy) * cols + tx * p + dx] = patches[k] as f32;
                    k += 1;
                }
            }
        }
    }
    Image2D { rows: h * p, cols, data }
}

/// Live weights, their exponential moving average, and the EMA decay.
/// Inference uses the shadow copy.
#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    pub live: CodecWeights,
    pub shadow: CodecWeights,
    pub ema_decay: f64,
}

impl Codec {
    pub fn from_weights(weights: CodecWeights, ema_decay: f64) -> Self {
        Self { shadow: weights.clone(), live: weights, ema_decay }
    }

    pub fn encode_slice(&self, slice: &Image2D) -> Result<TokenGrid> {
        self.shadow.encode_slice(slice)
    }

    pub fn decode_slice(&self, tokens: &TokenGrid) -> Result<Image2D> {
        self.shadow.decode_slice(tokens)
    }

    pub fn ema_update(&mut self) {
        let d = self.ema_decay;
        let live = self.live.tensors();
        for (s, l) in self.shadow.tensors_mut().into_iter().zip(live) {
            ema_blend(s, l, d);
        }
    }
}

/// `shadow <- decay * shadow + (1 - decay) * live`, elementwise.
pub fn ema_blend(shadow: &mut [f64], live: &[f64], decay: f64) {
    for (s, &l) in shadow.iter_mut().zip(live) {
        *s = decay * *s + (1.0 - decay) * l;
    }
}

#[derive(Debug, Clone)]
pub struct CodecTraining {
    pub codec: Codec,
    /// Reconstruction MSE after each epoch.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
}

/// Mean-centered PCA initialization followed by full-batch gradient descent
/// on the reconstruction MSE.
///
/// A step that would increase the loss is retried with half the step size, so
/// the loss sequence never increases.
pub fn train_codec(
    slices: &[Image2D],
    patch: usize,
    channels: usize,
    epochs: usize,
    lr: f64,
    ema_decay: f64,
) -> Result<CodecTraining> {
    if slices.is_empty() {
        return Err(Error::InvalidArgument("codec training needs at least one slice".into()));
    }
    if !(0.0..=1.0).contains(&ema_decay) || !(lr >= 0.0) || patch == 0 || channels == 0 {
        return Err(Error::InvalidArgument(format!(
            "bad codec hyperparameters: patch {patch}, channels {channels}, lr {lr}, decay {ema_decay}"
        )));
    }
    let mut data = Vec::new();
    for s in slices {
        if !s.rows.is_multiple_of(patch) || !s.cols.is_multiple_of(patch) {
            return Err(Error::Shape(format!(
                "{}x{} slice is not divisible by patch size {patch}",
                s.rows, s.cols
            )));
        }
        data.extend(patchify(s, patch));
    }
    let pp = patch * patch;
    let init = pca_init(&data, patch, channels);
    let mut codec = Codec::from_weights(init, ema_decay);
    let mut loss = reconstruction_loss(&codec.live, &data);
    let initial_loss = loss;
    let mut step = lr;
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        if lr > 0.0 {
            let grad = reconstruction_grad(&codec.live, &data, pp);
            for _ in 0..40 {
                let mut trial = codec.live.clone();
                for (w, g) in trial.tensors_mut().into_iter().zip(grad.tensors()) {
                    for (x, dx) in w.iter_mut().zip(g.iter()) {
                        *x -= step * dx;
                    }
                }
                let trial_loss = reconstruction_loss(&trial, &data);
                if trial_loss <= loss {
                    codec.live = trial;
                    loss = trial_loss;
                    step = (step * 1.25).min(lr);
                    break;
                }
                step *= 0.5;
            }
        }
        codec.ema_update();
        losses.push(loss);
    }
    Ok(CodecTraining { codec, losses, initial_loss })
}

fn pca_init(data: &[f64], patch: usize, channels: usize) -> CodecWeights {
    let pp = patch * patch;
    let n = data.len() / pp;
    let mut mean = vec![0.0; pp];
    for x in data.chunks_exact(pp) {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(pp, pp);
    for x in data.chunks_exact(pp) {
        for a in 0..pp {
            let da = x[a] - mean[a];
            for b in 0..pp {
                cov[(a, b)] += da * (x[b] - mean[b]) / n as f64;
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..pp).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut w = CodecWeights::zeros(patch, channels);
    for (k, &col) in order.iter().take(channels).enumerate() {
        // Fix the sign so the largest-magnitude component is positive.
        let v = eig.eigenvectors.column(col);
        let pivot = (0..pp).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap();
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for a in 0..pp {
            w.enc_w[k * pp + a] = sign * v[a];
            w.dec_w[a * channels + k] = sign * v[a];
        }
    }
    let mut proj = vec![0.0; channels];
    matvec(&w.enc_w, channels, pp, &mean, &mut proj);
    w.enc_b = proj.iter().map(|x| -x).collect();
    w.dec_b = mean;
    w
}

fn reconstruction_loss(w: &CodecWeights, data: &[f64]) -> f64 {
    let pp = w.patch_len();
    let mut z = vec![0.0; w.channels];
    let mut r = vec![0.0; pp];
    let mut total = 0.0;
    for x in data.chunks_exact(pp) {
        w.encode_patch(x, &mut z);
        w.decode_patch(&z, &mut r);
        total += r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    total / data.len() as f64
}

fn reconstruction_grad(w: &CodecWeights, data: &[f64], pp: usize) -> CodecWeights {
    let mut g = CodecWeights::zeros(w.patch, w.channels);
    let scale = 2.0 / data.len() as f64;
    let mut z = vec![0.0; w.channels];
    let mut r = vec![0.0; pp];
    let mut dz = vec![0.0; w.channels];
    for x in data.chunks_exact(pp) {
        w.encode_patch(x, &mut z);
        w.decode_patch(&z, &mut r);
        for (ri, xi) in r.iter_mut().zip(x) {
            *ri = scale * (*ri - xi);
        }
        outer_acc(&mut g.dec_w, &r, &z);
        for (b, ri) in g.dec_b.iter_mut().zip(&r) {
            *b += ri;
        }
        dz.iter_mut().for_each(|v| *v = 0.0);
        matvec_t_acc(&w.dec_w, pp, w.channels, &r, &mut dz);
        outer_acc(&mut g.enc_w, &dz, x);
        for (b, d) in g.enc_b.iter_mut().zip(&dz) {
            *b += d;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_slice(rows: usize, cols: usize, seed: u64) -> Image2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image2D::new(rows, cols, (0..rows * cols).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn encode_shape() {
        let w = CodecWeights::zeros(4, 8);
        let t = w.encode_slice(&random_slice(16, 16, 0)).unwrap();
        assert_eq!((t.h, t.w, t.c), (4, 4, 8));
    }

    #[test]
    fn indivisible_slice_rejected() {
        let w = CodecWeights::zeros(4, 8);
        assert!(matches!(w.encode_slice(&random_slice(10, 16, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn decode_rejects_channel_mismatch() {
        let w = CodecWeights::zeros(4, 8);
        assert!(matches!(w.decode_slice(&TokenGrid::zeros(2, 2, 5)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_slice_zero_bias_gives_zero_tokens() {
        let mut w = CodecWeights::zeros(2, 3);
        w.enc_w.iter_mut().enumerate().for_each(|(i, x)| *x = i as f64 * 0.1 - 0.4);
        let zero = Image2D::new(4, 6, vec![0.0; 24]).unwrap();
        let t = w.encode_slice(&zero).unwrap();
        assert!(t.data.iter().all(|&x| x == 0.0));
        let back = w.decode_slice(&TokenGrid::zeros(2, 3, 3)).unwrap();
        assert_eq!((back.rows, back.cols), (4, 6));
        assert!(back.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_codec_round_trips() {
        let w = CodecWeights::identity(4);
        let s = random_slice(8, 12, 3);
        let back = w.decode_slice(&w.encode_slice(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn constant_slice_trains_to_zero_error() {
        let s = Image2D::new(16, 16, vec![0.37; 256]).unwrap();
        let run = train_codec(std::slice::from_ref(&s), 4, 8, 100, 0.5, 0.9).unwrap();
        assert!(*run.losses.last().unwrap() < 1e-6);
        let back = run.codec.decode_slice(&run.codec.encode_slice(&s).unwrap()).unwrap();
        let mse: f64 = back.data.iter().zip(&s.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / 256.0;
        assert!(mse < 1e-6);
    }

    #[test]
    fn loss_is_monotone_under_training() {
        let slices: Vec<_> = (0..3).map(|k| random_slice(16, 16, k)).collect();
        let run = train_codec(&slices, 4, 4, 30, 1.0, 0.9).unwrap();
        let mut prev = run.initial_loss;
        for &l in &run.losses {
            assert!(l <= prev + 1e-6, "{l} > {prev}");
            prev = l;
        }
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let slices = [random_slice(8, 8, 9)];
        let data = patchify(&slices[0], 2);
        let mut w = pca_init(&data, 2, 2);
        w.enc_w[1] += 0.3;
        w.dec_b[0] -= 0.2;
        let g = reconstruction_grad(&w, &data, 4);
        let h = 1e-6;
        for t in 0..4 {
            for k in 0..w.tensors()[t].len() {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp.tensors_mut()[t][k] += h;
                wm.tensors_mut()[t][k] -= h;
                let fd = (reconstruction_loss(&wp, &data) - reconstruction_loss(&wm, &data)) / (2.0 * h);
                let an = g.tensors()[t][k];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "tensor {t}[{k}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn ema_decay_extremes() {
        let s = [random_slice(8, 8, 1)];
        let frozen = train_codec(&s, 2, 2, 5, 1.0, 1.0).unwrap();
        let init = pca_init(&patchify(&s[0], 2), 2, 2);
        assert_eq!(frozen.codec.shadow, init);
        assert_ne!(frozen.codec.live, init);

        let mut c = Codec::from_weights(init.clone(), 0.0);
        c.live.enc_b[0] += 1.0;
        c.ema_update();
        assert_eq!(c.shadow, c.live);
    }

    #[test]
    fn zero_lr_leaves_weights_untouched() {
        let s = [random_slice(8, 8, 1)];
        let run = train_codec(&s, 2, 2, 5, 0.0, 0.5).unwrap();
        assert_eq!(run.codec.live, run.codec.shadow);
    }

    #[test]
    fn empty_input_is_error() {
        assert!(train_codec(&[], 4, 8, 1, 0.1, 0.9).is_err());
    }
}
