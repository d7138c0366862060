use rand::Rng;
use rayon::prelude::*;

use crate::attention::{
    apply_cross_slice, apply_cross_slice_backward, cross_slice_weights, cross_slice_weights_backward, AttentionMatrix,
    SliceFeature,
};
use crate::embedder::ConditionEmbedding;
use crate::error::{Error, Result};
use crate::linalg::{all_finite, identity, matvec, matvec_t_acc, outer_acc};
use crate::scan::{tree_scan_backward, tree_scan_forward_offset, ScanMode, ScanParams, ScanState};
use crate::tokens::TokenGrid;

use super::NoiseSchedule;

const NORM_EPS: f64 = 1e-5;

/// Additive offsets on the hidden states, indexed `[block][slice]`.
pub type HiddenOffsets = Vec<Vec<Vec<f64>>>;

/// Anything that maps a noised slice stack at step `t` to a clean estimate.
pub trait Denoise {
    fn denoise(&self, z_t: &[TokenGrid], t: usize, cond: &[ConditionEmbedding]) -> Result<Vec<TokenGrid>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    /// `c x c`
    pub linear_w: Vec<f64>,
    pub linear_b: Vec<f64>,
    /// Depthwise 3x3 kernels, `c x 9`, taps row-major.
    pub conv: Vec<f64>,
    pub scan: ScanParams,
    pub norm_gain: Vec<f64>,
    pub norm_shift: Vec<f64>,
}

impl BlockParams {
    fn zeros(c: usize) -> Self {
        Self {
            linear_w: vec![0.0; c * c],
            linear_b: vec![0.0; c],
            conv: vec![0.0; c * 9],
            scan: ScanParams::zeros(c),
            norm_gain: vec![0.0; c],
            norm_shift: vec![0.0; c],
        }
    }

    /// Near-identity maps with a zeroed normalization gain, so the block
    /// starts as the identity.
    fn init(c: usize, lambda: f64, rng: &mut impl Rng) -> Self {
        let mut b = Self::zeros(c);
        b.linear_w = identity(c);
        b.linear_w.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        for ch in 0..c {
            for tap in 0..9 {
                b.conv[ch * 9 + tap] = if tap == 4 { 1.0 } else { rng.random_range(-0.1..0.1) };
            }
        }
        b.scan = ScanParams::skip_identity(c, lambda);
        b.scan.a.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        b
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![&self.linear_w, &self.linear_b, &self.conv];
        v.extend(self.scan.tensors());
        v.push(&self.norm_gain);
        v.push(&self.norm_shift);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![&mut self.linear_w, &mut self.linear_b, &mut self.conv];
        v.extend(self.scan.tensors_mut());
        v.push(&mut self.norm_gain);
        v.push(&mut self.norm_shift);
        v
    }

    const NAMES: [&'static str; 10] =
        ["linear_w", "linear_b", "conv", "scan.a", "scan.b", "scan.c", "scan.d", "scan.lambda", "norm_gain", "norm_shift"];
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub channels: usize,
    pub blocks: Vec<BlockParams>,
    /// `T x c`; row `t - 1` is added after each block's linear map.
    pub time_embed: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
    /// Exponent `k` of the input gain `α_t^k` (one value).
    pub input_exp: Vec<f64>,
    /// Exponent `k'` of the residual-branch gain `(1 - α_t)^k'` (one value).
    /// Both exponents start at 0, where the gains are 1; training can learn
    /// to attenuate noised inputs and to quiet the branches near `t = 1`.
    pub branch_exp: Vec<f64>,
    /// Schedule coefficients the input gain is evaluated at; not trained.
    pub alphas: Vec<f64>,
    pub attn_weight: f64,
    pub attn_radius: usize,
    pub mode: ScanMode,
}

impl DenoiserParams {
    /// Identity-initialized model: every block's residual branch is zero and
    /// the head is the identity, so the output equals the input.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        channels: usize,
        schedule: &NoiseSchedule,
        n_blocks: usize,
        lambda: f64,
        attn_weight: f64,
        attn_radius: usize,
        mode: ScanMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let steps = schedule.steps();
        if channels == 0 || n_blocks == 0 {
            return Err(Error::InvalidArgument("denoiser needs channels, steps and blocks".into()));
        }
        let blocks = (0..n_blocks).map(|_| BlockParams::init(channels, lambda, rng)).collect();
        let time_embed = (0..steps * channels).map(|_| rng.random_range(-0.1..0.1)).collect();
        let p = Self {
            channels,
            blocks,
            time_embed,
            head_w: identity(channels),
            head_b: vec![0.0; channels],
            input_exp: vec![0.0],
            branch_exp: vec![0.0],
            alphas: schedule.alphas().to_vec(),
            attn_weight,
            attn_radius,
            mode,
        };
        p.validate()?;
        Ok(p)
    }

    /// Same shapes and hyperparameters, every trainable value zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    pub fn steps(&self) -> usize {
        self.time_embed.len() / self.channels
    }

    /// Block whose output feeds block `j` through a long skip.
    pub fn skip_partner(&self, j: usize) -> usize {
        self.blocks.len() - 1 - j
    }

    /// `α_t^k`, the factor applied to the noised input.
    pub fn input_gain(&self, t: usize) -> f64 {
        self.alphas[t - 1].powf(self.input_exp[0])
    }

    /// `(1 - α_t)^k'`, the factor applied to every residual branch.
    pub fn branch_gain(&self, t: usize) -> f64 {
        (1.0 - self.alphas[t - 1]).powf(self.branch_exp[0])
    }

    fn receives_skip(&self, j: usize) -> bool {
        self.skip_partner(j) < j
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.blocks.iter().flat_map(|b| b.tensors()).collect();
        v.extend([&self.time_embed[..], &self.head_w[..], &self.head_b[..], &self.input_exp[..], &self.branch_exp[..]]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.blocks.iter_mut().flat_map(|b| b.tensors_mut()).collect();
        v.extend([&mut self.time_embed[..], &mut self.head_w[..], &mut self.head_b[..], &mut self.input_exp[..], &mut self.branch_exp[..]]);
        v
    }

    /// Names matching [`Self::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.blocks.len())
            .flat_map(|j| BlockParams::NAMES.iter().map(move |n| format!("block{j}.{n}")))
            .collect();
        names.extend(["time_embed", "head_w", "head_b", "input_exp", "branch_exp"].map(String::from));
        names
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if self.blocks.is_empty() || self.time_embed.is_empty() || !self.time_embed.len().is_multiple_of(c) {
            return Err(Error::Shape("denoiser blocks or time embedding".into()));
        }
        for b in &self.blocks {
            let shapes = [b.linear_w.len(), b.linear_b.len(), b.conv.len(), b.norm_gain.len(), b.norm_shift.len()];
            if shapes != [c * c, c, 9 * c, c, c] || b.scan.channels != c {
                return Err(Error::Shape(format!("block shapes {shapes:?} for {c} channels")));
            }
            b.scan.validate()?;
        }
        if self.head_w.len() != c * c || self.head_b.len() != c || self.input_exp.len() != 1 || self.branch_exp.len() != 1 {
            return Err(Error::Shape("denoiser head".into()));
        }
        if self.alphas.len() != self.steps() || self.alphas.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::InvalidArgument("input-gain schedule must match the time embedding".into()));
        }
        if !self.tensors().iter().all(|t| all_finite(t)) {
            return Err(Error::InvalidArgument("denoiser parameters are not finite".into()));
        }
        if self.attn_radius < 1 || !self.attn_weight.is_finite() {
            return Err(Error::InvalidArgument("attention radius or mask weight".into()));
        }
        Ok(())
    }

    /// Runs the network on a slice stack. `offsets` adds to each block's
    /// hidden states (used to differentiate the scan loss).
    pub fn forward(
        &self,
        z_t: &[TokenGrid],
        t: usize,
        cond: &[ConditionEmbedding],
        offsets: Option<&HiddenOffsets>,
    ) -> Result<(Vec<TokenGrid>, ForwardCache)> {
        self.validate()?;
        if z_t.is_empty() || cond.len() != z_t.len() {
            return Err(Error::Shape(format!("{} slices with {} conditions", z_t.len(), cond.len())));
        }
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!("step {t} outside 1..={}", self.steps())));
        }
        for (z, k) in z_t.iter().zip(cond) {
            z_t[0].check_shape(z, "slice grids")?;
            if z.c != self.channels {
                return Err(Error::Shape(format!("latent has {} channels, denoiser {}", z.c, self.channels)));
            }
            z.check_shape(&k.tokens, "condition tokens vs latent")?;
        }
        if let Some(off) = offsets {
            if off.len() != self.blocks.len() || off.iter().any(|o| o.len() != z_t.len()) {
                return Err(Error::Shape("hidden offsets".into()));
            }
        }
        let gain = self.input_gain(t);
        let scaled_input: Vec<TokenGrid> = z_t.iter().map(|z| scaled(z, gain)).collect();
        let mut outputs: Vec<Vec<TokenGrid>> = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for j in 0..self.blocks.len() {
            let prev = outputs.last().map_or(scaled_input.as_slice(), |o| o.as_slice());
            let input: Vec<TokenGrid> = if self.receives_skip(j) {
                let skip = &outputs[self.skip_partner(j)];
                prev.iter().zip(skip).map(|(a, b)| average(a, b)).collect()
            } else {
                prev.to_vec()
            };
            let off = offsets.map(|o| o[j].as_slice());
            let (out, cache) = self.block_forward(j, input, t, cond, off)?;
            outputs.push(out);
            caches.push(cache);
        }
        let last = outputs.pop().expect("at least one block");
        let pred = last.iter().map(|x| affine(&self.head_w, &self.head_b, x, None)).collect();
        Ok((pred, ForwardCache { t, input: z_t.to_vec(), blocks: caches, last }))
    }

    fn block_forward(
        &self,
        j: usize,
        input: Vec<TokenGrid>,
        t: usize,
        cond: &[ConditionEmbedding],
        offsets: Option<&[Vec<f64>]>,
    ) -> Result<(Vec<TokenGrid>, BlockCache)> {
        let p = &self.blocks[j];
        let branch = self.branch_gain(t);
        let temb = &self.time_embed[(t - 1) * self.channels..t * self.channels];
        let per_slice = input
            .par_iter()
            .enumerate()
            .map(|(s, x)| {
                let a = affine(&p.linear_w, &p.linear_b, x, Some(temb));
                let b = depthwise_conv(&p.conv, &a);
                let off = offsets.map(|o| o[s].as_slice());
                let (y, state) = tree_scan_forward_offset(&b, Some(&cond[s]), &p.scan, self.mode, off)?;
                Ok((a, y, state))
            })
            .collect::<Result<Vec<_>>>()?;
        let (mut pre_conv, mut scanned, mut states) = (vec![], vec![], vec![]);
        for (a, y, st) in per_slice {
            pre_conv.push(a);
            scanned.push(y);
            states.push(st);
        }
        let features: Vec<SliceFeature> = states
            .iter()
            .zip(cond)
            .map(|(st, k)| SliceFeature { h: mean_rows(&st.h, self.channels), mask: k.mean_mask() })
            .collect();
        let alpha = cross_slice_weights(&features, self.attn_weight, self.attn_radius)?;
        let fused = apply_cross_slice(&scanned, &alpha)?;
        let mut normed = Vec::with_capacity(fused.len());
        let mut inv_std = Vec::with_capacity(fused.len());
        let mut out = Vec::with_capacity(fused.len());
        for (f, x) in fused.iter().zip(&input) {
            let (n, s) = layer_norm(f);
            let mut o = x.clone();
            for i in 0..o.len() {
                for ch in 0..o.c {
                    o.data[i * o.c + ch] += branch * (p.norm_gain[ch] * n.data[i * o.c + ch] + p.norm_shift[ch]);
                }
            }
            normed.push(n);
            inv_std.push(s);
            out.push(o);
        }
        Ok((out, BlockCache { input, pre_conv, scanned, states, features, alpha, normed, inv_std }))
    }

    /// Reverse-mode gradient of `Σ d_pred ⊙ pred`. Returns the parameter
    /// gradient and `η = ∂L/∂h` per block and slice.
    pub fn backward(&self, cache: &ForwardCache, d_pred: &[TokenGrid]) -> Result<(DenoiserParams, HiddenOffsets)> {
        if d_pred.len() != cache.last.len() {
            return Err(Error::Shape("prediction gradient slice count".into()));
        }
        let c = self.channels;
        let mut grad = self.zeros_like();
        let mut d_cur: Vec<TokenGrid> = Vec::with_capacity(d_pred.len());
        for (d, x) in d_pred.iter().zip(&cache.last) {
            x.check_shape(d, "prediction gradient")?;
            let mut dx = TokenGrid::zeros(x.h, x.w, c);
            for i in 0..x.len() {
                outer_acc(&mut grad.head_w, d.token(i), x.token(i));
                for (b, v) in grad.head_b.iter_mut().zip(d.token(i)) {
                    *b += v;
                }
                matvec_t_acc(&self.head_w, c, c, d.token(i), dx.token_mut(i));
            }
            d_cur.push(dx);
        }
        let n_b = self.blocks.len();
        let mut skip_grad: Vec<Option<Vec<TokenGrid>>> = vec![None; n_b];
        let mut eta = vec![Vec::new(); n_b];
        for j in (0..n_b).rev() {
            if let Some(extra) = skip_grad[j].take() {
                for (d, e) in d_cur.iter_mut().zip(&extra) {
                    add_assign(d, e, 1.0);
                }
            }
            let (d_in, block_eta) = self.block_backward(j, &cache.blocks[j], cache.t, &d_cur, &mut grad)?;
            eta[j] = block_eta;
            if self.receives_skip(j) {
                let half: Vec<TokenGrid> = d_in.iter().map(|d| scaled(d, 0.5)).collect();
                skip_grad[self.skip_partner(j)] = Some(half.clone());
                d_cur = half;
            } else {
                d_cur = d_in;
            }
        }
        let gain = self.input_gain(cache.t);
        let ln_alpha = self.alphas[cache.t - 1].ln();
        grad.input_exp[0] = d_cur
            .iter()
            .zip(&cache.input)
            .map(|(d, z)| d.data.iter().zip(&z.data).map(|(a, b)| a * b).sum::<f64>())
            .sum::<f64>()
            * gain
            * ln_alpha;
        Ok((grad, eta))
    }

    fn block_backward(
        &self,
        j: usize,
        cache: &BlockCache,
        t: usize,
        d_out: &[TokenGrid],
        grad: &mut DenoiserParams,
    ) -> Result<(Vec<TokenGrid>, Vec<Vec<f64>>)> {
        let c = self.channels;
        let p = &self.blocks[j];
        let n = d_out.len();
        let branch = self.branch_gain(t);
        let mut d_fused = Vec::with_capacity(n);
        let mut d_branch_gain = 0.0;
        {
            let g = &mut grad.blocks[j];
            for s in 0..n {
                let (d, nrm) = (&d_out[s], &cache.normed[s]);
                let mut dn = TokenGrid::zeros(d.h, d.w, c);
                for i in 0..d.len() {
                    for ch in 0..c {
                        let k = i * c + ch;
                        d_branch_gain += d.data[k] * (p.norm_gain[ch] * nrm.data[k] + p.norm_shift[ch]);
                        let db = branch * d.data[k];
                        g.norm_gain[ch] += db * nrm.data[k];
                        g.norm_shift[ch] += db;
                        dn.data[k] = db * p.norm_gain[ch];
                    }
                }
                d_fused.push(layer_norm_backward(nrm, &cache.inv_std[s], &dn));
            }
        }
        grad.branch_exp[0] += d_branch_gain * branch * (1.0 - self.alphas[t - 1]).ln();
        let (d_scanned, d_alpha) = apply_cross_slice_backward(&cache.scanned, &cache.alpha, &d_fused);
        let d_feat = cross_slice_weights_backward(&cache.features, &cache.alpha, &d_alpha);

        let per_slice = (0..n)
            .into_par_iter()
            .map(|s| {
                let state = &cache.states[s];
                let l = state.h.len() / c;
                let mut extra = vec![0.0; l * c];
                for i in 0..l {
                    for ch in 0..c {
                        extra[i * c + ch] = d_feat[s][ch] / l as f64;
                    }
                }
                let sg = tree_scan_backward(state, &p.scan, &d_scanned[s], Some(&extra))?;
                let mut local = BlockParams::zeros(c);
                local.scan = sg.params;
                let d_pre = depthwise_conv_backward(&p.conv, &cache.pre_conv[s], &sg.dx, &mut local.conv);
                let x = &cache.input[s];
                let mut dx = d_out[s].clone();
                let mut dtemb = vec![0.0; c];
                for i in 0..x.len() {
                    let da = d_pre.token(i);
                    outer_acc(&mut local.linear_w, da, x.token(i));
                    for ch in 0..c {
                        local.linear_b[ch] += da[ch];
                        dtemb[ch] += da[ch];
                    }
                    matvec_t_acc(&p.linear_w, c, c, da, dx.token_mut(i));
                }
                Ok((local, dtemb, dx, sg.eta))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut d_in = Vec::with_capacity(n);
        let mut etas = Vec::with_capacity(n);
        for (local, dtemb, dx, e) in per_slice {
            for (acc, part) in grad.blocks[j].tensors_mut().into_iter().zip(local.tensors()) {
                for (a, b) in acc.iter_mut().zip(part) {
                    *a += b;
                }
            }
            for (a, b) in grad.time_embed[(t - 1) * c..t * c].iter_mut().zip(&dtemb) {
                *a += b;
            }
            d_in.push(dx);
            etas.push(e);
        }
        Ok((d_in, etas))
    }
}

impl Denoise for DenoiserParams {
    fn denoise(&self, z_t: &[TokenGrid], t: usize, cond: &[ConditionEmbedding]) -> Result<Vec<TokenGrid>> {
        Ok(self.forward(z_t, t, cond, None)?.0)
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    t: usize,
    input: Vec<TokenGrid>,
    blocks: Vec<BlockCache>,
    last: Vec<TokenGrid>,
}

impl ForwardCache {
    /// Block hidden states, `[block][slice]`, each `L x c`.
    pub fn hidden_states(&self) -> HiddenOffsets {
        self.blocks.iter().map(|b| b.states.iter().map(|s| s.h.clone()).collect()).collect()
    }

    /// Cross-slice attention matrix of each block.
    pub fn attention(&self) -> Vec<&AttentionMatrix> {
        self.blocks.iter().map(|b| &b.alpha).collect()
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Vec<TokenGrid>,
    pre_conv: Vec<TokenGrid>,
    scanned: Vec<TokenGrid>,
    states: Vec<ScanState>,
    features: Vec<SliceFeature>,
    alpha: AttentionMatrix,
    normed: Vec<TokenGrid>,
    inv_std: Vec<Vec<f64>>,
}

fn average(a: &TokenGrid, b: &TokenGrid) -> TokenGrid {
    let data = a.data.iter().zip(&b.data).map(|(x, y)| 0.5 * (x + y)).collect();
    TokenGrid { data, ..a.clone() }
}

fn scaled(a: &TokenGrid, k: f64) -> TokenGrid {
    TokenGrid { data: a.data.iter().map(|v| v * k).collect(), ..a.clone() }
}

fn add_assign(a: &mut TokenGrid, b: &TokenGrid, k: f64) {
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += k * y;
    }
}

fn mean_rows(m: &[f64], c: usize) -> Vec<f64> {
    let rows = m.len() / c;
    let mut out = vec![0.0; c];
    for r in 0..rows {
        for ch in 0..c {
            out[ch] += m[r * c + ch];
        }
    }
    out.iter_mut().for_each(|v| *v /= rows as f64);
    out
}

/// `W x_i + b (+ extra)` per token.
fn affine(w: &[f64], b: &[f64], x: &TokenGrid, extra: Option<&[f64]>) -> TokenGrid {
    let c = b.len();
    let mut out = TokenGrid::zeros(x.h, x.w, c);
    for i in 0..x.len() {
        let o = out.token_mut(i);
        matvec(w, c, x.c, x.token(i), o);
        for ch in 0..c {
            o[ch] += b[ch] + extra.map_or(0.0, |e| e[ch]);
        }
    }
    out
}

/// Per-channel 3x3 convolution with zero padding.
fn depthwise_conv(kernel: &[f64], a: &TokenGrid) -> TokenGrid {
    let mut out = TokenGrid::zeros(a.h, a.w, a.c);
    for r in 0..a.h {
        for q in 0..a.w {
            for (tap, (dr, dq)) in taps() {
                let (rr, qq) = (r as isize + dr, q as isize + dq);
                if rr < 0 || qq < 0 || rr >= a.h as isize || qq >= a.w as isize {
                    continue;
                }
                let src = (rr as usize * a.w + qq as usize) * a.c;
                let dst = (r * a.w + q) * a.c;
                for ch in 0..a.c {
                    out.data[dst + ch] += kernel[ch * 9 + tap] * a.data[src + ch];
                }
            }
        }
    }
    out
}

fn depthwise_conv_backward(kernel: &[f64], a: &TokenGrid, d_out: &TokenGrid, d_kernel: &mut [f64]) -> TokenGrid {
    let mut da = TokenGrid::zeros(a.h, a.w, a.c);
    for r in 0..a.h {
        for q in 0..a.w {
            for (tap, (dr, dq)) in taps() {
                let (rr, qq) = (r as isize + dr, q as isize + dq);
                if rr < 0 || qq < 0 || rr >= a.h as isize || qq >= a.w as isize {
                    continue;
                }
                let src = (rr as usize * a.w + qq as usize) * a.c;
                let dst = (r * a.w + q) * a.c;
                for ch in 0..a.c {
                    d_kernel[ch * 9 + tap] += d_out.data[dst + ch] * a.data[src + ch];
                    da.data[src + ch] += kernel[ch * 9 + tap] * d_out.data[dst + ch];
                }
            }
        }
    }
    da
}

fn taps() -> impl Iterator<Item = (usize, (isize, isize))> {
    (0..9).map(|k| (k, (k as isize / 3 - 1, k as isize % 3 - 1)))
}

/// Normalizes each token over its channels; returns the normalized grid and
/// `1 / σ` per token.
fn layer_norm(x: &TokenGrid) -> (TokenGrid, Vec<f64>) {
    let c = x.c as f64;
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let tok = out.token_mut(i);
        let mean = tok.iter().sum::<f64>() / c;
        let var = tok.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        let s = 1.0 / (var + NORM_EPS).sqrt();
        tok.iter_mut().for_each(|v| *v = (*v - mean) * s);
        inv.push(s);
    }
    (out, inv)
}

fn layer_norm_backward(normed: &TokenGrid, inv_std: &[f64], dn: &TokenGrid) -> TokenGrid {
    let c = normed.c as f64;
    let mut dx = TokenGrid::zeros(normed.h, normed.w, normed.c);
    for i in 0..normed.len() {
        let (n, d) = (normed.token(i), dn.token(i));
        let mean_d = d.iter().sum::<f64>() / c;
        let mean_dn = d.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / c;
        for (k, o) in dx.token_mut(i).iter_mut().enumerate() {
            *o = inv_std[i] * (d[k] - mean_d - n[k] * mean_dn);
        }
    }
    dx
}
