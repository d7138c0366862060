//! Mask-biased cross-slice attention.
//!
//! Slice `i` attends to the slices `k` with `|i - k| <= r`:
//!
//! ```text
//! α_ik = softmax_k( LReLU( S_ik + w · mask_i · mask_k ) ),   S_ik = cos(h_i, h_k)
//! ```
//!
//! and fused tokens are the α-weighted combination of the attended slices.

use crate::error::{Error, Result};
use crate::linalg::{cosine, cosine_grad_acc};
use crate::tokens::TokenGrid;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const DEFAULT_MASK_WEIGHT: f64 = 1.0;
pub const DEFAULT_RADIUS: usize = 2;

/// A slice summarized by a pooled feature vector and its mean mask weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceFeature {
    pub h: Vec<f64>,
    pub mask: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    pub n: usize,
    pub radius: usize,
    /// Row-major `n x n`; zero outside the window.
    pub weights: Vec<f64>,
    /// Pre-activation logits `S_ik + w mask_i mask_k` inside the window.
    pre: Vec<f64>,
}

impl AttentionMatrix {
    pub fn identity(n: usize) -> Self {
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            weights[i * n + i] = 1.0;
        }
        Self { n, radius: 0, weights, pre: vec![0.0; n * n] }
    }

    /// Builds a matrix from explicit row-stochastic weights.
    pub fn from_weights(n: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != n * n {
            return Err(Error::Shape(format!("{} weights for {n} slices", weights.len())));
        }
        for i in 0..n {
            let row = &weights[i * n..(i + 1) * n];
            if row.iter().any(|&a| !(a >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("row {i} is not a probability vector")));
            }
        }
        Ok(Self { n, radius: n, weights, pre: vec![0.0; n * n] })
    }

    #[inline]
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.weights[i * self.n + k]
    }

    /// Pre-softmax logit `S_ik + w · mask_i · mask_k`; 0 outside the window.
    pub fn logit(&self, i: usize, k: usize) -> f64 {
        self.pre[i * self.n + k]
    }

    fn window(&self, i: usize) -> std::ops::Range<usize> {
        i.saturating_sub(self.radius)..(i + self.radius + 1).min(self.n)
    }
}

fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

/// Cosine similarity of two slice features.
pub fn slice_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("feature lengths {} and {}", a.len(), b.len())));
    }
    cosine(a, b).ok_or_else(|| Error::ZeroNorm {
        index: if crate::linalg::norm(a) == 0.0 { 0 } else { 1 },
    })
}

pub fn cross_slice_weights(features: &[SliceFeature], w: f64, radius: usize) -> Result<AttentionMatrix> {
    let n = features.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cross-slice attention over zero slices".into()));
    }
    if radius < 1 || !w.is_finite() {
        return Err(Error::InvalidArgument(format!("bad window radius {radius} or mask weight {w}")));
    }
    if let Some(index) = features.iter().position(|f| crate::linalg::norm(&f.h) == 0.0) {
        return Err(Error::ZeroNorm { index });
    }
    let mut m = AttentionMatrix { n, radius, weights: vec![0.0; n * n], pre: vec![0.0; n * n] };
    for i in 0..n {
        let window = m.window(i);
        let mut max = f64::NEG_INFINITY;
        for k in window.clone() {
            let s = slice_similarity(&features[i].h, &features[k].h)?;
            let pre = s + w * features[i].mask * features[k].mask;
            m.pre[i * n + k] = pre;
            max = max.max(leaky_relu(pre));
        }
        let mut total = 0.0;
        for k in window.clone() {
            let e = (leaky_relu(m.pre[i * n + k]) - max).exp();
            m.weights[i * n + k] = e;
            total += e;
        }
        for k in window {
            m.weights[i * n + k] /= total;
        }
    }
    Ok(m)
}

/// `fused_i = Σ_k α_ik tokens_k`.
pub fn apply_cross_slice(grids: &[TokenGrid], alpha: &AttentionMatrix) -> Result<Vec<TokenGrid>> {
    if grids.len() != alpha.n {
        return Err(Error::Shape(format!("{} slices for a {}-slice attention matrix", grids.len(), alpha.n)));
    }
    if let Some(g) = grids.iter().find(|g| !g.same_shape(&grids[0])) {
        return grids[0].check_shape(g, "slice token grids").map(|_| Vec::new());
    }
    Ok((0..alpha.n)
        .map(|i| {
            let mut out = TokenGrid::zeros(grids[0].h, grids[0].w, grids[0].c);
            for k in 0..alpha.n {
                let a = alpha.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for (o, x) in out.data.iter_mut().zip(&grids[k].data) {
                    *o += a * x;
                }
            }
            out
        })
        .collect())
}

/// Given `∂L/∂fused`, returns `∂L/∂grids` and `∂L/∂α`.
pub fn apply_cross_slice_backward(
    grids: &[TokenGrid],
    alpha: &AttentionMatrix,
    d_fused: &[TokenGrid],
) -> (Vec<TokenGrid>, Vec<f64>) {
    let n = alpha.n;
    let mut d_grids: Vec<TokenGrid> = grids.iter().map(|g| TokenGrid::zeros(g.h, g.w, g.c)).collect();
    let mut d_alpha = vec![0.0; n * n];
    for i in 0..n {
        for k in alpha.window(i) {
            let a = alpha.get(i, k);
            d_alpha[i * n + k] = crate::linalg::dot(&d_fused[i].data, &grids[k].data);
            for (d, x) in d_grids[k].data.iter_mut().zip(&d_fused[i].data) {
                *d += a * x;
            }
        }
    }
    (d_grids, d_alpha)
}

/// Back-propagates `∂L/∂α` to the pooled slice features.
pub fn cross_slice_weights_backward(features: &[SliceFeature], alpha: &AttentionMatrix, d_alpha: &[f64]) -> Vec<Vec<f64>> {
    let n = alpha.n;
    let mut d_h: Vec<Vec<f64>> = features.iter().map(|f| vec![0.0; f.h.len()]).collect();
    for i in 0..n {
        let window = alpha.window(i);
        let inner: f64 = window.clone().map(|k| alpha.get(i, k) * d_alpha[i * n + k]).sum();
        for k in window {
            if k == i {
                // cos(h, h) is constant.
                continue;
            }
            let d_logit = alpha.get(i, k) * (d_alpha[i * n + k] - inner);
            let pre = alpha.pre[i * n + k];
            let d_pre = d_logit * if pre > 0.0 { 1.0 } else { LEAKY_SLOPE };
            let (hi, hk) = (&features[i].h, &features[k].h);
            let mut gi = vec![0.0; hi.len()];
            let mut gk = vec![0.0; hk.len()];
            cosine_grad_acc(hi, hk, d_pre, &mut gi, &mut gk);
            for (d, g) in d_h[i].iter_mut().zip(&gi) {
                *d += g;
            }
            for (d, g) in d_h[k].iter_mut().zip(&gk) {
                *d += g;
            }
        }
    }
    d_h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat(h: Vec<f64>, mask: f64) -> SliceFeature {
        SliceFeature { h, mask }
    }

    #[test]
    fn similarity_cases() {
        assert!((slice_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(slice_similarity(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
        assert!((slice_similarity(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(slice_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn identical_slices_give_uniform_windows() {
        let f: Vec<_> = (0..6).map(|_| feat(vec![0.3, 0.4], 1.0)).collect();
        let a = cross_slice_weights(&f, 0.7, 2).unwrap();
        for i in 0..6 {
            let width = a.window(i).len() as f64;
            for k in 0..6 {
                let expected = if (i as isize - k as isize).abs() <= 2 { 1.0 / width } else { 0.0 };
                assert!((a.get(i, k) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_slice_attends_to_itself() {
        let a = cross_slice_weights(&[feat(vec![1.0], 0.5)], 1.0, 1).unwrap();
        assert_eq!(a.weights, vec![1.0]);
    }

    #[test]
    fn two_slice_hand_value() {
        // S01 = 0.5, masks (1, 1), w = 0.2: logits LReLU(1.2) on the diagonal
        // and LReLU(0.7) off it.
        let f = [feat(vec![1.0, 0.0], 1.0), feat(vec![0.5, 0.75f64.sqrt()], 1.0)];
        let a = cross_slice_weights(&f, 0.2, 1).unwrap();
        let expected = 1.2f64.exp() / (1.2f64.exp() + 0.7f64.exp());
        assert!((a.get(0, 0) - expected).abs() < 1e-9);
    }

    #[test]
    fn empty_and_invalid_inputs() {
        assert!(cross_slice_weights(&[], 1.0, 1).is_err());
        assert!(cross_slice_weights(&[feat(vec![1.0], 1.0)], 1.0, 0).is_err());
        assert!(matches!(
            cross_slice_weights(&[feat(vec![1.0], 1.0), feat(vec![0.0], 1.0)], 1.0, 1),
            Err(Error::ZeroNorm { index: 1 })
        ));
    }

    #[test]
    fn fusion_cases() {
        let s0 = TokenGrid::new(1, 2, 1, vec![1.0, 2.0]).unwrap();
        let s1 = TokenGrid::new(1, 2, 1, vec![-3.0, 4.0]).unwrap();
        let grids = vec![s0.clone(), s1.clone()];
        assert_eq!(apply_cross_slice(&grids, &AttentionMatrix::identity(2)).unwrap(), grids);

        let same = vec![s0.clone(), s0.clone()];
        let uniform = AttentionMatrix::from_weights(2, vec![0.5; 4]).unwrap();
        assert_eq!(apply_cross_slice(&same, &uniform).unwrap(), same);

        let a = AttentionMatrix::from_weights(2, vec![0.25, 0.75, 0.5, 0.5]).unwrap();
        let fused = apply_cross_slice(&grids, &a).unwrap();
        assert_eq!(fused[0].data, vec![0.25 * 1.0 + 0.75 * -3.0, 0.25 * 2.0 + 0.75 * 4.0]);

        let bad = vec![s0, TokenGrid::zeros(2, 1, 1)];
        assert!(apply_cross_slice(&bad, &a).is_err());
    }

    #[test]
    fn weight_gradient_matches_finite_difference() {
        let f: Vec<_> = (0..4)
            .map(|i| feat(vec![1.0 + i as f64 * 0.3, (i as f64).cos(), -0.2 * i as f64], 0.2 * i as f64 + 0.1))
            .collect();
        let probe: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let objective = |f: &[SliceFeature]| {
            let a = cross_slice_weights(f, 0.8, 2).unwrap();
            a.weights.iter().zip(&probe).map(|(x, p)| x * p).sum::<f64>()
        };
        let a = cross_slice_weights(&f, 0.8, 2).unwrap();
        let d_h = cross_slice_weights_backward(&f, &a, &probe);
        let h = 1e-6;
        for i in 0..4 {
            for k in 0..3 {
                let mut fp = f.clone();
                let mut fm = f.clone();
                fp[i].h[k] += h;
                fm[i].h[k] -= h;
                let fd = (objective(&fp) - objective(&fm)) / (2.0 * h);
                assert!((fd - d_h[i][k]).abs() < 1e-7, "{i},{k}: {fd} vs {}", d_h[i][k]);
            }
        }
    }
}
