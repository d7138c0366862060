//! Tree-structured state-space scan.
//!
//! Tokens of a grid are connected to their 4-neighbors, the graph is pruned to
//! its minimum spanning tree under cosine distance, and every node aggregates
//! the projected inputs of *all* nodes, attenuated by the product of edge
//! gates along the connecting tree path:
//!
//! ```text
//! h_i = Σ_j G(i, j) · B x_j,   G(i, j) = Π_{e ∈ path(i, j)} g(e),   g(e) = exp(-λ w(e))
//! y_i = C (A h_i + D x_i)
//! ```
//!
//! `h` is computed in linear time by an upward (leaf-to-root) accumulation
//! followed by a downward redistribution. Because `G` is symmetric, the same
//! two passes applied to `∂L/∂h` give `∂L/∂(B x)`.

mod graph;
mod mst;

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;

pub use graph::{build_grid_graph, Edge, FeatureGraph};
pub use mst::{kruskal_mst, parse_edge_list, DisjointSets, SpanningTree};

use crate::embedder::ConditionEmbedding;
use crate::error::{Error, Result};
use crate::linalg::{all_finite, cosine_grad_acc, identity, matvec, matvec_t_acc, outer_acc};
use crate::tokens::TokenGrid;

/// Floor of the mask factor applied to gates, so non-vascular regions stay
/// coupled.
pub const MASK_GATE_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ScanParams {
    /// Token channels `c`. The output formula adds `A h` to `D x`, so the
    /// state size equals `c`.
    pub channels: usize,
    /// `c x c`
    pub a: Vec<f64>,
    /// `c x c`
    pub b: Vec<f64>,
    /// `c x c`
    pub c: Vec<f64>,
    /// `c x c`
    pub d: Vec<f64>,
    /// Gate sharpness λ > 0.
    pub lambda: f64,
}

impl ScanParams {
    pub fn zeros(channels: usize) -> Self {
        let n = channels * channels;
        Self { channels, a: vec![0.0; n], b: vec![0.0; n], c: vec![0.0; n], d: vec![0.0; n], lambda: 0.0 }
    }

    /// `A = 0`, `B = C = D = I`: the output reproduces the (conditioned) input.
    pub fn skip_identity(channels: usize, lambda: f64) -> Self {
        Self {
            channels,
            a: vec![0.0; channels * channels],
            b: identity(channels),
            c: identity(channels),
            d: identity(channels),
            lambda,
        }
    }

    pub fn random(channels: usize, lambda: f64, scale: f64, rng: &mut impl Rng) -> Self {
        let n = channels * channels;
        let mut draw = || (0..n).map(|_| rng.random_range(-scale..scale)).collect::<Vec<f64>>();
        Self { channels, a: draw(), b: draw(), c: draw(), d: draw(), lambda }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels * self.channels;
        if [&self.a, &self.b, &self.c, &self.d].iter().any(|m| m.len() != n) {
            return Err(Error::Shape(format!("scan matrices must be {0}x{0}", self.channels)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("gate sharpness must be > 0, got {}", self.lambda)));
        }
        if ![&self.a, &self.b, &self.c, &self.d].iter().all(|m| all_finite(m)) {
            return Err(Error::InvalidArgument("scan matrices contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&[f64]; 5] {
        [&self.a, &self.b, &self.c, &self.d, std::slice::from_ref(&self.lambda)]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [&mut self.a, &mut self.b, &mut self.c, &mut self.d, std::slice::from_mut(&mut self.lambda)]
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.channels.hash(&mut h);
        for t in self.tensors() {
            for v in t {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// How hidden states are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScanMode {
    /// Minimum-spanning-tree path-product aggregation.
    #[default]
    Tree,
    /// Each token sees only itself (`h_i = B x_i`); the ablation baseline.
    Identity,
}

/// `exp(-λ w)` for every non-root node's parent edge (root entry is 1).
pub fn edge_gates(tree: &SpanningTree, lambda: f64) -> Vec<f64> {
    (0..tree.len())
        .map(|v| if tree.parent[v].is_some() { (-lambda * tree.parent_weight[v]).exp() } else { 1.0 })
        .collect()
}

/// Mask factor `ε + (1 - ε) sqrt(M_i M_j)` for each parent edge.
fn mask_factors(tree: &SpanningTree, mask: &[f64]) -> Vec<f64> {
    (0..tree.len())
        .map(|v| match tree.parent[v] {
            Some(p) => MASK_GATE_FLOOR + (1.0 - MASK_GATE_FLOOR) * (mask[v] * mask[p]).sqrt(),
            None => 1.0,
        })
        .collect()
}

/// Upward then downward pass: returns `(up, h)` where `up_i` aggregates the
/// subtree of `i` and `h_i = Σ_j G(i, j) u_j`. `u` is `L x k` row-major.
fn two_pass(tree: &SpanningTree, gates: &[f64], u: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut up = u.to_vec();
    for &v in &tree.leaf_to_root {
        if let Some(p) = tree.parent[v] {
            let g = gates[v];
            for ch in 0..k {
                up[p * k + ch] += g * up[v * k + ch];
            }
        }
    }
    let mut h = up.clone();
    for &v in tree.leaf_to_root.iter().rev() {
        if let Some(p) = tree.parent[v] {
            let g = gates[v];
            for ch in 0..k {
                h[v * k + ch] = g * h[p * k + ch] + (1.0 - g * g) * up[v * k + ch];
            }
        }
    }
    (up, h)
}

fn project(x: &TokenGrid, m: &[f64], rows: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len() * rows];
    for i in 0..x.len() {
        matvec(m, rows, x.c, x.token(i), &mut out[i * rows..(i + 1) * rows]);
    }
    out
}

/// `h = Σ_j G(i, j) B x_j` with `g(e) = exp(-λ w(e))`.
pub fn tree_aggregate(tree: &SpanningTree, x: &TokenGrid, params: &ScanParams) -> Result<Vec<f64>> {
    if tree.len() != x.len() || x.c != params.channels {
        return Err(Error::Shape(format!(
            "tree over {} nodes, grid with {} tokens of {} channels, params for {} channels",
            tree.len(),
            x.len(),
            x.c,
            params.channels
        )));
    }
    let gates = edge_gates(tree, params.lambda);
    let u = project(x, &params.b, params.channels);
    Ok(two_pass(tree, &gates, &u, params.channels).1)
}

/// Everything the backward pass needs from a forward evaluation.
#[derive(Debug, Clone)]
pub struct ScanState {
    mode: ScanMode,
    /// Input after conditioning (`x + T`).
    pub x_cond: TokenGrid,
    tree: Option<SpanningTree>,
    mask: Option<Vec<f64>>,
    base_gates: Vec<f64>,
    mask_factor: Vec<f64>,
    pub gates: Vec<f64>,
    up: Vec<f64>,
    /// Hidden states `L x c`, including any additive offset.
    pub h: Vec<f64>,
    /// Tree aggregate without the offset.
    h_agg: Vec<f64>,
    fingerprint: u64,
}

impl ScanState {
    pub fn tree(&self) -> Option<&SpanningTree> {
        self.tree.as_ref()
    }
}

/// `y_i = C (A h_i + D x_i)` after fusing the condition: `T` is added to `x`
/// before the graph is built, and `M` scales each gate by the mask factor.
pub fn tree_scan_forward(
    x: &TokenGrid,
    cond: Option<&ConditionEmbedding>,
    params: &ScanParams,
    mode: ScanMode,
) -> Result<(TokenGrid, ScanState)> {
    tree_scan_forward_offset(x, cond, params, mode, None)
}

/// As [`tree_scan_forward`], with `h_offset` (if given) added to the hidden
/// states before the output map. Used to differentiate the scan loss.
pub fn tree_scan_forward_offset(
    x: &TokenGrid,
    cond: Option<&ConditionEmbedding>,
    params: &ScanParams,
    mode: ScanMode,
    h_offset: Option<&[f64]>,
) -> Result<(TokenGrid, ScanState)> {
    params.validate()?;
    let c = params.channels;
    if x.c != c {
        return Err(Error::Shape(format!("grid has {} channels, scan expects {c}", x.c)));
    }
    let l = x.len();
    let mut x_cond = x.clone();
    let mut mask = None;
    if let Some(cond) = cond {
        x.check_shape(&cond.tokens, "condition tokens vs scan input")?;
        for (v, t) in x_cond.data.iter_mut().zip(&cond.tokens.data) {
            *v += t;
        }
        mask = Some(cond.mask.clone());
    }
    if let Some(off) = h_offset {
        if off.len() != l * c {
            return Err(Error::Shape("hidden-state offset length".into()));
        }
    }

    let u = project(&x_cond, &params.b, c);
    let (tree, base_gates, mask_factor, gates, up, mut h) = match mode {
        ScanMode::Tree => {
            let tree = kruskal_mst(&build_grid_graph(&x_cond)?)?;
            let base = edge_gates(&tree, params.lambda);
            let factor = match &mask {
                Some(m) => mask_factors(&tree, m),
                None => vec![1.0; l],
            };
            let gates: Vec<f64> = base.iter().zip(&factor).map(|(b, f)| b * f).collect();
            let (up, h) = two_pass(&tree, &gates, &u, c);
            (Some(tree), base, factor, gates, up, h)
        }
        ScanMode::Identity => (None, Vec::new(), Vec::new(), Vec::new(), u.clone(), u.clone()),
    };
    let h_agg = h.clone();
    if let Some(off) = h_offset {
        for (hv, o) in h.iter_mut().zip(off) {
            *hv += o;
        }
    }

    let mut y = TokenGrid::zeros(x.h, x.w, c);
    let mut v = vec![0.0; c];
    let mut dx = vec![0.0; c];
    for i in 0..l {
        matvec(&params.a, c, c, &h[i * c..(i + 1) * c], &mut v);
        matvec(&params.d, c, c, x_cond.token(i), &mut dx);
        for (a, b) in v.iter_mut().zip(&dx) {
            *a += b;
        }
        matvec(&params.c, c, c, &v, y.token_mut(i));
    }
    let state = ScanState {
        mode,
        x_cond,
        tree,
        mask,
        base_gates,
        mask_factor,
        gates,
        up,
        h,
        h_agg,
        fingerprint: params.fingerprint(),
    };
    Ok((y, state))
}

#[derive(Debug, Clone)]
pub struct ScanGrads {
    /// `∂L/∂x`; equal to `∂L/∂T` when a condition was fused.
    pub dx: TokenGrid,
    /// `∂L/∂M` per token (zero without a condition).
    pub dmask: Vec<f64>,
    pub params: ScanParams,
    /// `η_i = ∂L/∂h_i`, `L x c`.
    pub eta: Vec<f64>,
}

/// Exact reverse-mode differential of [`tree_scan_forward`].
///
/// `dh_extra` adds gradient that reaches `h` through paths outside this
/// operator (e.g. slice pooling). The tree topology is treated as fixed,
/// which is exact wherever the minimum spanning tree is unique.
pub fn tree_scan_backward(
    state: &ScanState,
    params: &ScanParams,
    dy: &TokenGrid,
    dh_extra: Option<&[f64]>,
) -> Result<ScanGrads> {
    if params.fingerprint() != state.fingerprint {
        return Err(Error::StaleCache);
    }
    let c = params.channels;
    let x = &state.x_cond;
    x.check_shape(dy, "output gradient vs scan input")?;
    let l = x.len();
    let mut g = ScanParams::zeros(c);
    let mut dx = TokenGrid::zeros(x.h, x.w, c);
    let mut eta = vec![0.0; l * c];
    let mut v = vec![0.0; c];
    let mut tmp = vec![0.0; c];
    let mut q = vec![0.0; c];
    for i in 0..l {
        let hi = &state.h[i * c..(i + 1) * c];
        let xi = x.token(i);
        matvec(&params.a, c, c, hi, &mut v);
        matvec(&params.d, c, c, xi, &mut tmp);
        for (a, b) in v.iter_mut().zip(&tmp) {
            *a += b;
        }
        let dyi = dy.token(i);
        outer_acc(&mut g.c, dyi, &v);
        q.iter_mut().for_each(|x| *x = 0.0);
        matvec_t_acc(&params.c, c, c, dyi, &mut q);
        outer_acc(&mut g.a, &q, hi);
        outer_acc(&mut g.d, &q, xi);
        matvec_t_acc(&params.a, c, c, &q, &mut eta[i * c..(i + 1) * c]);
        matvec_t_acc(&params.d, c, c, &q, dx.token_mut(i));
    }
    if let Some(extra) = dh_extra {
        if extra.len() != eta.len() {
            return Err(Error::Shape("extra hidden-state gradient length".into()));
        }
        for (e, x) in eta.iter_mut().zip(extra) {
            *e += x;
        }
    }

    let mut dmask = vec![0.0; l];
    let du = match (state.mode, &state.tree) {
        (ScanMode::Tree, Some(tree)) => {
            let (up_eta, du) = two_pass(tree, &state.gates, &eta, c);
            for (node, &p) in tree.parent.iter().enumerate() {
                let Some(p) = p else { continue };
                let gate = state.gates[node];
                let mut dgate = 0.0;
                for ch in 0..c {
                    let (ni, pi) = (node * c + ch, p * c + ch);
                    let outside_u = state.h_agg[pi] - gate * state.up[ni];
                    let outside_eta = du[pi] - gate * up_eta[ni];
                    dgate += up_eta[ni] * outside_u + state.up[ni] * outside_eta;
                }
                let base = state.base_gates[node];
                let factor = state.mask_factor[node];
                let dbase = dgate * factor;
                g.lambda += dbase * (-tree.parent_weight[node] * base);
                let dweight = dbase * (-params.lambda * base);
                // weight = 1 - cos(x_node, x_parent)
                let (xa, xb) = (x.token(node).to_vec(), x.token(p).to_vec());
                let mut ga = vec![0.0; c];
                let mut gb = vec![0.0; c];
                cosine_grad_acc(&xa, &xb, -dweight, &mut ga, &mut gb);
                for ch in 0..c {
                    dx.data[node * c + ch] += ga[ch];
                    dx.data[p * c + ch] += gb[ch];
                }
                if let Some(mask) = &state.mask {
                    let prod = mask[node] * mask[p];
                    if prod > 0.0 {
                        let dfactor = dgate * base * (1.0 - MASK_GATE_FLOOR) / (2.0 * prod.sqrt());
                        dmask[node] += dfactor * mask[p];
                        dmask[p] += dfactor * mask[node];
                    }
                }
            }
            du
        }
        _ => eta.clone(),
    };
    for i in 0..l {
        let dui = &du[i * c..(i + 1) * c];
        outer_acc(&mut g.b, dui, x.token(i));
        matvec_t_acc(&params.b, c, c, dui, dx.token_mut(i));
    }
    Ok(ScanGrads { dx, dmask, params: g, eta })
}

/// `Σ_i ½ ‖η_i‖²`.
pub fn scan_loss(eta: &[f64]) -> f64 {
    0.5 * eta.iter().map(|e| e * e).sum::<f64>()
}
