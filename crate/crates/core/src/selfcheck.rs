//! Quick oracle and gradient checks runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{cross_slice_weights, SliceFeature};
use crate::diffusion::{make_schedule, sample, Denoise};
use crate::embedder::ConditionEmbedding;
use crate::error::Result;
use crate::metrics::{dice, jaccard, psnr, ssim};
use crate::oracle::{central_differences, exhaustive_mst_weight, path_product_aggregate, rel_close};
use crate::scan::{
    build_grid_graph, edge_gates, kruskal_mst, tree_aggregate, tree_scan_backward, tree_scan_forward, FeatureGraph,
    ScanMode, ScanParams,
};
use crate::tokens::TokenGrid;
use crate::volume::{Image2D, Volume3D};

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

type Check = fn() -> Result<(bool, String)>;

const CHECKS: [(&str, Check); 6] = [
    ("mst-oracle", mst_oracle),
    ("scan-oracle", scan_oracle),
    ("scan-gradient", scan_gradient),
    ("sampler-oracle", sampler_oracle),
    ("attention-rows", attention_rows),
    ("metric-identities", metric_identities),
];

/// Runs every check; an error inside a check counts as a failure.
pub fn run_all() -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|(name, check)| match check() {
            Ok((passed, detail)) => CheckOutcome { name, passed, detail },
            Err(e) => CheckOutcome { name, passed: false, detail: format!("error: {e}") },
        })
        .collect()
}

fn random_grid(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Result<TokenGrid> {
    TokenGrid::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().map(|v| v.abs()).fold(1e-300, f64::max);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

fn mst_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=8);
        let mut edges: Vec<_> = (1..n).map(|j| (rng.random_range(0..j), j, rng.random_range(0.0..1.0))).collect();
        for _ in 0..rng.random_range(0..n * 2) {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            if i != j {
                edges.push((i, j, rng.random_range(0.0..1.0)));
            }
        }
        let tree = kruskal_mst(&FeatureGraph::new(n, edges.iter().copied())?)?;
        if Some(tree.total_weight()) != exhaustive_mst_weight(n, &edges) {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{mismatches}/100 graphs disagree with exhaustive search")))
}

fn scan_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (h, w, c) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=3));
        let x = random_grid(h, w, c, &mut rng)?;
        let lambda = rng.random_range(0.2..3.0);
        let p = ScanParams::random(c, lambda, 1.0, &mut rng);
        let tree = kruskal_mst(&build_grid_graph(&x)?)?;
        let fast = tree_aggregate(&tree, &x, &p)?;
        let slow = path_product_aggregate(&tree.parent, &edge_gates(&tree, lambda), &p.b, &x.data, c);
        worst = worst.max(max_rel_err(&fast, &slow));
    }
    Ok((worst <= 1e-6, format!("max relative error {worst:.2e} over 20 grids")))
}

fn scan_gradient() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w, c) = (3, 3, 2);
    let x = random_grid(h, w, c, &mut rng)?;
    let mask = (0..h * w).map(|_| rng.random_range(0.1..0.9)).collect();
    let cond = ConditionEmbedding::new(mask, random_grid(h, w, c, &mut rng)?)?;
    let p = ScanParams::random(c, 1.0, 0.8, &mut rng);
    let probe = random_grid(h, w, c, &mut rng)?;
    let (_, state) = tree_scan_forward(&x, Some(&cond), &p, ScanMode::Tree)?;
    let g = tree_scan_backward(&state, &p, &probe, None)?;
    let objective = |x: &TokenGrid, p: &ScanParams| -> f64 {
        tree_scan_forward(x, Some(&cond), p, ScanMode::Tree)
            .map(|(y, _)| y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum())
            .unwrap_or(f64::NAN)
    };
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    let fd_x = central_differences(&x.data, 1e-4, |v| {
        objective(&TokenGrid::new(h, w, c, v.to_vec()).expect("same shape"), &p)
    });
    pairs.extend(g.dx.data.iter().copied().zip(fd_x));
    for t in 0..5 {
        let fd = central_differences(p.tensors()[t], 1e-4, |v| {
            let mut q = p.clone();
            q.tensors_mut()[t].copy_from_slice(v);
            objective(&x, &q)
        });
        pairs.extend(g.params.tensors()[t].iter().copied().zip(fd));
    }
    let bad = pairs.iter().filter(|(a, n)| !rel_close(*a, *n, 1e-4, 1e-8)).count();
    Ok((bad == 0, format!("{bad}/{} entries outside 1e-4 relative", pairs.len())))
}

struct Oracle(Vec<TokenGrid>);

impl Denoise for Oracle {
    fn denoise(&self, _: &[TokenGrid], _: usize, _: &[ConditionEmbedding]) -> Result<Vec<TokenGrid>> {
        Ok(self.0.clone())
    }
}

fn sampler_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let target = vec![random_grid(4, 4, 2, &mut rng)?, random_grid(4, 4, 2, &mut rng)?];
    let cond: Vec<_> = target
        .iter()
        .map(|g| ConditionEmbedding::new(vec![0.5; g.len()], g.clone()))
        .collect::<Result<_>>()?;
    let mut exact = Vec::new();
    for steps in [1, 5, 50] {
        let schedule = make_schedule(steps, 0.99, 0.01)?;
        let out = sample(&Oracle(target.clone()), &cond, &schedule, 2, 9)?;
        exact.push(out == target);
    }
    Ok((exact.iter().all(|e| *e), format!("exact recovery for T = 1, 5, 50: {exact:?}")))
}

fn attention_rows() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..=10);
        let c = rng.random_range(1..=4);
        let features: Vec<_> = (0..n)
            .map(|_| SliceFeature {
                h: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
                mask: rng.random_range(0.0..1.0),
            })
            .collect();
        let alpha = cross_slice_weights(&features, rng.random_range(0.0..3.0), rng.random_range(1..=3))?;
        for i in 0..n {
            let row: f64 = (0..n).map(|k| alpha.get(i, k)).sum();
            worst = worst.max((row - 1.0).abs());
        }
    }
    Ok((worst <= 1e-6, format!("max |row sum - 1| = {worst:.2e} over 50 configurations")))
}

fn metric_identities() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let density = rng.random_range(0.0..1.0);
        let mut mask = || -> Result<Volume3D> {
            let v = (0..4 * 4 * 4).map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 }).collect();
            Volume3D::new([4, 4, 4], [1.0; 3], v)
        };
        let (a, b) = (mask()?, mask()?);
        let (d, j) = (dice(&a, &b)?, jaccard(&a, &b)?);
        worst = worst.max((d - 2.0 * j / (1.0 + j)).abs());
    }
    let zeros = vec![0.0f32; 100];
    let tenth = vec![0.1f32; 100];
    let psnr_20 = psnr(&zeros, &tenth, 1.0)?;
    let img = Image2D::new(8, 8, (0..64).map(|k| (k % 7) as f32 / 7.0).collect())?;
    let ssim_1 = ssim(&img, &img, 1.0)?;
    let passed = worst <= 1e-9 && (psnr_20 - 20.0).abs() < 1e-4 && (ssim_1 - 1.0).abs() < 1e-12;
    Ok((
        passed,
        format!("dice/jaccard error {worst:.1e}, psnr {psnr_20:.4} dB, ssim(a, a) = {ssim_1}"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for outcome in run_all() {
            assert!(outcome.passed, "{outcome}");
        }
    }
}
