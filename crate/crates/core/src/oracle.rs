//! Slow reference computations used to check the fast paths.
//!
//! Nothing here calls into the implementations it checks: path products are
//! evaluated pair by pair, spanning trees are enumerated exhaustively, and
//! connectivity is established by union-find over explicit voxel adjacency.

use crate::linalg::matvec;

/// `h_i = Σ_j G(i, j) · B x_j` evaluated by walking every tree path.
///
/// `parent[v]` is `None` for the root and `gate[v]` is the gate on the edge
/// from `v` to its parent. `x` is `L x c`, `b` is `c x c`.
pub fn path_product_aggregate(parent: &[Option<usize>], gate: &[f64], b: &[f64], x: &[f64], c: usize) -> Vec<f64> {
    let l = parent.len();
    let ancestors = |mut v: usize| {
        let mut chain = vec![v];
        while let Some(p) = parent[v] {
            chain.push(p);
            v = p;
        }
        chain
    };
    let chains: Vec<Vec<usize>> = (0..l).map(ancestors).collect();
    let mut h = vec![0.0; l * c];
    let mut bx = vec![0.0; c];
    for i in 0..l {
        for j in 0..l {
            // Product of gates from i and j up to (excluding) their lowest
            // common ancestor.
            let lca = *chains[i].iter().find(|v| chains[j].contains(v)).expect("same tree");
            let mut g = 1.0;
            for side in [&chains[i], &chains[j]] {
                for &v in side.iter().take_while(|&&v| v != lca) {
                    g *= gate[v];
                }
            }
            matvec(b, c, c, &x[j * c..(j + 1) * c], &mut bx);
            for k in 0..c {
                h[i * c + k] += g * bx[k];
            }
        }
    }
    h
}

/// Minimum total weight over all spanning trees, by enumerating every
/// `(n-1)`-edge subset. `None` if the graph has no spanning tree. Weights are
/// summed in ascending order.
pub fn exhaustive_mst_weight(n: usize, edges: &[(usize, usize, f64)]) -> Option<f64> {
    if n <= 1 {
        return Some(0.0);
    }
    let need = n - 1;
    let mut best: Option<f64> = None;
    let mut chosen = Vec::with_capacity(need);
    fn recurse(
        start: usize,
        need: usize,
        n: usize,
        edges: &[(usize, usize, f64)],
        chosen: &mut Vec<usize>,
        best: &mut Option<f64>,
    ) {
        if chosen.len() == need {
            // Acyclic with n-1 edges on n nodes <=> spanning tree.
            let mut comp: Vec<usize> = (0..n).collect();
            for &e in chosen.iter() {
                let (a, b, _) = edges[e];
                let (ca, cb) = (comp[a], comp[b]);
                if ca == cb {
                    return;
                }
                for c in comp.iter_mut() {
                    if *c == cb {
                        *c = ca;
                    }
                }
            }
            let mut ws: Vec<f64> = chosen.iter().map(|&e| edges[e].2).collect();
            ws.sort_by(f64::total_cmp);
            let w: f64 = ws.iter().sum();
            if best.is_none_or(|b| w < b) {
                *best = Some(w);
            }
            return;
        }
        for e in start..edges.len() {
            if edges.len() - e < need - chosen.len() {
                break;
            }
            chosen.push(e);
            recurse(e + 1, need, n, edges, chosen, best);
            chosen.pop();
        }
    }
    recurse(0, need, n, edges, &mut chosen, &mut best);
    best
}

/// Number of 26-connected foreground components, via union-find over all
/// adjacent foreground voxel pairs.
pub fn count_components_26(mask: &[bool], dims: [usize; 3]) -> usize {
    let [d, h, w] = dims;
    let mut parent: Vec<usize> = (0..mask.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            x = p[x];
        }
        x
    }
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask[idx(z, y, x)] {
                    continue;
                }
                for nz in z.saturating_sub(1)..=(z + 1).min(d - 1) {
                    for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                        for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                            let j = idx(nz, ny, nx);
                            if mask[j] {
                                let (a, b) = (find(&mut parent, idx(z, y, x)), find(&mut parent, j));
                                if a != b {
                                    parent[b] = a;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (0..mask.len()).filter(|&i| mask[i] && find(&mut parent, i) == i).count()
}

/// Central finite difference of `f` with respect to each coordinate of `x`.
pub fn central_differences(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + step;
            let plus = f(&probe);
            probe[k] = x[k] - step;
            let minus = f(&probe);
            probe[k] = x[k];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Relative agreement test used by the gradient suites: entries where both
/// values are below `floor` in magnitude are skipped.
pub fn rel_close(analytic: f64, numeric: f64, rel_tol: f64, floor: f64) -> bool {
    if analytic.abs() < floor && numeric.abs() < floor {
        return true;
    }
    (analytic - numeric).abs() <= rel_tol * analytic.abs().max(numeric.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_cycle_enumeration() {
        let edges = [(0, 1, 0.1), (0, 2, 0.2), (1, 3, 0.3), (2, 3, 0.4)];
        assert!((exhaustive_mst_weight(4, &edges).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(exhaustive_mst_weight(3, &[(0, 1, 1.0)]), None);
    }

    #[test]
    fn path_products_on_a_chain() {
        // 0 <- 1 <- 2, gates 0.5 and 0.25, B = 1, x = (1, 10, 100).
        let h = path_product_aggregate(&[None, Some(0), Some(1)], &[1.0, 0.5, 0.25], &[1.0], &[1.0, 10.0, 100.0], 1);
        assert_eq!(h, vec![1.0 + 5.0 + 12.5, 0.5 + 10.0 + 25.0, 0.125 + 2.5 + 100.0]);
    }

    #[test]
    fn component_count() {
        let mut m = vec![false; 27];
        m[0] = true;
        m[26] = true;
        assert_eq!(count_components_26(&m, [3, 3, 3]), 2);
        m[13] = true;
        assert_eq!(count_components_26(&m, [3, 3, 3]), 1);
    }
}
