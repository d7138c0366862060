use crate::error::{Error, Result};
use crate::linalg::{cosine, norm};
use crate::tokens::TokenGrid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    /// Always `i < j`.
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Undirected weighted graph over `n_nodes` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGraph {
    pub n_nodes: usize,
    pub edges: Vec<Edge>,
}

impl FeatureGraph {
    /// Normalizes each edge to `i < j` and rejects self-loops, out-of-range
    /// endpoints and non-finite weights.
    pub fn new(n_nodes: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut out = Vec::new();
        for (a, b, weight) in edges {
            if a == b || a >= n_nodes || b >= n_nodes {
                return Err(Error::InvalidArgument(format!("bad edge ({a}, {b}) for {n_nodes} nodes")));
            }
            if !weight.is_finite() {
                return Err(Error::InvalidArgument(format!("edge ({a}, {b}) has weight {weight}")));
            }
            out.push(Edge { i: a.min(b), j: a.max(b), weight });
        }
        Ok(Self { n_nodes, edges: out })
    }
}

/// 4-connected grid graph whose edge weights are the cosine distance
/// `1 - cos(x_i, x_j)` between neighboring tokens.
///
/// Edges are emitted in lexicographic `(i, j)` order.
pub fn build_grid_graph(x: &TokenGrid) -> Result<FeatureGraph> {
    if let Some(index) = (0..x.len()).find(|&i| norm(x.token(i)) == 0.0) {
        return Err(Error::ZeroNorm { index });
    }
    let mut edges = Vec::with_capacity(2 * x.len());
    for r in 0..x.h {
        for c in 0..x.w {
            let i = r * x.w + c;
            let mut push = |j: usize| {
                let cos = cosine(x.token(i), x.token(j)).expect("norms checked");
                edges.push(Edge { i, j, weight: 1.0 - cos });
            };
            if c + 1 < x.w {
                push(i + 1);
            }
            if r + 1 < x.h {
                push(i + x.w);
            }
        }
    }
    Ok(FeatureGraph { n_nodes: x.len(), edges })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, c: usize, f: impl Fn(usize, usize) -> f64) -> TokenGrid {
        let data = (0..h * w).flat_map(|i| (0..c).map(move |k| (i, k))).map(|(i, k)| f(i, k)).collect();
        TokenGrid::new(h, w, c, data).unwrap()
    }

    #[test]
    fn two_by_two_has_four_edges() {
        let g = build_grid_graph(&grid(2, 2, 2, |i, k| (i + k + 1) as f64)).unwrap();
        assert_eq!(g.edges.len(), 4);
        let pairs: Vec<_> = g.edges.iter().map(|e| (e.i, e.j)).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn identical_tokens_have_zero_weight() {
        let g = build_grid_graph(&grid(3, 4, 3, |_, k| k as f64 + 0.5)).unwrap();
        assert_eq!(g.edges.len(), 3 * 3 + 2 * 4);
        assert!(g.edges.iter().all(|e| e.weight.abs() < 1e-15));
    }

    #[test]
    fn orthogonal_neighbors_have_unit_weight() {
        let x = TokenGrid::new(1, 2, 2, vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        let g = build_grid_graph(&x).unwrap();
        assert_eq!(g.edges[0].weight, 1.0);
    }

    #[test]
    fn zero_token_reports_index() {
        let x = TokenGrid::new(1, 3, 1, vec![1.0, 2.0, 0.0]).unwrap();
        assert!(matches!(build_grid_graph(&x), Err(Error::ZeroNorm { index: 2 })));
    }

    #[test]
    fn weights_lie_in_zero_two() {
        let g = build_grid_graph(&grid(4, 4, 3, |i, k| ((i * 7 + k * 3) % 5) as f64 - 2.1)).unwrap();
        assert!(g.edges.iter().all(|e| (0.0..=2.0).contains(&e.weight)));
    }
}
