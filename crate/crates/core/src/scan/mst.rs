use std::collections::VecDeque;
use std::fmt::Write;

use super::graph::FeatureGraph;
use crate::error::{Error, Result};

/// Union-find with path halving and union by size.
#[derive(Debug, Clone)]
pub struct DisjointSets {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSets {
    pub fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n] }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns `false` if `a` and `b` were already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

/// A spanning tree rooted at node 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanningTree {
    /// `None` for the root.
    pub parent: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
    /// Every node appears after all of its descendants; the root is last.
    pub leaf_to_root: Vec<usize>,
    /// Weight of the edge to the parent (0 for the root).
    pub parent_weight: Vec<f64>,
}

impl SpanningTree {
    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn root(&self) -> usize {
        *self.leaf_to_root.last().expect("non-empty tree")
    }

    /// `(child, parent, weight)` for every tree edge, ordered by child.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.parent
            .iter()
            .enumerate()
            .filter_map(|(c, p)| p.map(|p| (c, p, self.parent_weight[c])))
    }

    /// Sum of edge weights taken in ascending order, so every minimum
    /// spanning tree of a graph reports the same value bit for bit.
    pub fn total_weight(&self) -> f64 {
        let mut w: Vec<f64> = self.edges().map(|(_, _, w)| w).collect();
        w.sort_by(f64::total_cmp);
        w.iter().sum()
    }

    /// One `"i j weight gate"` line per edge (`i` child, `j` parent), gates
    /// indexed by child node.
    pub fn to_edge_list(&self, gates: &[f64]) -> String {
        let mut out = String::new();
        for (c, p, w) in self.edges() {
            writeln!(out, "{c} {p} {w:e} {:e}", gates[c]).unwrap();
        }
        out
    }
}

/// Parses the `"i j weight gate"` edge-list dump back into `(i, j, weight, gate)`.
pub fn parse_edge_list(text: &str) -> Result<Vec<(usize, usize, f64, f64)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::InvalidArgument(format!("bad edge-list line {line:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok((
                f[0].parse().map_err(|_| bad())?,
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
                f[3].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

/// Kruskal's algorithm. Equal weights are resolved by lexicographic `(i, j)`
/// order; the result is rooted at node 0.
pub fn kruskal_mst(g: &FeatureGraph) -> Result<SpanningTree> {
    let n = g.n_nodes;
    if n == 0 {
        return Err(Error::InvalidArgument("empty graph".into()));
    }
    let mut order: Vec<usize> = (0..g.edges.len()).collect();
    order.sort_by(|&a, &b| {
        let (ea, eb) = (&g.edges[a], &g.edges[b]);
        ea.weight.total_cmp(&eb.weight).then((ea.i, ea.j).cmp(&(eb.i, eb.j)))
    });
    let mut sets = DisjointSets::new(n);
    let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut picked = 0;
    for k in order {
        let e = g.edges[k];
        if sets.union(e.i, e.j) {
            adjacency[e.i].push((e.j, e.weight));
            adjacency[e.j].push((e.i, e.weight));
            picked += 1;
            if picked == n - 1 {
                break;
            }
        }
    }
    if picked != n - 1 {
        return Err(Error::Disconnected { components: n - picked });
    }

    let mut parent = vec![None; n];
    let mut parent_weight = vec![0.0; n];
    let mut children = vec![Vec::new(); n];
    let mut visited = vec![false; n];
    let mut bfs = Vec::with_capacity(n);
    let mut queue = VecDeque::from([0usize]);
    visited[0] = true;
    while let Some(v) = queue.pop_front() {
        bfs.push(v);
        let mut next = adjacency[v].clone();
        next.sort_by_key(|&(u, _)| u);
        for (u, w) in next {
            if !visited[u] {
                visited[u] = true;
                parent[u] = Some(v);
                parent_weight[u] = w;
                children[v].push(u);
                queue.push_back(u);
            }
        }
    }
    bfs.reverse();
    Ok(SpanningTree { parent, children, leaf_to_root: bfs, parent_weight })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_node_has_no_edges() {
        let t = kruskal_mst(&FeatureGraph::new(1, []).unwrap()).unwrap();
        assert_eq!(t.edges().count(), 0);
        assert_eq!(t.root(), 0);
    }

    #[test]
    fn two_nodes_keep_their_edge() {
        let t = kruskal_mst(&FeatureGraph::new(2, [(0, 1, 0.7)]).unwrap()).unwrap();
        assert_eq!(t.edges().collect::<Vec<_>>(), vec![(1, 0, 0.7)]);
    }

    #[test]
    fn four_cycle_drops_heaviest_edge() {
        // 0-1 (0.1), 0-2 (0.2), 1-3 (0.3), 2-3 (0.4) on a 2x2 grid.
        let g = FeatureGraph::new(4, [(0, 1, 0.1), (0, 2, 0.2), (1, 3, 0.3), (2, 3, 0.4)]).unwrap();
        let t = kruskal_mst(&g).unwrap();
        assert!((t.total_weight() - 0.6).abs() < 1e-12);
        assert!(t.edges().all(|(c, p, _)| (c.min(p), c.max(p)) != (2, 3)));
    }

    #[test]
    fn ties_break_lexicographically() {
        let g = FeatureGraph::new(3, [(1, 2, 0.5), (0, 2, 0.5), (0, 1, 0.5)]).unwrap();
        let t = kruskal_mst(&g).unwrap();
        let mut e: Vec<_> = t.edges().map(|(c, p, _)| (c.min(p), c.max(p))).collect();
        e.sort();
        assert_eq!(e, vec![(0, 1), (0, 2)]);
    }

    #[test]
    fn disconnected_graph_is_error() {
        let g = FeatureGraph::new(4, [(0, 1, 1.0), (2, 3, 1.0)]).unwrap();
        assert!(matches!(kruskal_mst(&g), Err(Error::Disconnected { components: 2 })));
    }

    #[test]
    fn traversal_visits_children_first() {
        let g = FeatureGraph::new(5, [(0, 1, 0.1), (1, 2, 0.2), (1, 3, 0.3), (0, 4, 0.9), (3, 4, 0.1)]).unwrap();
        let t = kruskal_mst(&g).unwrap();
        let pos: Vec<usize> = (0..5).map(|v| t.leaf_to_root.iter().position(|&u| u == v).unwrap()).collect();
        for (c, p, _) in t.edges() {
            assert!(pos[c] < pos[p]);
        }
        assert_eq!(t.root(), 0);
    }

    #[test]
    fn edge_list_round_trip() {
        let g = FeatureGraph::new(3, [(0, 1, 0.25), (1, 2, 0.5)]).unwrap();
        let t = kruskal_mst(&g).unwrap();
        let gates = [1.0, 0.75, 0.125];
        let parsed = parse_edge_list(&t.to_edge_list(&gates)).unwrap();
        assert_eq!(parsed, vec![(1, 0, 0.25, 0.75), (2, 1, 0.5, 0.125)]);
        assert!(parse_edge_list("1 2 x 0.5").is_err());
    }
}
