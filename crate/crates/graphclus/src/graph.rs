//! Cosine KNN affinity graph over unit-normalized embeddings, plus the
//! graph queries the proposal generator needs: threshold pruning,
//! connected components, and dense induced sub-matrices.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// N unit-normalized d-dimensional feature vectors.
///
/// Rows are normalized on construction; zero-norm rows are rejected rather
/// than silently producing NaNs downstream.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    features: Matrix,
}

impl EmbeddingSet {
    pub fn new(mut features: Matrix) -> Result<EmbeddingSet> {
        for r in 0..features.rows() {
            let norm = features.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "embedding row {r} has zero or non-finite norm"
                )));
            }
            for v in features.row_mut(r) {
                *v /= norm;
            }
        }
        Ok(EmbeddingSet { features })
    }

    /// Number of vertices.
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feature dimension.
    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Cosine similarity between two vertices (dot product of unit rows).
    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        dot(self.features.row(i), self.features.row(j))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A nonempty set of vertex ids, stored sorted and deduplicated.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VertexSet {
    ids: Vec<usize>,
}

impl VertexSet {
    pub fn new(mut ids: Vec<usize>) -> Result<VertexSet> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty vertex set".to_string()));
        }
        ids.sort_unstable();
        ids.dedup();
        Ok(VertexSet { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false // nonempty by construction
    }

    pub fn contains(&self, id: usize) -> bool {
        self.ids.binary_search(&id).is_ok()
    }

    /// Smallest member (sets are nonempty).
    pub fn min_id(&self) -> usize {
        self.ids[0]
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.ids.iter().copied()
    }
}

/// Sparse symmetric cosine-weighted KNN graph.
///
/// No self-loops are stored; the GCN layer adds its own identity term.
/// Symmetry is maintained by construction: every edge appears in both
/// endpoint adjacency lists with the same weight.
#[derive(Debug, Clone)]
pub struct AffinityGraph {
    n: usize,
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl AffinityGraph {
    /// Build from an undirected edge list. Duplicate pairs keep the first
    /// weight seen; self-loops are rejected.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<AffinityGraph> {
        let mut adjacency = vec![Vec::new(); n];
        let mut seen = std::collections::HashSet::new();
        for &(i, j, w) in edges {
            if i == j {
                return Err(Error::InvalidArgument(format!("self-loop at vertex {i}")));
            }
            if i >= n || j >= n {
                return Err(Error::InvalidArgument(format!(
                    "edge ({i}, {j}) out of range for {n} vertices"
                )));
            }
            if !w.is_finite() {
                return Err(Error::NonFinite(format!("edge weight ({i}, {j})")));
            }
            let key = (i.min(j), i.max(j));
            if seen.insert(key) {
                adjacency[i].push((j, w));
                adjacency[j].push((i, w));
            }
        }
        for list in &mut adjacency {
            list.sort_unstable_by_key(|&(j, _)| j);
        }
        Ok(AffinityGraph { n, adjacency })
    }

    pub fn vertex_count(&self) -> usize {
        self.n
    }

    /// Neighbors of `i` sorted by vertex id, with edge weights.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    /// Undirected edge count.
    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn edge_weight(&self, i: usize, j: usize) -> Option<f64> {
        self.adjacency[i]
            .binary_search_by_key(&j, |&(v, _)| v)
            .ok()
            .map(|idx| self.adjacency[i][idx].1)
    }
}

/// Build the cosine KNN affinity graph: each vertex is connected to its `k`
/// most similar others, and the directed selections are symmetrized by
/// union (an edge exists if either endpoint selected the other).
///
/// Similarity ties are broken toward the smaller vertex id so construction
/// is deterministic.
pub fn build_knn_graph(emb: &EmbeddingSet, k: usize) -> Result<AffinityGraph> {
    let n = emb.len();
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!(
            "knn width k={k} out of range for n={n} (need 1 <= k < n)"
        )));
    }

    // Top-k per query vertex, computed independently so the parallel loop
    // stays deterministic.
    let picks: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let qi = emb.row(i);
            let mut sims: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, dot(qi, emb.row(j))))
                .collect();
            // descending similarity, ascending id on ties
            sims.sort_unstable_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .expect("cosine similarities are finite")
                    .then(a.0.cmp(&b.0))
            });
            sims.truncate(k);
            sims
        })
        .collect();

    let mut edges = Vec::with_capacity(n * k);
    for (i, list) in picks.iter().enumerate() {
        for &(j, w) in list {
            edges.push((i, j, w));
        }
    }
    AffinityGraph::from_edges(n, &edges)
}

/// Plain array-based union-find with path halving.
struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> UnionFind {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            // anchor on the smaller root so roots stay the minimum member
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Maximal connected components of `g`, optionally restricted to a vertex
/// subset (edges with an endpoint outside the subset are ignored).
///
/// Components are returned sorted by their smallest member id.
pub fn connected_components(g: &AffinityGraph, restrict: Option<&VertexSet>) -> Vec<VertexSet> {
    let n = g.vertex_count();
    let in_scope: Vec<bool> = match restrict {
        None => vec![true; n],
        Some(v) => {
            let mut mask = vec![false; n];
            for id in v.iter() {
                mask[id] = true;
            }
            mask
        }
    };

    let mut uf = UnionFind::new(n);
    for i in 0..n {
        if !in_scope[i] {
            continue;
        }
        for &(j, _) in g.neighbors(i) {
            if j > i && in_scope[j] {
                uf.union(i, j);
            }
        }
    }

    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        if in_scope[i] {
            groups.entry(uf.find(i)).or_default().push(i);
        }
    }
    groups
        .into_values()
        .map(|ids| VertexSet { ids })
        .collect()
}

/// Copy of `g` retaining exactly the edges with weight >= `e_tau`
/// (equality keeps the edge). Vertex count is unchanged.
pub fn prune_edges(g: &AffinityGraph, e_tau: f64) -> AffinityGraph {
    let adjacency = g
        .adjacency
        .iter()
        .map(|list| {
            list.iter()
                .copied()
                .filter(|&(_, w)| w >= e_tau)
                .collect()
        })
        .collect();
    AffinityGraph {
        n: g.n,
        adjacency,
    }
}

/// Dense symmetric adjacency over the members of `v`: entry (a, b) is the
/// edge weight between `v.ids()[a]` and `v.ids()[b]`, zero where no edge
/// exists, zero on the diagonal. Also returns the local-to-global id map.
pub fn induced_subgraph(g: &AffinityGraph, v: &VertexSet) -> (Matrix, Vec<usize>) {
    let ids = v.ids().to_vec();
    let m = ids.len();
    let mut local_of = std::collections::HashMap::with_capacity(m);
    for (local, &global) in ids.iter().enumerate() {
        local_of.insert(global, local);
    }
    let mut adj = Matrix::zeros(m, m);
    for (a, &global) in ids.iter().enumerate() {
        for &(j, w) in g.neighbors(global) {
            if let Some(&b) = local_of.get(&j) {
                adj.set(a, b, w);
            }
        }
    }
    (adj, ids)
}
