//! Multi-scale cluster proposal generation.
//!
//! Super-vertices are small connected components obtained by pruning
//! low-affinity edges, escalating the threshold on oversized remainders
//! until everything fits. Higher-level proposals merge super-vertices by
//! clustering their average-feature centers the same way, for a configured
//! number of iterations.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::graph::{
    build_knn_graph, connected_components, prune_edges, AffinityGraph, EmbeddingSet, VertexSet,
};
use crate::numerics::Matrix;

/// Knobs for super-vertex and proposal generation.
#[derive(Debug, Clone)]
pub struct SuperVertexConfig {
    /// Initial edge threshold.
    pub e_tau: f64,
    /// Components must stay strictly below this size to be accepted.
    pub s_max: usize,
    /// Threshold increment applied to oversized remainders.
    pub delta: f64,
    /// Total proposal-generation iterations I (1 = super-vertices only).
    pub iterations: usize,
    /// KNN width for higher-level center graphs (clamped to centers - 1).
    pub k: usize,
    /// Flattened unions larger than this are discarded.
    pub max_proposal_size: usize,
}

impl Default for SuperVertexConfig {
    fn default() -> Self {
        SuperVertexConfig {
            e_tau: 0.6,
            s_max: 300,
            delta: 0.05,
            iterations: 2,
            k: 80,
            max_proposal_size: 600,
        }
    }
}

impl SuperVertexConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold step delta must be positive, got {}",
                self.delta
            )));
        }
        if self.s_max < 2 {
            return Err(Error::InvalidArgument(format!(
                "s_max must be at least 2, got {}",
                self.s_max
            )));
        }
        if self.iterations < 1 {
            return Err(Error::InvalidArgument(
                "iterations must be at least 1".to_string(),
            ));
        }
        if self.k < 1 {
            return Err(Error::InvalidArgument("k must be at least 1".to_string()));
        }
        if !self.e_tau.is_finite() {
            return Err(Error::NonFinite("e_tau".to_string()));
        }
        Ok(())
    }
}

/// Deduplicated collection of proposals with the iteration that produced
/// each one.
#[derive(Debug, Clone, Default)]
pub struct ProposalSet {
    proposals: Vec<VertexSet>,
    iteration: Vec<usize>,
    seen: HashSet<Vec<usize>>,
}

impl ProposalSet {
    pub fn new() -> ProposalSet {
        ProposalSet::default()
    }

    /// Insert unless a set-equal proposal is already present. Returns
    /// whether the proposal was new.
    pub fn insert(&mut self, v: VertexSet, iteration: usize) -> bool {
        if self.seen.insert(v.ids().to_vec()) {
            self.proposals.push(v);
            self.iteration.push(iteration);
            true
        } else {
            false
        }
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn proposals(&self) -> &[VertexSet] {
        &self.proposals
    }

    pub fn iterations(&self) -> &[usize] {
        &self.iteration
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VertexSet, usize)> + '_ {
        self.proposals.iter().zip(self.iteration.iter().copied())
    }

    /// Merge another set into this one, keeping first-seen provenance.
    pub fn absorb(&mut self, other: ProposalSet) {
        for (v, it) in other.proposals.into_iter().zip(other.iteration) {
            self.insert(v, it);
        }
    }
}

/// Partition the graph into super-vertices: prune at `e_tau`, accept
/// components smaller than `s_max`, raise the threshold by `delta` and
/// repeat on the remainder until it is empty.
///
/// The escalation always terminates: once the threshold exceeds the maximum
/// cosine weight every vertex is a singleton, and singletons are accepted
/// for any `s_max >= 2`. The result is a partition of all vertices, sorted
/// by smallest member id.
pub fn generate_super_vertices(
    g: &AffinityGraph,
    cfg: &SuperVertexConfig,
) -> Result<Vec<VertexSet>> {
    generate_super_vertices_with_rounds(g, cfg).map(|(sv, _)| sv)
}

/// Same as [`generate_super_vertices`], also reporting how many
/// prune-and-extract rounds ran (1 = no escalation was needed).
pub fn generate_super_vertices_with_rounds(
    g: &AffinityGraph,
    cfg: &SuperVertexConfig,
) -> Result<(Vec<VertexSet>, usize)> {
    cfg.validate()?;
    let mut accepted: Vec<VertexSet> = Vec::new();
    let mut current = prune_edges(g, cfg.e_tau);
    let mut remainder: Option<VertexSet> = None;
    let mut e_tau = cfg.e_tau;
    let mut rounds = 0;

    loop {
        rounds += 1;
        let comps = connected_components(&current, remainder.as_ref());
        let mut oversized: Vec<usize> = Vec::new();
        for c in comps {
            if c.len() < cfg.s_max {
                accepted.push(c);
            } else {
                oversized.extend(c.iter());
            }
        }
        if oversized.is_empty() {
            break;
        }
        e_tau += cfg.delta;
        current = prune_edges(&current, e_tau);
        remainder = Some(VertexSet::new(oversized)?);
    }

    accepted.sort_by_key(VertexSet::min_id);
    Ok((accepted, rounds))
}

/// Arithmetic mean of the member feature rows, re-normalized to unit
/// length. Errors when the mean cancels to zero norm.
pub fn average_center(emb: &EmbeddingSet, v: &VertexSet) -> Result<Vec<f64>> {
    let d = emb.dim();
    let mut mean = vec![0.0; d];
    for id in v.iter() {
        for (m, x) in mean.iter_mut().zip(emb.row(id)) {
            *m += x;
        }
    }
    let inv = 1.0 / v.len() as f64;
    for m in &mut mean {
        *m *= inv;
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "zero-norm average center for proposal starting at vertex {}",
            v.min_id()
        )));
    }
    for m in &mut mean {
        *m /= norm;
    }
    Ok(mean)
}

/// Full multi-scale proposal generation.
///
/// Iteration 0 contributes the super-vertex partition itself. Each later
/// iteration clusters the average-feature centers of the previous level
/// with the same thresholds, and every resulting component flattens into
/// the union of its constituents' base vertices. Stops early when fewer
/// than two units remain at some level.
pub fn generate_proposals(
    g: &AffinityGraph,
    emb: &EmbeddingSet,
    cfg: &SuperVertexConfig,
) -> Result<ProposalSet> {
    cfg.validate()?;
    let supers = generate_super_vertices(g, cfg)?;
    let mut set = ProposalSet::new();
    for s in &supers {
        set.insert(s.clone(), 0);
    }

    let mut level = supers;
    for iteration in 1..cfg.iterations {
        if level.len() < 2 {
            break;
        }
        let k = cfg.k.min(level.len() - 1);

        let mut center_rows = Vec::with_capacity(level.len());
        for unit in &level {
            center_rows.push(average_center(emb, unit)?);
        }
        let centers = EmbeddingSet::new(Matrix::from_rows(&center_rows)?)?;
        let center_graph = build_knn_graph(&centers, k)?;
        let merged = generate_super_vertices(&center_graph, cfg)?;

        let mut next_level = Vec::new();
        for comp in merged {
            let mut union: Vec<usize> = Vec::new();
            for unit_idx in comp.iter() {
                union.extend(level[unit_idx].iter());
            }
            let flattened = VertexSet::new(union)?;
            if flattened.len() > cfg.max_proposal_size {
                continue;
            }
            set.insert(flattened.clone(), iteration);
            next_level.push(flattened);
        }
        level = next_level;
    }

    Ok(set)
}

/// Run [`generate_proposals`] once per threshold and union the results.
/// Duplicate sets across thresholds are kept once, with the provenance of
/// their first appearance.
pub fn generate_proposal_grid(
    g: &AffinityGraph,
    emb: &EmbeddingSet,
    cfg: &SuperVertexConfig,
    e_taus: &[f64],
) -> Result<ProposalSet> {
    if e_taus.is_empty() {
        return Err(Error::InvalidArgument(
            "empty threshold grid".to_string(),
        ));
    }
    let mut all = ProposalSet::new();
    for &e_tau in e_taus {
        let one = generate_proposals(
            g,
            emb,
            &SuperVertexConfig {
                e_tau,
                ..cfg.clone()
            },
        )?;
        all.absorb(one);
    }
    Ok(all)
}
