//! Ground-truth quality scores for proposals, pairwise clustering metrics,
//! and the K-means baseline.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{EmbeddingSet, VertexSet};
use crate::numerics::Rng;

/// Per-vertex ground-truth class ids.
#[derive(Debug, Clone)]
pub struct LabelSet {
    labels: Vec<usize>,
}

impl LabelSet {
    pub fn new(labels: Vec<usize>) -> LabelSet {
        LabelSet { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, vertex: usize) -> usize {
        self.labels[vertex]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Number of distinct class ids.
    pub fn num_classes(&self) -> usize {
        let mut seen: Vec<usize> = self.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}

/// IoU and IoP of a proposal against its majority-label ground-truth set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityScores {
    pub iou: f64,
    pub iop: f64,
}

/// Pairwise precision/recall/F-score of a predicted clustering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseMetrics {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub num_clusters: usize,
}

impl fmt::Display for PairwiseMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "precision={:.4} recall={:.4} fscore={:.4} clusters={}",
            self.precision, self.recall, self.fscore, self.num_clusters
        )
    }
}

/// A total assignment of every vertex to a cluster, ids contiguous from 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSet {
    assignment: Vec<usize>,
    num_clusters: usize,
}

impl ClusterSet {
    /// Renumbers arbitrary cluster ids to be contiguous from 0, in order of
    /// first appearance.
    pub fn from_assignment(raw: Vec<usize>) -> ClusterSet {
        let mut remap: HashMap<usize, usize> = HashMap::new();
        let mut assignment = Vec::with_capacity(raw.len());
        for id in raw {
            let next = remap.len();
            assignment.push(*remap.entry(id).or_insert(next));
        }
        let num_clusters = remap.len();
        ClusterSet {
            assignment,
            num_clusters,
        }
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn cluster_of(&self, vertex: usize) -> usize {
        self.assignment[vertex]
    }
}

/// The class id occurring most often in `p`; ties go to the smallest id.
pub fn majority_label(p: &VertexSet, labels: &LabelSet) -> usize {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for v in p.iter() {
        *counts.entry(labels.get(v)).or_insert(0) += 1;
    }
    let mut best_label = usize::MAX;
    let mut best_count = 0;
    for (&label, &count) in &counts {
        if count > best_count || (count == best_count && label < best_label) {
            best_label = label;
            best_count = count;
        }
    }
    best_label
}

/// IoU and IoP of `p` against the set of all vertices carrying its
/// majority label.
pub fn quality_scores(p: &VertexSet, labels: &LabelSet) -> QualityScores {
    let target = majority_label(p, labels);
    let in_p = p.iter().filter(|&v| labels.get(v) == target).count();
    let total = labels.labels().iter().filter(|&&l| l == target).count();
    let union = p.len() + total - in_p;
    QualityScores {
        iou: in_p as f64 / union as f64,
        iop: in_p as f64 / p.len() as f64,
    }
}

fn pairs(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Pairwise precision/recall/F-score over unordered vertex pairs, computed
/// in closed form from the prediction/label contingency table.
pub fn pairwise_metrics(pred: &ClusterSet, labels: &LabelSet) -> Result<PairwiseMetrics> {
    if pred.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "clustering covers {} vertices but labels cover {}",
            pred.len(),
            labels.len()
        )));
    }
    let mut pred_sizes: HashMap<usize, u64> = HashMap::new();
    let mut label_sizes: HashMap<usize, u64> = HashMap::new();
    let mut joint: HashMap<(usize, usize), u64> = HashMap::new();
    for v in 0..pred.len() {
        let c = pred.cluster_of(v);
        let l = labels.get(v);
        *pred_sizes.entry(c).or_insert(0) += 1;
        *label_sizes.entry(l).or_insert(0) += 1;
        *joint.entry((c, l)).or_insert(0) += 1;
    }
    let co_clustered: u64 = pred_sizes.values().map(|&s| pairs(s)).sum();
    let same_label: u64 = label_sizes.values().map(|&s| pairs(s)).sum();
    let both: u64 = joint.values().map(|&s| pairs(s)).sum();

    let precision = if co_clustered == 0 {
        0.0
    } else {
        both as f64 / co_clustered as f64
    };
    let recall = if same_label == 0 {
        0.0
    } else {
        both as f64 / same_label as f64
    };
    let fscore = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(PairwiseMetrics {
        precision,
        recall,
        fscore,
        num_clusters: pred.num_clusters(),
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's K-means with seeded random-point initialization.
///
/// Runs at most `max_iter` rounds (100), stops when the relative inertia
/// improvement drops below 1e-6. An empty cluster is reseeded to the point
/// farthest from its current center. Deterministic given the seed.
pub fn kmeans_baseline(emb: &EmbeddingSet, k: usize, seed: u64) -> Result<ClusterSet> {
    let n = emb.len();
    let d = emb.dim();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "kmeans k={k} out of range for n={n}"
        )));
    }
    let mut rng = Rng::new(seed);
    let init = rng.sample_distinct(n, k);
    let mut centers: Vec<Vec<f64>> = init.iter().map(|&i| emb.row(i).to_vec()).collect();
    let mut assignment = vec![0usize; n];
    let max_iter = 100;
    let mut prev_inertia = f64::INFINITY;

    for _ in 0..max_iter {
        // assignment step; ties go to the lowest center id
        let mut inertia = 0.0;
        for v in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let dist = sq_dist(emb.row(v), center);
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            assignment[v] = best;
            inertia += best_d;
        }

        // update step
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for v in 0..n {
            counts[assignment[v]] += 1;
            for (s, x) in sums[assignment[v]].iter_mut().zip(emb.row(v)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // reseed to the point farthest from its assigned center
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(emb.row(a), &centers[assignment[a]]);
                        let db = sq_dist(emb.row(b), &centers[assignment[b]]);
                        da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                    })
                    .expect("n >= 1");
                centers[c] = emb.row(far).to_vec();
            } else {
                for (ctr, s) in centers[c].iter_mut().zip(&sums[c]) {
                    *ctr = s / counts[c] as f64;
                }
            }
        }

        if prev_inertia.is_finite() {
            let denom = prev_inertia.max(f64::MIN_POSITIVE);
            if (prev_inertia - inertia) / denom < 1e-6 {
                break;
            }
        }
        prev_inertia = inertia;
    }

    Ok(ClusterSet::from_assignment(assignment))
}
