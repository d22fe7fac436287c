//! End-to-end inference: score proposals with the detector, refine
//! impure ones with the segmenter, rank by predicted IoU, resolve overlaps
//! in a single linear pass, and emit a total clustering. Greedy NMS is
//! provided as the comparison post-process.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{pairwise_metrics, ClusterSet, LabelSet, PairwiseMetrics};
use crate::gcn::{det_forward, seg_forward, GcnDetModel, GcnSegModel, SubGraphInstance};
use crate::graph::{build_knn_graph, AffinityGraph, EmbeddingSet, VertexSet};
use crate::numerics::Rng;
use crate::proposals::{generate_proposal_grid, ProposalSet, SuperVertexConfig};

/// A proposal with the detector's clamped IoU/IoP predictions.
#[derive(Debug, Clone)]
pub struct ScoredProposal {
    pub vertices: VertexSet,
    pub pred_iou: f64,
    pub pred_iop: f64,
}

/// Inference-time thresholds.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Proposals with predicted IoP inside [iop_low, iop_high] go through
    /// the segmenter; purer or messier ones pass through unchanged.
    pub iop_low: f64,
    pub iop_high: f64,
    /// Proposals scoring below this predicted IoU are dropped outright.
    pub det_iou_min: f64,
    /// Per-vertex probability needed to survive segmentation.
    pub seg_keep_threshold: f64,
    /// Segmentation hypotheses drawn per gated proposal.
    pub num_hypotheses: usize,
    /// De-overlap skips a proposal whose surviving fraction is below this.
    pub deoverlap_iou_min: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            iop_low: 0.3,
            iop_high: 0.7,
            det_iou_min: 0.0,
            seg_keep_threshold: 0.5,
            num_hypotheses: 3,
            deoverlap_iou_min: 0.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.iop_low && self.iop_low <= self.iop_high && self.iop_high <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= iop_low <= iop_high <= 1, got [{}, {}]",
                self.iop_low, self.iop_high
            )));
        }
        if self.num_hypotheses == 0 {
            return Err(Error::InvalidArgument(
                "num_hypotheses must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Graph construction and proposal generation settings for a full run.
#[derive(Debug, Clone)]
pub struct GraphConfig {
    /// KNN width (clamped to n - 1 for small inputs).
    pub k: usize,
    pub super_vertex: SuperVertexConfig,
    /// Threshold grid; each value is run through proposal generation and
    /// the results are unioned. Empty means use `super_vertex.e_tau` alone.
    pub e_tau_grid: Vec<f64>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            k: 80,
            super_vertex: SuperVertexConfig::default(),
            e_tau_grid: vec![0.6, 0.65, 0.7, 0.75],
        }
    }
}

/// Score every proposal with the detector, preserving order, and drop the
/// ones predicted below `det_iou_min`.
pub fn score_proposals(
    model: &GcnDetModel,
    proposals: &ProposalSet,
    g: &AffinityGraph,
    emb: &EmbeddingSet,
    cfg: &PipelineConfig,
) -> Result<Vec<ScoredProposal>> {
    let scored: Result<Vec<ScoredProposal>> = proposals
        .proposals()
        .par_iter()
        .map(|v| {
            let inst = SubGraphInstance::from_proposal(g, emb, v, model.center_inputs);
            let q = det_forward(model, &inst)?;
            Ok(ScoredProposal {
                vertices: v.clone(),
                pred_iou: q.iou,
                pred_iop: q.iop,
            })
        })
        .collect();
    Ok(scored?
        .into_iter()
        .filter(|sp| sp.pred_iou >= cfg.det_iou_min)
        .collect())
}

/// Refine one proposal with multi-hypothesis segmentation.
///
/// Gated by predicted IoP: outside [iop_low, iop_high] the proposal passes
/// through unchanged. Otherwise several random seeds each produce a
/// hypothesis, the hypothesis keeping the most vertices at
/// `seg_keep_threshold` wins, and its surviving vertices are returned. A
/// winner that keeps nothing falls back to the whole proposal, so the
/// result is never empty and never leaves the input set.
pub fn segment_proposal(
    model: &GcnSegModel,
    sp: &ScoredProposal,
    g: &AffinityGraph,
    emb: &EmbeddingSet,
    cfg: &PipelineConfig,
    rng: &mut Rng,
) -> Result<VertexSet> {
    cfg.validate()?;
    if sp.pred_iop < cfg.iop_low || sp.pred_iop > cfg.iop_high {
        return Ok(sp.vertices.clone());
    }
    let inst = SubGraphInstance::from_proposal(g, emb, &sp.vertices, model.center_inputs);
    let seeds = rng.sample_distinct(inst.size(), cfg.num_hypotheses);

    let mut best: Option<(usize, Vec<bool>)> = None;
    for seed in seeds {
        let probs = seg_forward(model, &inst, seed)?;
        let keep: Vec<bool> = probs
            .iter()
            .map(|&p| p >= cfg.seg_keep_threshold)
            .collect();
        let count = keep.iter().filter(|&&k| k).count();
        let better = match &best {
            None => true,
            Some((best_count, _)) => count > *best_count,
        };
        if better {
            best = Some((count, keep));
        }
    }

    match best {
        Some((count, keep)) if count > 0 => {
            let kept: Vec<usize> = inst
                .id_map
                .iter()
                .zip(&keep)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .collect();
            VertexSet::new(kept)
        }
        _ => Ok(sp.vertices.clone()),
    }
}

fn check_sorted(ranked: &[ScoredProposal]) -> Result<()> {
    for (i, w) in ranked.windows(2).enumerate() {
        if w[1].pred_iou > w[0].pred_iou {
            return Err(Error::UnsortedProposals { index: i + 1 });
        }
    }
    Ok(())
}

/// Single-pass de-overlapping: walk proposals in descending predicted-IoU
/// order, strip vertices claimed by earlier proposals, and emit each
/// nonempty remainder as a cluster. A proposal whose surviving fraction
/// falls below `min_fraction` is skipped without claiming its vertices.
///
/// Runs in time linear in the total number of vertex occurrences.
pub fn de_overlap(
    ranked: &[ScoredProposal],
    n: usize,
    min_fraction: f64,
) -> Result<Vec<VertexSet>> {
    check_sorted(ranked)?;
    let mut claimed = vec![false; n];
    let mut clusters = Vec::new();
    for sp in ranked {
        let remainder: Vec<usize> = sp
            .vertices
            .iter()
            .filter(|&v| !claimed[v])
            .collect();
        if remainder.is_empty() {
            continue;
        }
        if (remainder.len() as f64) < min_fraction * sp.vertices.len() as f64 {
            continue;
        }
        for &v in &remainder {
            claimed[v] = true;
        }
        clusters.push(VertexSet::new(remainder)?);
    }
    Ok(clusters)
}

/// IoU of two sorted id slices.
fn set_iou(a: &[usize], b: &[usize]) -> f64 {
    let mut inter = 0usize;
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// Greedy non-maximum suppression over ranked proposals: accept a proposal
/// only when its set-IoU with every previously accepted one stays below
/// the threshold. Accepted proposals keep their full vertex sets; residual
/// overlaps are resolved first-accepted-wins so the output is disjoint.
pub fn nms(
    ranked: &[ScoredProposal],
    n: usize,
    iou_threshold: f64,
) -> Result<Vec<VertexSet>> {
    check_sorted(ranked)?;
    let mut accepted: Vec<&ScoredProposal> = Vec::new();
    for sp in ranked {
        let overlaps = accepted
            .iter()
            .any(|acc| set_iou(acc.vertices.ids(), sp.vertices.ids()) >= iou_threshold);
        if !overlaps {
            accepted.push(sp);
        }
    }

    let mut claimed = vec![false; n];
    let mut clusters = Vec::new();
    for sp in accepted {
        let remainder: Vec<usize> = sp
            .vertices
            .iter()
            .filter(|&v| !claimed[v])
            .collect();
        if remainder.is_empty() {
            continue;
        }
        for &v in &remainder {
            claimed[v] = true;
        }
        clusters.push(VertexSet::new(remainder)?);
    }
    Ok(clusters)
}

/// Extend a disjoint partial cluster family to a total clustering of
/// [0, n): every uncovered vertex becomes a singleton, ids renumbered
/// contiguously. A vertex covered twice violates the de-overlap contract
/// and errors.
pub fn finalize(clusters: &[VertexSet], n: usize) -> Result<ClusterSet> {
    let mut assignment: Vec<Option<usize>> = vec![None; n];
    for (cid, cluster) in clusters.iter().enumerate() {
        for v in cluster.iter() {
            if v >= n {
                return Err(Error::InvalidArgument(format!(
                    "cluster vertex {v} out of range for n={n}"
                )));
            }
            if assignment[v].is_some() {
                return Err(Error::DuplicateAssignment { vertex: v });
            }
            assignment[v] = Some(cid);
        }
    }
    let mut next = clusters.len();
    let raw: Vec<usize> = assignment
        .into_iter()
        .map(|slot| {
            slot.unwrap_or_else(|| {
                let id = next;
                next += 1;
                id
            })
        })
        .collect();
    Ok(ClusterSet::from_assignment(raw))
}

/// Counts (and metrics, when labels are supplied) recorded after each
/// pipeline stage.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: &'static str,
    pub count: usize,
    pub metrics: Option<PairwiseMetrics>,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineReport {
    pub stages: Vec<StageReport>,
}

impl PipelineReport {
    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

impl fmt::Display for PipelineReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.stages {
            write!(f, "stage={} count={}", s.stage, s.count)?;
            if let Some(m) = &s.metrics {
                write!(f, " {m}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Run the whole inference chain: propose, score, optionally segment,
/// rank, de-overlap, finalize. The segmenter may be omitted to get the
/// detection-only pipeline. Deterministic for a fixed seed.
#[allow(clippy::too_many_arguments)]
pub fn run_pipeline(
    det: &GcnDetModel,
    seg: Option<&GcnSegModel>,
    emb: &EmbeddingSet,
    labels: Option<&LabelSet>,
    graph_cfg: &GraphConfig,
    pipe_cfg: &PipelineConfig,
    seed: u64,
) -> Result<(ClusterSet, PipelineReport)> {
    pipe_cfg.validate()?;
    let n = emb.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 vertices to cluster".to_string(),
        ));
    }
    let k = graph_cfg.k.clamp(1, n - 1);
    let g = build_knn_graph(emb, k)?;
    let grid: &[f64] = if graph_cfg.e_tau_grid.is_empty() {
        std::slice::from_ref(&graph_cfg.super_vertex.e_tau)
    } else {
        &graph_cfg.e_tau_grid
    };
    let proposals = generate_proposal_grid(&g, emb, &graph_cfg.super_vertex, grid)?;

    let mut report = PipelineReport::default();
    report.stages.push(StageReport {
        stage: "propose",
        count: proposals.len(),
        metrics: None,
    });

    let scored = score_proposals(det, &proposals, &g, emb, pipe_cfg)?;
    let detect_metrics = match labels {
        Some(l) => {
            let mut ranked = scored.clone();
            ranked.sort_by(|a, b| b.pred_iou.partial_cmp(&a.pred_iou).unwrap());
            let clusters = de_overlap(&ranked, n, pipe_cfg.deoverlap_iou_min)?;
            Some(pairwise_metrics(&finalize(&clusters, n)?, l)?)
        }
        None => None,
    };
    report.stages.push(StageReport {
        stage: "detect",
        count: scored.len(),
        metrics: detect_metrics,
    });

    let refined = match seg {
        Some(seg_model) => {
            let mut rng = Rng::new(seed);
            let mut out = Vec::with_capacity(scored.len());
            for sp in &scored {
                let vertices = segment_proposal(seg_model, sp, &g, emb, pipe_cfg, &mut rng)?;
                out.push(ScoredProposal {
                    vertices,
                    pred_iou: sp.pred_iou,
                    pred_iop: sp.pred_iop,
                });
            }
            out
        }
        None => scored,
    };
    if seg.is_some() {
        report.stages.push(StageReport {
            stage: "segment",
            count: refined.len(),
            metrics: None,
        });
    }

    let mut ranked = refined;
    ranked.sort_by(|a, b| b.pred_iou.partial_cmp(&a.pred_iou).unwrap());
    let clusters = de_overlap(&ranked, n, pipe_cfg.deoverlap_iou_min)?;
    report.stages.push(StageReport {
        stage: "deoverlap",
        count: clusters.len(),
        metrics: None,
    });

    let final_clusters = finalize(&clusters, n)?;
    let final_metrics = match labels {
        Some(l) => Some(pairwise_metrics(&final_clusters, l)?),
        None => None,
    };
    report.stages.push(StageReport {
        stage: "final",
        count: final_clusters.num_clusters(),
        metrics: final_metrics,
    });

    Ok((final_clusters, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn sp(ids: &[usize], iou: f64) -> ScoredProposal {
        ScoredProposal {
            vertices: VertexSet::new(ids.to_vec()).unwrap(),
            pred_iou: iou,
            pred_iop: 0.5,
        }
    }

    #[test]
    fn de_overlap_disjoint_inputs_pass_through() {
        let ranked = vec![sp(&[0, 1], 0.9), sp(&[2, 3], 0.8)];
        let clusters = de_overlap(&ranked, 4, 0.0).unwrap();
        assert_eq!(clusters.len(), 2);
        assert_eq!(clusters[0].ids(), &[0, 1]);
        assert_eq!(clusters[1].ids(), &[2, 3]);
    }

    #[test]
    fn de_overlap_strips_seen_vertices() {
        let ranked = vec![sp(&[0, 1, 2], 0.9), sp(&[1, 2, 3], 0.8)];
        let clusters = de_overlap(&ranked, 4, 0.0).unwrap();
        assert_eq!(clusters.len(), 2);
        assert_eq!(clusters[0].ids(), &[0, 1, 2]);
        assert_eq!(clusters[1].ids(), &[3]);
    }

    #[test]
    fn de_overlap_drops_contained_proposal() {
        let ranked = vec![sp(&[0, 1, 2], 0.9), sp(&[1, 2], 0.8)];
        let clusters = de_overlap(&ranked, 3, 0.0).unwrap();
        assert_eq!(clusters.len(), 1);
    }

    #[test]
    fn de_overlap_rejects_unsorted() {
        let ranked = vec![sp(&[0], 0.5), sp(&[1], 0.9)];
        let err = de_overlap(&ranked, 2, 0.0).unwrap_err();
        assert!(matches!(err, Error::UnsortedProposals { index: 1 }));
    }

    #[test]
    fn de_overlap_min_fraction_skips_without_claiming() {
        // second proposal survives only 1/3 < 0.5, so it is skipped and its
        // remaining vertex stays available for the third
        let ranked = vec![sp(&[0, 1], 0.9), sp(&[0, 1, 2], 0.8), sp(&[2], 0.7)];
        let clusters = de_overlap(&ranked, 3, 0.5).unwrap();
        assert_eq!(clusters.len(), 2);
        assert_eq!(clusters[0].ids(), &[0, 1]);
        assert_eq!(clusters[1].ids(), &[2]);
    }

    #[test]
    fn de_overlap_coverage_equals_input_union() {
        let mut rng = Rng::new(41);
        for _ in 0..100 {
            let n = 10 + rng.below(100);
            let count = 1 + rng.below(30);
            let mut ranked: Vec<ScoredProposal> = (0..count)
                .map(|_| {
                    let size = 1 + rng.below(12);
                    ScoredProposal {
                        vertices: VertexSet::new(rng.sample_distinct(n, size)).unwrap(),
                        pred_iou: rng.next_f64(),
                        pred_iop: rng.next_f64(),
                    }
                })
                .collect();
            ranked.sort_by(|a, b| b.pred_iou.partial_cmp(&a.pred_iou).unwrap());
            let clusters = de_overlap(&ranked, n, 0.0).unwrap();

            // disjoint
            let mut seen = vec![false; n];
            for c in &clusters {
                for v in c.iter() {
                    assert!(!seen[v], "vertex {v} claimed twice");
                    seen[v] = true;
                }
            }
            // covers exactly the union of inputs
            let mut union = vec![false; n];
            for p in &ranked {
                for v in p.vertices.iter() {
                    union[v] = true;
                }
            }
            assert_eq!(seen, union);
        }
    }

    #[test]
    fn nms_threshold_one_keeps_non_duplicates() {
        let ranked = vec![sp(&[0, 1, 2], 0.9), sp(&[1, 2, 3], 0.8)];
        let clusters = nms(&ranked, 4, 1.0).unwrap();
        // both accepted (IoU 0.5 < 1.0); overlap resolved first-wins
        assert_eq!(clusters.len(), 2);
        assert_eq!(clusters[0].ids(), &[0, 1, 2]);
        assert_eq!(clusters[1].ids(), &[3]);
    }

    #[test]
    fn nms_suppresses_by_threshold() {
        // overlap IoU = 2/4 = 0.5 is NOT below threshold 0.5
        let ranked = vec![sp(&[0, 1, 2], 0.9), sp(&[1, 2, 3], 0.8)];
        let clusters = nms(&ranked, 4, 0.5).unwrap();
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].ids(), &[0, 1, 2]);
    }

    #[test]
    fn nms_disjoint_all_accepted() {
        let ranked = vec![sp(&[0], 0.9), sp(&[1], 0.5), sp(&[2], 0.1)];
        let clusters = nms(&ranked, 3, 0.01).unwrap();
        assert_eq!(clusters.len(), 3);
    }

    #[test]
    fn finalize_pads_singletons_and_renumbers() {
        let clusters = vec![VertexSet::new(vec![0, 1]).unwrap()];
        let total = finalize(&clusters, 3).unwrap();
        assert_eq!(total.len(), 3);
        assert_eq!(total.num_clusters(), 2);
        assert_eq!(total.cluster_of(0), total.cluster_of(1));
        assert_ne!(total.cluster_of(2), total.cluster_of(0));
    }

    #[test]
    fn finalize_zero_coverage_gives_singletons() {
        let total = finalize(&[], 4).unwrap();
        assert_eq!(total.num_clusters(), 4);
    }

    #[test]
    fn finalize_full_coverage_only_renumbers() {
        let clusters = vec![
            VertexSet::new(vec![2, 3]).unwrap(),
            VertexSet::new(vec![0, 1]).unwrap(),
        ];
        let total = finalize(&clusters, 4).unwrap();
        assert_eq!(total.num_clusters(), 2);
    }

    #[test]
    fn finalize_rejects_double_coverage() {
        let clusters = vec![
            VertexSet::new(vec![0, 1]).unwrap(),
            VertexSet::new(vec![1, 2]).unwrap(),
        ];
        let err = finalize(&clusters, 3).unwrap_err();
        assert!(matches!(err, Error::DuplicateAssignment { vertex: 1 }));
    }

    #[test]
    fn set_iou_hand_cases() {
        assert_eq!(set_iou(&[0, 1], &[0, 1]), 1.0);
        assert_eq!(set_iou(&[0, 1], &[2, 3]), 0.0);
        assert!((set_iou(&[0, 1, 2], &[1, 2, 3]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn scoring_respects_iou_min() {
        use crate::gcn::Pooling;
        let mut rng = Rng::new(12);
        let feats = Matrix::from_vec(20, 4, (0..80).map(|_| rng.normal()).collect()).unwrap();
        let emb = EmbeddingSet::new(feats).unwrap();
        let g = build_knn_graph(&emb, 4).unwrap();
        let cfg = SuperVertexConfig {
            e_tau: 0.2,
            s_max: 8,
            k: 4,
            iterations: 1,
            ..Default::default()
        };
        let props = crate::proposals::generate_proposals(&g, &emb, &cfg).unwrap();
        assert!(!props.is_empty());
        let det = GcnDetModel::new(4, 6, 4, Pooling::Max, &mut rng);

        let keep_all = PipelineConfig::default();
        let scored = score_proposals(&det, &props, &g, &emb, &keep_all).unwrap();
        assert_eq!(scored.len(), props.len());

        let drop_all = PipelineConfig {
            det_iou_min: 1.0 + 1e-9,
            ..Default::default()
        };
        let scored = score_proposals(&det, &props, &g, &emb, &drop_all).unwrap();
        assert!(scored.is_empty());

        let empty = ProposalSet::new();
        let scored = score_proposals(&det, &empty, &g, &emb, &keep_all).unwrap();
        assert!(scored.is_empty());
    }

    #[test]
    fn segmentation_passthrough_outside_gate() {
        use crate::gcn::Pooling;
        let mut rng = Rng::new(13);
        let feats = Matrix::from_vec(10, 3, (0..30).map(|_| rng.normal()).collect()).unwrap();
        let emb = EmbeddingSet::new(feats).unwrap();
        let g = build_knn_graph(&emb, 3).unwrap();
        let _det = GcnDetModel::new(3, 4, 3, Pooling::Max, &mut rng);
        let seg = GcnSegModel::new(3, 4, 3, &mut rng);
        let proposal = ScoredProposal {
            vertices: VertexSet::new(vec![0, 1, 2, 3]).unwrap(),
            pred_iou: 0.8,
            pred_iop: 0.9, // above iop_high: very pure, skip segmentation
        };
        let cfg = PipelineConfig::default();
        let out = segment_proposal(&seg, &proposal, &g, &emb, &cfg, &mut rng).unwrap();
        assert_eq!(out, proposal.vertices);
    }

    #[test]
    fn segmentation_never_empty_and_stays_inside() {
        use crate::gcn::Pooling;
        let mut rng = Rng::new(14);
        let feats = Matrix::from_vec(12, 3, (0..36).map(|_| rng.normal()).collect()).unwrap();
        let emb = EmbeddingSet::new(feats).unwrap();
        let g = build_knn_graph(&emb, 3).unwrap();
        let _det = GcnDetModel::new(3, 4, 3, Pooling::Max, &mut rng);
        let mut seg = GcnSegModel::new(3, 4, 3, &mut rng);
        // force all probabilities below threshold: huge negative bias
        seg.head.weight = Matrix::zeros(3, 1);
        seg.head.bias.set(0, 0, -20.0);
        let proposal = ScoredProposal {
            vertices: VertexSet::new(vec![1, 3, 5, 7]).unwrap(),
            pred_iou: 0.8,
            pred_iop: 0.5,
        };
        let cfg = PipelineConfig::default();
        let out = segment_proposal(&seg, &proposal, &g, &emb, &cfg, &mut rng).unwrap();
        assert_eq!(out, proposal.vertices, "all-below-threshold must pass through");
    }
}
