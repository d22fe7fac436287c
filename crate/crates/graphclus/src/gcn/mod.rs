//! Graph-convolutional machinery: the row-normalized propagation layer,
//! the proposal detector (IoU/IoP regression), the per-vertex segmenter,
//! and momentum-SGD training.
//!
//! Backward passes are hand-derived; the networks are two propagation
//! layers plus linear heads, which is small enough that a tape would cost
//! more than it saves. Every analytic gradient is validated against
//! central finite differences in the tests.

mod detector;
mod segmenter;
mod train;

pub use detector::{det_forward, det_forward_raw, det_loss_and_grads, DetGrads, DetSample, GcnDetModel};
pub use segmenter::{
    seg_forward, seg_loss_and_grads, seg_training_samples, GcnSegModel, SegGrads, SegSample,
};
pub use train::{train, TrainConfig, Trainable};

use crate::error::{Error, Result};
use crate::graph::{induced_subgraph, AffinityGraph, EmbeddingSet, VertexSet};
use crate::numerics::{matmul, relu, Matrix, Rng};

/// Weight matrix of one propagation layer.
#[derive(Debug, Clone)]
pub struct GcnLayerParams {
    /// d_in x d_out transform, initialized uniform(-1/sqrt(d_in), +1/sqrt(d_in)).
    pub weight: Matrix,
}

impl GcnLayerParams {
    pub fn init(d_in: usize, d_out: usize, rng: &mut Rng) -> GcnLayerParams {
        let bound = 1.0 / (d_in as f64).sqrt();
        GcnLayerParams {
            weight: rng.uniform_matrix(d_in, d_out, -bound, bound),
        }
    }
}

/// A linear map to one scalar, with bias. The bias is kept as a 1x1 matrix
/// so the optimizer can treat every parameter uniformly.
#[derive(Debug, Clone)]
pub struct LinearHead {
    /// d x 1 column of weights.
    pub weight: Matrix,
    /// 1x1 bias.
    pub bias: Matrix,
}

impl LinearHead {
    pub fn init(d_in: usize, rng: &mut Rng) -> LinearHead {
        let bound = 1.0 / (d_in as f64).sqrt();
        LinearHead {
            weight: rng.uniform_matrix(d_in, 1, -bound, bound),
            bias: Matrix::zeros(1, 1),
        }
    }

    pub fn bias_value(&self) -> f64 {
        self.bias.get(0, 0)
    }

    /// weight . x + bias for a row vector x.
    fn apply(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.weight.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + self.bias_value()
    }
}

/// Vertex-summary aggregation used by the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Max,
    Mean,
    Sum,
}

impl Pooling {
    pub fn name(&self) -> &'static str {
        match self {
            Pooling::Max => "max",
            Pooling::Mean => "mean",
            Pooling::Sum => "sum",
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Pooling> {
        match s {
            "max" => Ok(Pooling::Max),
            "mean" => Ok(Pooling::Mean),
            "sum" => Ok(Pooling::Sum),
            other => Err(Error::InvalidArgument(format!(
                "unknown pooling '{other}' (expected max, mean, or sum)"
            ))),
        }
    }
}

/// One proposal prepared for the networks: per-vertex input features and
/// the dense symmetric sub-adjacency (zero diagonal, weights clamped to be
/// nonnegative), plus the local-to-global id map.
#[derive(Debug, Clone)]
pub struct SubGraphInstance {
    pub features: Matrix,
    pub adjacency: Matrix,
    pub id_map: Vec<usize>,
}

impl SubGraphInstance {
    /// Build the instance for one proposal. Negative cosine weights are
    /// clamped to zero so propagation stays a weighted average; when
    /// `center` is set the proposal's mean feature vector is subtracted
    /// from every row.
    pub fn from_proposal(
        g: &AffinityGraph,
        emb: &EmbeddingSet,
        v: &VertexSet,
        center: bool,
    ) -> SubGraphInstance {
        let (raw_adj, id_map) = induced_subgraph(g, v);
        let adjacency = raw_adj.map(|w| w.max(0.0));
        let m = id_map.len();
        let d = emb.dim();
        let mut features = Matrix::zeros(m, d);
        for (local, &global) in id_map.iter().enumerate() {
            features.row_mut(local).copy_from_slice(emb.row(global));
        }
        if center {
            let mut mean = vec![0.0; d];
            for r in 0..m {
                for (s, x) in mean.iter_mut().zip(features.row(r)) {
                    *s += x;
                }
            }
            for s in &mut mean {
                *s /= m as f64;
            }
            for r in 0..m {
                for (x, s) in features.row_mut(r).iter_mut().zip(&mean) {
                    *x -= s;
                }
            }
        }
        SubGraphInstance {
            features,
            adjacency,
            id_map,
        }
    }

    pub fn size(&self) -> usize {
        self.id_map.len()
    }
}

/// Row-normalized propagation matrix `D^-1 (A + I)` with
/// `D_ii = 1 + sum_j A_ij`.
///
/// Requires a square, exactly symmetric, zero-diagonal adjacency. With
/// nonnegative weights every diagonal degree is >= 1; a nonpositive degree
/// (possible only with negative weights) is rejected.
pub fn propagation_matrix(adj: &Matrix) -> Result<Matrix> {
    let n = adj.rows();
    if adj.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "propagation_matrix",
            lhs_rows: adj.rows(),
            lhs_cols: adj.cols(),
            rhs_rows: n,
            rhs_cols: n,
        });
    }
    for i in 0..n {
        if adj.get(i, i) != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "adjacency diagonal must be zero, got {} at {i}",
                adj.get(i, i)
            )));
        }
        for j in (i + 1)..n {
            if adj.get(i, j) != adj.get(j, i) {
                return Err(Error::AsymmetricAdjacency { row: i, col: j });
            }
        }
    }
    let mut prop = Matrix::zeros(n, n);
    for i in 0..n {
        let degree = 1.0 + adj.row(i).iter().sum::<f64>();
        if degree <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "nonpositive propagation degree {degree} at vertex {i}"
            )));
        }
        let inv = 1.0 / degree;
        for j in 0..n {
            let a = if i == j { 1.0 } else { adj.get(i, j) };
            if a != 0.0 {
                prop.set(i, j, a * inv);
            }
        }
    }
    Ok(prop)
}

/// One graph-convolution layer: `sigma(D^-1 (A + I) X W)` where `sigma` is
/// ReLU when `activate` is set and identity otherwise.
pub fn gcn_layer_forward(
    x: &Matrix,
    adj: &Matrix,
    params: &GcnLayerParams,
    activate: bool,
) -> Result<Matrix> {
    let prop = propagation_matrix(adj)?;
    if x.rows() != adj.rows() {
        return Err(Error::ShapeMismatch {
            op: "gcn_layer_forward",
            lhs_rows: x.rows(),
            lhs_cols: x.cols(),
            rhs_rows: adj.rows(),
            rhs_cols: adj.cols(),
        });
    }
    let z = matmul(&matmul(&prop, x)?, &params.weight)?;
    Ok(if activate { relu(&z) } else { z })
}

/// Forward state of the two shared propagation layers, kept for backward.
pub(crate) struct StackCache {
    pub prop: Matrix, // P
    pub px: Matrix,   // P X
    pub z1: Matrix,   // P X W1
    pub h1: Matrix,   // relu(z1)
    pub ph1: Matrix,  // P H1
    pub z2: Matrix,   // P H1 W2
    pub h2: Matrix,   // relu(z2)
}

pub(crate) fn stack_forward(
    input: &Matrix,
    adj: &Matrix,
    layers: &[GcnLayerParams; 2],
) -> Result<StackCache> {
    let prop = propagation_matrix(adj)?;
    let px = matmul(&prop, input)?;
    let z1 = matmul(&px, &layers[0].weight)?;
    let h1 = relu(&z1);
    let ph1 = matmul(&prop, &h1)?;
    let z2 = matmul(&ph1, &layers[1].weight)?;
    let h2 = relu(&z2);
    Ok(StackCache {
        prop,
        px,
        z1,
        h1,
        ph1,
        z2,
        h2,
    })
}

/// Backward through both layers given dL/dH2. Returns (dW1, dW2).
/// ReLU subgradient at zero is taken as zero.
pub(crate) fn stack_backward(
    cache: &StackCache,
    layers: &[GcnLayerParams; 2],
    d_h2: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let d_z2 = mask_relu(d_h2, &cache.z2);
    let d_w2 = matmul(&cache.ph1.transpose(), &d_z2)?;
    let d_ph1 = matmul(&d_z2, &layers[1].weight.transpose())?;
    let d_h1 = matmul(&cache.prop.transpose(), &d_ph1)?;
    let d_z1 = mask_relu(&d_h1, &cache.z1);
    let d_w1 = matmul(&cache.px.transpose(), &d_z1)?;
    Ok((d_w1, d_w2))
}

fn mask_relu(upstream: &Matrix, pre_activation: &Matrix) -> Matrix {
    let mut out = upstream.clone();
    for (g, &z) in out.data_mut().iter_mut().zip(pre_activation.data()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

/// Column-wise pooling of h2 into a single summary vector. For max pooling
/// also returns the winning row per column (first row on ties), which is
/// where the gradient routes.
pub(crate) fn pool(h2: &Matrix, pooling: Pooling) -> (Vec<f64>, Option<Vec<usize>>) {
    let (m, d) = h2.shape();
    match pooling {
        Pooling::Max => {
            let mut pooled = vec![f64::NEG_INFINITY; d];
            let mut rows = vec![0usize; d];
            for r in 0..m {
                for (c, &v) in h2.row(r).iter().enumerate() {
                    if v > pooled[c] {
                        pooled[c] = v;
                        rows[c] = r;
                    }
                }
            }
            (pooled, Some(rows))
        }
        Pooling::Mean | Pooling::Sum => {
            let mut pooled = vec![0.0; d];
            for r in 0..m {
                for (c, &v) in h2.row(r).iter().enumerate() {
                    pooled[c] += v;
                }
            }
            if pooling == Pooling::Mean {
                for v in &mut pooled {
                    *v /= m as f64;
                }
            }
            (pooled, None)
        }
    }
}

/// Scatter dL/dpooled back to dL/dH2 according to the pooling rule.
pub(crate) fn unpool(
    d_pooled: &[f64],
    rows: usize,
    pooling: Pooling,
    argmax: Option<&[usize]>,
) -> Matrix {
    let d = d_pooled.len();
    let mut out = Matrix::zeros(rows, d);
    match pooling {
        Pooling::Max => {
            let argmax = argmax.expect("max pooling recorded argmax rows");
            for (c, (&g, &r)) in d_pooled.iter().zip(argmax).enumerate() {
                out.set(r, c, g);
            }
        }
        Pooling::Mean => {
            let inv = 1.0 / rows as f64;
            for r in 0..rows {
                for (x, &g) in out.row_mut(r).iter_mut().zip(d_pooled) {
                    *x = g * inv;
                }
            }
        }
        Pooling::Sum => {
            for r in 0..rows {
                out.row_mut(r).copy_from_slice(d_pooled);
            }
        }
    }
    out
}
