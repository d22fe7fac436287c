//! Per-vertex segmenter: given a proposal and a designated seed vertex, a
//! two-layer propagation stack followed by a per-vertex linear head and
//! sigmoid predicts how likely each vertex shares the seed's class.

use crate::error::{Error, Result};
use crate::eval::LabelSet;
use crate::graph::VertexSet;
use crate::numerics::{matmul, scalar_sigmoid, Matrix, Rng};

use super::{
    stack_backward, stack_forward, GcnLayerParams, LinearHead, SubGraphInstance, Trainable,
};

/// Parameter bundle of the segmentation network. The input dimension is
/// the feature dimension plus one: a 0/1 seed-indicator channel is
/// concatenated to every vertex feature.
#[derive(Debug, Clone)]
pub struct GcnSegModel {
    pub layers: [GcnLayerParams; 2],
    pub head: LinearHead,
    /// (d_in + 1, h1, h2)
    pub dims: (usize, usize, usize),
    pub center_inputs: bool,
}

impl GcnSegModel {
    /// `feature_dim` is the raw embedding dimension; the indicator channel
    /// is accounted for internally.
    pub fn new(feature_dim: usize, h1: usize, h2: usize, rng: &mut Rng) -> GcnSegModel {
        let d_in = feature_dim + 1;
        GcnSegModel {
            layers: [
                GcnLayerParams::init(d_in, h1, rng),
                GcnLayerParams::init(h1, h2, rng),
            ],
            head: LinearHead::init(h2, rng),
            dims: (d_in, h1, h2),
            center_inputs: true,
        }
    }
}

/// One training example: an instance, the seed vertex (local index), and
/// the 0/1 per-vertex targets.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub instance: SubGraphInstance,
    pub seed: usize,
    pub target: Vec<f64>,
}

/// Gradients for every segmenter parameter, in declaration order.
#[derive(Debug, Clone)]
pub struct SegGrads {
    pub layers: [Matrix; 2],
    pub head_weight: Matrix,
    pub head_bias: Matrix,
}

impl SegGrads {
    fn zeros(model: &GcnSegModel) -> SegGrads {
        let (d_in, h1, h2) = model.dims;
        SegGrads {
            layers: [Matrix::zeros(d_in, h1), Matrix::zeros(h1, h2)],
            head_weight: Matrix::zeros(h2, 1),
            head_bias: Matrix::zeros(1, 1),
        }
    }

    pub fn into_vec(self) -> Vec<Matrix> {
        let [l0, l1] = self.layers;
        vec![l0, l1, self.head_weight, self.head_bias]
    }
}

/// Features with the seed-indicator column appended: 1 at the seed row,
/// 0 elsewhere.
fn with_indicator(inst: &SubGraphInstance, seed: usize) -> Result<Matrix> {
    let m = inst.size();
    if seed >= m {
        return Err(Error::InvalidArgument(format!(
            "seed vertex {seed} out of range for proposal of size {m}"
        )));
    }
    let d = inst.features.cols();
    let mut out = Matrix::zeros(m, d + 1);
    for r in 0..m {
        out.row_mut(r)[..d].copy_from_slice(inst.features.row(r));
    }
    out.set(seed, d, 1.0);
    Ok(out)
}

fn check_dims(model: &GcnSegModel, inst: &SubGraphInstance) -> Result<()> {
    if inst.features.cols() + 1 != model.dims.0 {
        return Err(Error::ShapeMismatch {
            op: "seg_forward",
            lhs_rows: inst.features.rows(),
            lhs_cols: inst.features.cols() + 1,
            rhs_rows: model.dims.0,
            rhs_cols: model.dims.1,
        });
    }
    Ok(())
}

/// Per-vertex logits before the sigmoid; kept separate so the loss can use
/// the numerically stable logits form.
fn seg_logits(model: &GcnSegModel, inst: &SubGraphInstance, seed: usize) -> Result<(Vec<f64>, super::StackCache)> {
    check_dims(model, inst)?;
    let input = with_indicator(inst, seed)?;
    let cache = stack_forward(&input, &inst.adjacency, &model.layers)?;
    let logits = matmul(&cache.h2, &model.head.weight)?;
    let b = model.head.bias_value();
    Ok((logits.data().iter().map(|z| z + b).collect(), cache))
}

/// Probability, per vertex of the proposal, of sharing the seed's class.
pub fn seg_forward(
    model: &GcnSegModel,
    inst: &SubGraphInstance,
    seed: usize,
) -> Result<Vec<f64>> {
    let (logits, _) = seg_logits(model, inst, seed)?;
    Ok(logits.into_iter().map(scalar_sigmoid).collect())
}

/// Draw `num_seeds` distinct random seeds from the proposal (clamped to its
/// size); each seed yields the binary target "same label as the seed".
pub fn seg_training_samples(
    p: &VertexSet,
    labels: &LabelSet,
    num_seeds: usize,
    rng: &mut Rng,
) -> Vec<(usize, Vec<f64>)> {
    let member_labels: Vec<usize> = p.iter().map(|v| labels.get(v)).collect();
    let seeds = rng.sample_distinct(p.len(), num_seeds.max(1));
    seeds
        .into_iter()
        .map(|seed| {
            let seed_label = member_labels[seed];
            let target = member_labels
                .iter()
                .map(|&l| if l == seed_label { 1.0 } else { 0.0 })
                .collect();
            (seed, target)
        })
        .collect()
}

/// Mean over the batch of the per-sample mean vertex-wise binary
/// cross-entropy, computed from logits so confident predictions never hit
/// log(0). Gradients are hand-derived.
pub fn seg_loss_and_grads(
    model: &GcnSegModel,
    batch: &[&SegSample],
) -> Result<(f64, SegGrads)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument(
            "empty segmentation batch".to_string(),
        ));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = SegGrads::zeros(model);

    for sample in batch {
        let inst = &sample.instance;
        let m = inst.size();
        if sample.target.len() != m {
            return Err(Error::InvalidArgument(format!(
                "target length {} does not match proposal size {m}",
                sample.target.len()
            )));
        }
        let (logits, cache) = seg_logits(model, inst, sample.seed)?;

        // stable BCE from logits: max(z,0) - z t + ln(1 + exp(-|z|))
        let mut sample_loss = 0.0;
        let mut d_logits = Matrix::zeros(m, 1);
        for (v, (&z, &t)) in logits.iter().zip(&sample.target).enumerate() {
            sample_loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
            d_logits.set(v, 0, (scalar_sigmoid(z) - t) * scale / m as f64);
        }
        loss += scale * sample_loss / m as f64;

        // head: logits = H2 w + b
        let d_w = matmul(&cache.h2.transpose(), &d_logits)?;
        grads.head_weight.add_scaled(&d_w, 1.0)?;
        let d_b: f64 = d_logits.data().iter().sum();
        grads.head_bias.set(0, 0, grads.head_bias.get(0, 0) + d_b);

        let d_h2 = matmul(&d_logits, &model.head.weight.transpose())?;
        let (d_w1, d_w2) = stack_backward(&cache, &model.layers, &d_h2)?;
        grads.layers[0].add_scaled(&d_w1, 1.0)?;
        grads.layers[1].add_scaled(&d_w2, 1.0)?;
    }

    Ok((loss, grads))
}

impl Trainable for GcnSegModel {
    type Sample = SegSample;

    fn loss_and_grads(&self, batch: &[&SegSample]) -> Result<(f64, Vec<Matrix>)> {
        let (loss, grads) = seg_loss_and_grads(self, batch)?;
        Ok((loss, grads.into_vec()))
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.layers[0].weight,
            &mut self.layers[1].weight,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }
}
