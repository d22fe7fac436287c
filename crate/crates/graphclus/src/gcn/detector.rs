//! Proposal detector: two propagation layers, a column-wise pooling
//! summary, and two independent linear heads regressing IoU and IoP.

use crate::error::{Error, Result};
use crate::eval::QualityScores;
use crate::numerics::{Matrix, Rng};

use super::{
    pool, stack_backward, stack_forward, unpool, GcnLayerParams, LinearHead, Pooling,
    SubGraphInstance, Trainable,
};

/// Parameter bundle of the detection network.
#[derive(Debug, Clone)]
pub struct GcnDetModel {
    pub layers: [GcnLayerParams; 2],
    pub head_iou: LinearHead,
    pub head_iop: LinearHead,
    /// (d_in, h1, h2)
    pub dims: (usize, usize, usize),
    pub pooling: Pooling,
    /// Whether instances fed to this model carry per-proposal centered
    /// features. Recorded here so inference preprocesses like training did.
    pub center_inputs: bool,
}

impl GcnDetModel {
    pub fn new(d_in: usize, h1: usize, h2: usize, pooling: Pooling, rng: &mut Rng) -> GcnDetModel {
        GcnDetModel {
            layers: [
                GcnLayerParams::init(d_in, h1, rng),
                GcnLayerParams::init(h1, h2, rng),
            ],
            head_iou: LinearHead::init(h2, rng),
            head_iop: LinearHead::init(h2, rng),
            dims: (d_in, h1, h2),
            pooling,
            center_inputs: true,
        }
    }

    fn check_instance(&self, inst: &SubGraphInstance) -> Result<()> {
        if inst.features.cols() != self.dims.0 {
            return Err(Error::ShapeMismatch {
                op: "det_forward",
                lhs_rows: inst.features.rows(),
                lhs_cols: inst.features.cols(),
                rhs_rows: self.dims.0,
                rhs_cols: self.dims.1,
            });
        }
        Ok(())
    }
}

/// One labeled training example for the detector.
#[derive(Debug, Clone)]
pub struct DetSample {
    pub instance: SubGraphInstance,
    pub target: QualityScores,
}

/// Gradients for every detector parameter, in declaration order.
#[derive(Debug, Clone)]
pub struct DetGrads {
    pub layers: [Matrix; 2],
    pub head_iou_weight: Matrix,
    pub head_iou_bias: Matrix,
    pub head_iop_weight: Matrix,
    pub head_iop_bias: Matrix,
}

impl DetGrads {
    fn zeros(model: &GcnDetModel) -> DetGrads {
        let (d_in, h1, h2) = model.dims;
        DetGrads {
            layers: [Matrix::zeros(d_in, h1), Matrix::zeros(h1, h2)],
            head_iou_weight: Matrix::zeros(h2, 1),
            head_iou_bias: Matrix::zeros(1, 1),
            head_iop_weight: Matrix::zeros(h2, 1),
            head_iop_bias: Matrix::zeros(1, 1),
        }
    }

    pub fn into_vec(self) -> Vec<Matrix> {
        let [l0, l1] = self.layers;
        vec![
            l0,
            l1,
            self.head_iou_weight,
            self.head_iou_bias,
            self.head_iop_weight,
            self.head_iop_bias,
        ]
    }
}

/// Raw (unclamped) IoU and IoP predictions, as used by the training loss.
pub fn det_forward_raw(model: &GcnDetModel, inst: &SubGraphInstance) -> Result<(f64, f64)> {
    model.check_instance(inst)?;
    let cache = stack_forward(&inst.features, &inst.adjacency, &model.layers)?;
    let (pooled, _) = pool(&cache.h2, model.pooling);
    Ok((
        model.head_iou.apply(&pooled),
        model.head_iop.apply(&pooled),
    ))
}

/// Inference-time prediction with outputs clamped to [0, 1].
pub fn det_forward(model: &GcnDetModel, inst: &SubGraphInstance) -> Result<QualityScores> {
    let (iou, iop) = det_forward_raw(model, inst)?;
    Ok(QualityScores {
        iou: iou.clamp(0.0, 1.0),
        iop: iop.clamp(0.0, 1.0),
    })
}

/// Mean over the batch of `[(iou - gt_iou)^2 + (iop - gt_iop)^2] / 2`, with
/// hand-derived gradients for every parameter. The max-pool subgradient
/// routes each column to its winning row (first row on ties).
pub fn det_loss_and_grads(
    model: &GcnDetModel,
    batch: &[&DetSample],
) -> Result<(f64, DetGrads)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty detection batch".to_string()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = DetGrads::zeros(model);

    for sample in batch {
        model.check_instance(&sample.instance)?;
        let inst = &sample.instance;
        let cache = stack_forward(&inst.features, &inst.adjacency, &model.layers)?;
        let (pooled, argmax) = pool(&cache.h2, model.pooling);
        let iou_pred = model.head_iou.apply(&pooled);
        let iop_pred = model.head_iop.apply(&pooled);
        let d_iou = iou_pred - sample.target.iou;
        let d_iop = iop_pred - sample.target.iop;
        loss += scale * 0.5 * (d_iou * d_iou + d_iop * d_iop);

        // heads: dL/dw = residual * pooled, dL/db = residual
        let d_iou = d_iou * scale;
        let d_iop = d_iop * scale;
        for (j, &p) in pooled.iter().enumerate() {
            let w = grads.head_iou_weight.get(j, 0);
            grads.head_iou_weight.set(j, 0, w + d_iou * p);
            let w = grads.head_iop_weight.get(j, 0);
            grads.head_iop_weight.set(j, 0, w + d_iop * p);
        }
        grads
            .head_iou_bias
            .set(0, 0, grads.head_iou_bias.get(0, 0) + d_iou);
        grads
            .head_iop_bias
            .set(0, 0, grads.head_iop_bias.get(0, 0) + d_iop);

        // pooled summary: both heads feed back into it
        let d_pooled: Vec<f64> = (0..pooled.len())
            .map(|j| d_iou * model.head_iou.weight.get(j, 0) + d_iop * model.head_iop.weight.get(j, 0))
            .collect();
        let d_h2 = unpool(&d_pooled, inst.size(), model.pooling, argmax.as_deref());
        let (d_w1, d_w2) = stack_backward(&cache, &model.layers, &d_h2)?;
        grads.layers[0].add_scaled(&d_w1, 1.0)?;
        grads.layers[1].add_scaled(&d_w2, 1.0)?;
    }

    Ok((loss, grads))
}

impl Trainable for GcnDetModel {
    type Sample = DetSample;

    fn loss_and_grads(&self, batch: &[&DetSample]) -> Result<(f64, Vec<Matrix>)> {
        let (loss, grads) = det_loss_and_grads(self, batch)?;
        Ok((loss, grads.into_vec()))
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.layers[0].weight,
            &mut self.layers[1].weight,
            &mut self.head_iou.weight,
            &mut self.head_iou.bias,
            &mut self.head_iop.weight,
            &mut self.head_iop.bias,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gcn::test_support::{permute_instance, random_instance};
    use crate::numerics::grad_check;

    fn small_model(rng: &mut Rng, pooling: Pooling) -> GcnDetModel {
        GcnDetModel::new(3, 5, 4, pooling, rng)
    }

    #[test]
    fn single_vertex_pooling_degenerates_to_heads() {
        let mut rng = Rng::new(1);
        let model = small_model(&mut rng, Pooling::Max);
        let inst = SubGraphInstance {
            features: rng.uniform_matrix(1, 3, -1.0, 1.0),
            adjacency: Matrix::zeros(1, 1),
            id_map: vec![0],
        };
        let cache = stack_forward(&inst.features, &inst.adjacency, &model.layers).unwrap();
        let (raw_iou, raw_iop) = det_forward_raw(&model, &inst).unwrap();
        let row: Vec<f64> = cache.h2.row(0).to_vec();
        assert!((model.head_iou.apply(&row) - raw_iou).abs() < 1e-15);
        assert!((model.head_iop.apply(&row) - raw_iop).abs() < 1e-15);
    }

    #[test]
    fn zeroed_model_predicts_zero() {
        let mut rng = Rng::new(2);
        let mut model = small_model(&mut rng, Pooling::Max);
        model.head_iou.weight = Matrix::zeros(4, 1);
        model.head_iop.weight = Matrix::zeros(4, 1);
        let inst = SubGraphInstance {
            features: Matrix::zeros(3, 3),
            adjacency: Matrix::zeros(3, 3),
            id_map: vec![0, 1, 2],
        };
        let (iou, iop) = det_forward_raw(&model, &inst).unwrap();
        assert_eq!(iou, 0.0);
        assert_eq!(iop, 0.0);
    }

    #[test]
    fn forward_clamps_at_inference() {
        let mut rng = Rng::new(3);
        let mut model = small_model(&mut rng, Pooling::Sum);
        model.head_iou.bias.set(0, 0, 5.0);
        model.head_iop.bias.set(0, 0, -5.0);
        let inst = random_instance(&mut rng, 4, 3);
        let q = det_forward(&model, &inst).unwrap();
        assert!(q.iou <= 1.0 && q.iop >= 0.0);
    }

    #[test]
    fn loss_zero_when_predictions_match_targets() {
        let mut rng = Rng::new(4);
        let model = small_model(&mut rng, Pooling::Max);
        let inst = random_instance(&mut rng, 5, 3);
        let (iou, iop) = det_forward_raw(&model, &inst).unwrap();
        let sample = DetSample {
            instance: inst,
            target: QualityScores { iou, iop },
        };
        let (loss, grads) = det_loss_and_grads(&model, &[&sample]).unwrap();
        assert!(loss.abs() < 1e-28);
        for g in grads.into_vec() {
            assert!(g.data().iter().all(|&v| v.abs() < 1e-13));
        }
    }

    #[test]
    fn duplicating_batch_preserves_mean_loss() {
        let mut rng = Rng::new(5);
        let model = small_model(&mut rng, Pooling::Max);
        let samples: Vec<DetSample> = (0..3)
            .map(|_| DetSample {
                instance: random_instance(&mut rng, 4, 3),
                target: QualityScores {
                    iou: rng.next_f64(),
                    iop: rng.next_f64(),
                },
            })
            .collect();
        let once: Vec<&DetSample> = samples.iter().collect();
        let twice: Vec<&DetSample> = samples.iter().chain(samples.iter()).collect();
        let (l1, _) = det_loss_and_grads(&model, &once).unwrap();
        let (l2, _) = det_loss_and_grads(&model, &twice).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
    }

    #[test]
    fn det_forward_invariant_under_vertex_permutation() {
        let mut rng = Rng::new(6);
        for pooling in [Pooling::Max, Pooling::Mean, Pooling::Sum] {
            let model = small_model(&mut rng, pooling);
            for _ in 0..20 {
                let n = 2 + rng.below(7);
                let inst = random_instance(&mut rng, n, 3);
                let mut perm: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut perm);
                let permuted = permute_instance(&inst, &perm);
                let (a_iou, a_iop) = det_forward_raw(&model, &inst).unwrap();
                let (b_iou, b_iop) = det_forward_raw(&model, &permuted).unwrap();
                assert!((a_iou - b_iou).abs() < 1e-9, "{pooling:?}");
                assert!((a_iop - b_iop).abs() < 1e-9, "{pooling:?}");
            }
        }
    }

    /// Finite-difference validation of every parameter gradient, for each
    /// pooling variant.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(7);
        for pooling in [Pooling::Max, Pooling::Mean, Pooling::Sum] {
            let model = small_model(&mut rng, pooling);
            let batch: Vec<DetSample> = (0..3)
                .map(|_| DetSample {
                    instance: random_instance(&mut rng, 6, 3),
                    target: QualityScores {
                        iou: rng.next_f64(),
                        iop: rng.next_f64(),
                    },
                })
                .collect();
            let refs: Vec<&DetSample> = batch.iter().collect();
            let (_, grads) = det_loss_and_grads(&model, &refs).unwrap();
            let grads = grads.into_vec();

            for (idx, analytic) in grads.iter().enumerate() {
                let point = param(&model, idx).clone();
                let err = grad_check(
                    |w| {
                        let mut probe = model.clone();
                        *param_mut(&mut probe, idx) = w.clone();
                        det_loss_and_grads(&probe, &refs).map(|(l, _)| l)
                    },
                    analytic,
                    &point,
                    1e-6,
                )
                .unwrap();
                assert!(
                    err < 1e-5,
                    "{pooling:?} param {idx}: finite-difference error {err}"
                );
            }
        }
    }

    fn param<'a>(m: &'a GcnDetModel, idx: usize) -> &'a Matrix {
        match idx {
            0 => &m.layers[0].weight,
            1 => &m.layers[1].weight,
            2 => &m.head_iou.weight,
            3 => &m.head_iou.bias,
            4 => &m.head_iop.weight,
            5 => &m.head_iop.bias,
            _ => unreachable!(),
        }
    }

    fn param_mut<'a>(m: &'a mut GcnDetModel, idx: usize) -> &'a mut Matrix {
        match idx {
            0 => &mut m.layers[0].weight,
            1 => &mut m.layers[1].weight,
            2 => &mut m.head_iou.weight,
            3 => &mut m.head_iou.bias,
            4 => &mut m.head_iop.weight,
            5 => &mut m.head_iop.bias,
            _ => unreachable!(),
        }
    }
}
