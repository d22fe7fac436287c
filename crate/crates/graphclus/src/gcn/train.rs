//! Momentum-SGD training shared by both networks.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Anything the SGD loop can train: exposes its parameters in a fixed
/// order and computes batch loss with matching gradients.
pub trait Trainable {
    type Sample;

    fn loss_and_grads(&self, batch: &[&Self::Sample]) -> Result<(f64, Vec<Matrix>)>;

    /// Mutable references to every parameter, in the same order the
    /// gradients come back.
    fn params_mut(&mut self) -> Vec<&mut Matrix>;
}

/// Optimizer settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once the epoch-mean loss drops below this value. Stopping is a
    /// deterministic function of the loss trace, so same-seed reruns still
    /// match bit for bit.
    pub loss_target: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            loss_target: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size 0".to_string()));
        }
        Ok(())
    }
}

/// Classic momentum SGD over shuffled mini-batches:
/// `v = momentum * v - lr * grad; param += v`.
///
/// Returns the per-epoch mean batch loss. Shuffling comes from the seeded
/// generator, so the whole run is reproducible. Diverging (non-finite)
/// loss aborts with the epoch and batch in the error.
pub fn train<M: Trainable>(
    model: &mut M,
    data: &[M::Sample],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".to_string()));
    }

    let shapes: Vec<(usize, usize)> = model
        .params_mut()
        .iter()
        .map(|p| p.shape())
        .collect();
    let mut velocity: Vec<Matrix> = shapes
        .iter()
        .map(|&(r, c)| Matrix::zeros(r, c))
        .collect();

    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;

        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&M::Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = model.loss_and_grads(&batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            let mut params = model.params_mut();
            debug_assert_eq!(params.len(), grads.len());
            for ((param, vel), grad) in params.iter_mut().zip(&mut velocity).zip(&grads) {
                for (v, g) in vel.data_mut().iter_mut().zip(grad.data()) {
                    *v = cfg.momentum * *v - cfg.learning_rate * g;
                }
                param.add_scaled(vel, 1.0)?;
            }
            epoch_loss += loss;
            batches += 1;
        }

        let mean = epoch_loss / batches as f64;
        trace.push(mean);
        if let Some(target) = cfg.loss_target {
            if mean < target {
                break;
            }
        }
    }

    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::QualityScores;
    use crate::gcn::test_support::random_instance;
    use crate::gcn::{det_loss_and_grads, DetSample, GcnDetModel, Pooling};

    fn toy_dataset(rng: &mut Rng, count: usize) -> Vec<DetSample> {
        (0..count)
            .map(|_| {
                let n = 3 + rng.below(5);
                let instance = random_instance(rng, n, 3);
                DetSample {
                    instance,
                    target: QualityScores {
                        iou: rng.next_f64(),
                        iop: rng.next_f64(),
                    },
                }
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut rng = Rng::new(1);
        let mut model = GcnDetModel::new(3, 4, 3, Pooling::Max, &mut rng);
        let snapshot = model.clone();
        let data = toy_dataset(&mut rng, 8);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 5,
            batch_size: 4,
            ..Default::default()
        };
        train(&mut model, &data, &cfg).unwrap();
        assert_eq!(model.layers[0].weight, snapshot.layers[0].weight);
        assert_eq!(model.layers[1].weight, snapshot.layers[1].weight);
        assert_eq!(model.head_iou.weight, snapshot.head_iou.weight);
        assert_eq!(model.head_iop.weight, snapshot.head_iop.weight);
    }

    #[test]
    fn same_seed_runs_are_bit_identical() {
        let mut rng = Rng::new(2);
        let data = toy_dataset(&mut rng, 12);
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 4,
            seed: 99,
            ..Default::default()
        };

        let mut rng_a = Rng::new(7);
        let mut model_a = GcnDetModel::new(3, 4, 3, Pooling::Max, &mut rng_a);
        let trace_a = train(&mut model_a, &data, &cfg).unwrap();

        let mut rng_b = Rng::new(7);
        let mut model_b = GcnDetModel::new(3, 4, 3, Pooling::Max, &mut rng_b);
        let trace_b = train(&mut model_b, &data, &cfg).unwrap();

        assert_eq!(trace_a, trace_b);
        for (a, b) in [
            (&model_a.layers[0].weight, &model_b.layers[0].weight),
            (&model_a.layers[1].weight, &model_b.layers[1].weight),
            (&model_a.head_iou.weight, &model_b.head_iou.weight),
            (&model_a.head_iop.weight, &model_b.head_iop.weight),
        ] {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn small_lr_loss_is_nonincreasing_within_tolerance() {
        let mut rng = Rng::new(3);
        let mut model = GcnDetModel::new(3, 4, 3, Pooling::Max, &mut rng);
        let data = toy_dataset(&mut rng, 6);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 40,
            batch_size: 6, // full batch: trace is the exact dataset loss
            seed: 5,
            ..Default::default()
        };
        let trace = train(&mut model, &data, &cfg).unwrap();
        for w in trace.windows(2) {
            assert!(
                w[1] <= w[0] * 1.05,
                "loss increased beyond momentum tolerance: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn overfits_a_tiny_dataset() {
        let mut rng = Rng::new(4);
        let mut model = GcnDetModel::new(3, 8, 6, Pooling::Max, &mut rng);
        let data = toy_dataset(&mut rng, 4);
        let cfg = TrainConfig {
            epochs: 400,
            batch_size: 4,
            seed: 11,
            loss_target: Some(1e-4),
            ..Default::default()
        };
        let trace = train(&mut model, &data, &cfg).unwrap();
        let refs: Vec<&DetSample> = data.iter().collect();
        let (final_loss, _) = det_loss_and_grads(&model, &refs).unwrap();
        assert!(
            final_loss < 1e-3,
            "failed to overfit 4 samples: loss {final_loss}, epochs {}",
            trace.len()
        );
    }

    #[test]
    fn rejects_bad_configs_and_empty_data() {
        let mut rng = Rng::new(5);
        let mut model = GcnDetModel::new(3, 4, 3, Pooling::Max, &mut rng);
        let data = toy_dataset(&mut rng, 2);
        for cfg in [
            TrainConfig {
                learning_rate: -1.0,
                ..Default::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(train(&mut model, &data, &cfg).is_err());
        }
        let cfg = TrainConfig::default();
        let empty: Vec<DetSample> = vec![];
        assert!(train(&mut model, &empty, &cfg).is_err());
    }
}
