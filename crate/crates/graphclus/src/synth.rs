//! Synthetic labeled embedding sets: per-class random unit centers with
//! isotropic Gaussian spread, plus a configurable fraction of label-noise
//! outliers re-drawn uniformly on the sphere.

use crate::error::{Error, Result};
use crate::eval::LabelSet;
use crate::graph::EmbeddingSet;
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub num_classes: usize,
    /// Inclusive range of members per class; equal bounds give balanced
    /// classes.
    pub points_per_class: (usize, usize),
    pub dim: usize,
    /// Per-coordinate standard deviation of the intra-class spread.
    pub intra_class_noise: f64,
    /// Fraction of points re-drawn uniformly on the sphere while keeping
    /// their class label.
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 20,
            points_per_class: (50, 50),
            dim: 32,
            intra_class_noise: 0.15,
            outlier_fraction: 0.05,
            seed: 1,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "dim must be at least 2, got {}",
                self.dim
            )));
        }
        if self.intra_class_noise < 0.0 {
            return Err(Error::InvalidArgument(
                "intra_class_noise must be nonnegative".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::InvalidArgument(
                "outlier_fraction must be in [0, 1)".to_string(),
            ));
        }
        if self.num_classes == 0 || self.points_per_class.0 == 0 {
            return Err(Error::InvalidArgument(
                "need at least one class with at least one point".to_string(),
            ));
        }
        if self.points_per_class.0 > self.points_per_class.1 {
            return Err(Error::InvalidArgument(format!(
                "points_per_class range ({}, {}) is inverted",
                self.points_per_class.0, self.points_per_class.1
            )));
        }
        Ok(())
    }
}

fn random_unit(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Generate a labeled dataset. Deterministic for a fixed config.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<(EmbeddingSet, LabelSet)> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();

    for class in 0..cfg.num_classes {
        let center = random_unit(&mut rng, cfg.dim);
        let (lo, hi) = cfg.points_per_class;
        let count = lo + rng.below(hi - lo + 1);
        for _ in 0..count {
            let mut point: Vec<f64> = center
                .iter()
                .map(|&c| c + cfg.intra_class_noise * rng.normal())
                .collect();
            let norm = point.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                // noise cancelled the center entirely; resample uniformly
                point = random_unit(&mut rng, cfg.dim);
            } else {
                for x in &mut point {
                    *x /= norm;
                }
            }
            if cfg.outlier_fraction > 0.0 && rng.next_f64() < cfg.outlier_fraction {
                point = random_unit(&mut rng, cfg.dim);
            }
            rows.push(point);
            labels.push(class);
        }
    }

    let n = rows.len();
    let emb = EmbeddingSet::new(Matrix::from_vec(
        n,
        cfg.dim,
        rows.concat(),
    )?)?;
    Ok((emb, LabelSet::new(labels)))
}
