//! Mixup: convex combinations of randomly paired training examples.
//!
//! Each example `j` is paired with `j' = π(j)` for a uniformly random
//! permutation `π` of the batch and replaced by
//! `x̃_j = (1−λ_j) x_j + λ_j x_{j'}`, `ỹ_j = (1−λ_j) y_j + λ_j y_{j'}`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MixupError {
    #[error("Beta concentration must be positive, got {0}")]
    Alpha(f64),
    #[error("fixed interpolation weight must lie in [0, 1], got {0}")]
    FixedLambda(f64),
    #[error("cannot mix an empty batch")]
    EmptyBatch,
    #[error("need {expected} lambdas for the batch, got {got}")]
    LambdaCount { expected: usize, got: usize },
    #[error("inputs have {inputs} rows but targets have {targets}")]
    RowMismatch { inputs: usize, targets: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixupConfig {
    /// `λ ∼ Beta(α, α)`
    pub alpha: f64,
    /// One λ per example (otherwise one per batch).
    pub per_example: bool,
    /// Replace λ by `min(λ, 1−λ)`.
    pub min_trick: bool,
    /// Use this constant instead of Beta draws.
    pub fixed_lambda: Option<f64>,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            per_example: true,
            min_trick: true,
            fixed_lambda: None,
        }
    }
}

impl MixupConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn fixed(lambda: f64) -> Self {
        Self {
            fixed_lambda: Some(lambda),
            min_trick: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), MixupError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(MixupError::Alpha(self.alpha));
        }
        if let Some(l) = self.fixed_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(MixupError::FixedLambda(l));
            }
        }
        Ok(())
    }
}

/// Draws `n` interpolation weights.
pub fn sample_lambdas<R: Rng + ?Sized>(
    cfg: &MixupConfig,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>, MixupError> {
    cfg.validate()?;
    let finish = |l: f64| if cfg.min_trick { l.min(1.0 - l) } else { l };
    if let Some(l) = cfg.fixed_lambda {
        return Ok(vec![finish(l); n]);
    }
    let beta = Beta::new(cfg.alpha, cfg.alpha).map_err(|_| MixupError::Alpha(cfg.alpha))?;
    if cfg.per_example {
        Ok((0..n).map(|_| finish(beta.sample(rng))).collect())
    } else {
        let l = finish(beta.sample(rng));
        Ok(vec![l; n])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub inputs: Tensor,
    /// `B×1` signed margins targets (binary) or `B×C` soft labels.
    pub targets: Tensor,
    /// `partner[j] = j'`
    pub partner: Vec<usize>,
    pub lambdas: Vec<f64>,
}

fn interpolate(a: &[f64], b: &[f64], lambda: f64, out: &mut Vec<f64>) {
    out.extend(a.iter().zip(b).map(|(&x, &y)| (1.0 - lambda) * x + lambda * y));
}

/// Mixes a batch with its own random permutation.
pub fn mix_batch<R: Rng + ?Sized>(
    inputs: &Tensor,
    targets: &Tensor,
    lambdas: &[f64],
    rng: &mut R,
) -> Result<MixedBatch, MixupError> {
    let n = inputs.rows();
    if n == 0 || inputs.is_empty() {
        return Err(MixupError::EmptyBatch);
    }
    let mut partner: Vec<usize> = (0..n).collect();
    partner.shuffle(rng);
    mix_with_partners(inputs, targets, lambdas, partner)
}

/// Mixes with an explicit pairing.
pub fn mix_with_partners(
    inputs: &Tensor,
    targets: &Tensor,
    lambdas: &[f64],
    partner: Vec<usize>,
) -> Result<MixedBatch, MixupError> {
    let n = inputs.rows();
    if n == 0 {
        return Err(MixupError::EmptyBatch);
    }
    if targets.rows() != n {
        return Err(MixupError::RowMismatch {
            inputs: n,
            targets: targets.rows(),
        });
    }
    if lambdas.len() != n || partner.len() != n {
        return Err(MixupError::LambdaCount {
            expected: n,
            got: lambdas.len().min(partner.len()),
        });
    }
    let mut xs = Vec::with_capacity(inputs.len());
    let mut ys = Vec::with_capacity(targets.len());
    for j in 0..n {
        let k = partner[j];
        interpolate(inputs.row(j), inputs.row(k), lambdas[j], &mut xs);
        interpolate(targets.row(j), targets.row(k), lambdas[j], &mut ys);
    }
    Ok(MixedBatch {
        inputs: Tensor::new(inputs.shape().to_vec(), xs).expect("same shape"),
        targets: Tensor::new(targets.shape().to_vec(), ys).expect("same shape"),
        partner,
        lambdas: lambdas.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn min_trick_folds_upper_half() {
        let cfg = MixupConfig {
            fixed_lambda: Some(0.8),
            min_trick: true,
            ..MixupConfig::default()
        };
        let l = sample_lambdas(&cfg, 3, &mut stream(0)).unwrap();
        assert!(l.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn nonpositive_alpha_rejected() {
        for a in [0.0, -1.0, f64::NAN] {
            let cfg = MixupConfig::with_alpha(a);
            assert!(sample_lambdas(&cfg, 1, &mut stream(0)).is_err());
        }
    }

    #[test]
    fn min_tricked_lambdas_stay_in_lower_half() {
        let cfg = MixupConfig::with_alpha(0.4);
        let l = sample_lambdas(&cfg, 10_000, &mut stream(3)).unwrap();
        assert!(l.iter().all(|&v| (0.0..=0.5).contains(&v)));
    }

    #[test]
    fn per_batch_lambda_is_shared() {
        let cfg = MixupConfig {
            per_example: false,
            ..MixupConfig::default()
        };
        let l = sample_lambdas(&cfg, 5, &mut stream(2)).unwrap();
        assert!(l.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn two_point_example() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let y = Tensor::matrix(2, 1, vec![-1.0, 1.0]).unwrap();
        let m = mix_with_partners(&x, &y, &[0.25, 0.25], vec![1, 0]).unwrap();
        assert_eq!(m.inputs.row(0), &[0.25, 0.25]);
        assert_eq!(m.targets.row(0), &[-0.5]);
    }

    #[test]
    fn zero_lambda_is_identity() {
        let x = Tensor::from_rows(&[vec![0.3, -2.0], vec![1.5, 7.0], vec![-4.0, 0.1]]).unwrap();
        let y = Tensor::matrix(3, 1, vec![1.0, -1.0, 1.0]).unwrap();
        let m = mix_batch(&x, &y, &[0.0; 3], &mut stream(8)).unwrap();
        assert_eq!(m.inputs, x);
        assert_eq!(m.targets, y);
    }

    #[test]
    fn one_hot_targets_mix_linearly() {
        let x = Tensor::zeros(&[2, 1]);
        let mut y = Tensor::zeros(&[2, 10]);
        y.row_mut(0)[2] = 1.0;
        y.row_mut(1)[5] = 1.0;
        let m = mix_with_partners(&x, &y, &[0.3, 0.0], vec![1, 1]).unwrap();
        let row = m.targets.row(0);
        assert!((row[2] - 0.7).abs() < 1e-15);
        assert!((row[5] - 0.3).abs() < 1e-15);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_rejected() {
        let x = Tensor::zeros(&[0, 2]);
        let y = Tensor::zeros(&[0, 1]);
        assert_eq!(
            mix_batch(&x, &y, &[], &mut stream(0)).unwrap_err(),
            MixupError::EmptyBatch
        );
    }

    #[test]
    fn wrong_lambda_count_rejected() {
        let x = Tensor::zeros(&[3, 2]);
        let y = Tensor::zeros(&[3, 1]);
        assert!(matches!(
            mix_batch(&x, &y, &[0.1], &mut stream(0)),
            Err(MixupError::LambdaCount { .. })
        ));
    }
}
