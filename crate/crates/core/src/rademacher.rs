//! Empirical Rademacher complexity
//! `R̂_S(F) = E_ε sup_{f∈F} (1/n) Σ_i ε_i f(x_i)` for a fixed sample.
//!
//! For the `ℓ₂` ball of linear functions the inner supremum is closed-form,
//! `(W/n)‖Σ ε_i x_i‖₂`, so the expectation can be enumerated exactly for
//! small `n` or estimated by Monte Carlo. For spectrally bounded ReLU
//! networks the supremum is approximated from below by projected gradient
//! ascent.

use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::Tape;
use crate::kernel::{sample_offsets, KernelError, KernelSpec};
use crate::model::{spectral_norm, MlpParams, ModelError, SpectralBudget, SPECTRAL_ITERS, SPECTRAL_TOL};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const EXHAUSTIVE_LIMIT: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RademacherError {
    #[error("exhaustive enumeration supports n <= {EXHAUSTIVE_LIMIT}, got n = {0}")]
    Capacity(usize),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Exhaustive,
    MonteCarlo { draws: usize, seed: u64 },
    /// Exhaustive up to [`EXHAUSTIVE_LIMIT`] points, Monte Carlo beyond.
    Auto { draws: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateKind {
    Exhaustive,
    MonteCarlo,
    AscentLowerBound,
}

impl fmt::Display for EstimateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimateKind::Exhaustive => "exhaustive",
            EstimateKind::MonteCarlo => "monte-carlo",
            EstimateKind::AscentLowerBound => "ascent-lower-bound",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RademacherEstimate {
    pub value: f64,
    pub std_error: f64,
    pub kind: EstimateKind,
    /// Number of sign vectors averaged.
    pub draws: usize,
}

pub const CSV_HEADER: [&str; 5] = ["method", "n", "M", "value", "stderr"];

impl RademacherEstimate {
    pub fn csv_row(&self, n: usize) -> [String; 5] {
        [
            self.kind.to_string(),
            n.to_string(),
            self.draws.to_string(),
            self.value.to_string(),
            self.std_error.to_string(),
        ]
    }
}

/// Neumaier-compensated sum; a plain running sum drifts by `O(M·ulp)`
/// over many draws, which swamps the standard error of low-variance
/// estimates.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = compensated_sum(values.iter().copied()) / m;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (m - 1.0);
    (mean, (var / m).sqrt())
}

fn signed_sum_norm(sample: &Tensor, signs: impl Fn(usize) -> f64) -> f64 {
    let d = sample.cols();
    let mut acc = vec![0.0; d];
    for i in 0..sample.rows() {
        let e = signs(i);
        acc.iter_mut().zip(sample.row(i)).for_each(|(a, x)| *a += e * x);
    }
    acc.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn random_signs<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// Rademacher complexity of `{x ↦ w·x : ‖w‖₂ ≤ radius}` on `sample` (`n×d`).
pub fn rademacher_linear_l2(sample: &Tensor, radius: f64, method: Method) -> Result<RademacherEstimate, RademacherError> {
    let n = sample.rows();
    if n == 0 || sample.ndim() != 2 {
        return Err(RademacherError::Argument("sample must be a non-empty n×d matrix".into()));
    }
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(RademacherError::Argument(format!("radius must be >= 0, got {radius}")));
    }
    let scale = radius / n as f64;
    let method = match method {
        Method::Auto { draws, seed } => {
            if n <= EXHAUSTIVE_LIMIT {
                Method::Exhaustive
            } else {
                Method::MonteCarlo { draws, seed }
            }
        }
        m => m,
    };
    match method {
        Method::Exhaustive => {
            if n > EXHAUSTIVE_LIMIT {
                return Err(RademacherError::Capacity(n));
            }
            let patterns = 1usize << n;
            let mut total = 0.0;
            for mask in 0..patterns {
                total += signed_sum_norm(sample, |i| if mask >> i & 1 == 1 { 1.0 } else { -1.0 });
            }
            Ok(RademacherEstimate {
                value: scale * total / patterns as f64,
                std_error: 0.0,
                kind: EstimateKind::Exhaustive,
                draws: patterns,
            })
        }
        Method::MonteCarlo { draws, seed } => {
            if draws == 0 {
                return Err(RademacherError::Argument("need at least one sign draw".into()));
            }
            let mut rng = stream(seed);
            let values: Vec<f64> = (0..draws)
                .map(|_| {
                    let eps = random_signs(n, &mut rng);
                    scale * signed_sum_norm(sample, |i| eps[i])
                })
                .collect();
            let (value, std_error) = mean_and_stderr(&values);
            Ok(RademacherEstimate {
                value,
                std_error,
                kind: EstimateKind::MonteCarlo,
                draws,
            })
        }
        Method::Auto { .. } => unreachable!(),
    }
}

/// Monte Carlo convolution applied to a function class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Convolution {
    pub spec: KernelSpec,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassKind {
    LinearL2 { radius: f64 },
    MlpSpectral { budget: SpectralBudget, dims: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionClassSpec {
    pub kind: ClassKind,
    pub kernel: Option<Convolution>,
}

/// Closed-form estimate for (possibly convolved) linear classes.
///
/// Convolving `x ↦ w·x` with offsets `u_1..u_N` gives `x ↦ w·(x − ū)`, so
/// the convolved class on `S` is the plain class on `S − ū`. With
/// antithetic offsets `ū` is exactly zero and the two estimates coincide.
pub fn rademacher_class(
    class: &FunctionClassSpec,
    sample: &Tensor,
    method: Method,
) -> Result<RademacherEstimate, RademacherError> {
    let ClassKind::LinearL2 { radius } = class.kind else {
        return Err(RademacherError::Argument(
            "closed form is only available for linear classes; use rademacher_mlp_lower_bound".into(),
        ));
    };
    let Some(conv) = class.kernel else {
        return rademacher_linear_l2(sample, radius, method);
    };
    let offsets = sample_offsets(&conv.spec, conv.samples, &mut stream(conv.seed))?;
    let u = offsets.offsets();
    let d = sample.cols();
    if u.cols() != d {
        return Err(KernelError::DimensionMismatch {
            offsets: u.cols(),
            inputs: d,
        }
        .into());
    }
    let mut mean = vec![0.0; d];
    for i in 0..u.rows() {
        mean.iter_mut().zip(u.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= u.rows() as f64);
    let mut shifted = sample.clone();
    for i in 0..shifted.rows() {
        shifted.row_mut(i).iter_mut().zip(&mean).for_each(|(x, m)| *x -= m);
    }
    rademacher_linear_l2(&shifted, radius, method)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AscentInit {
    Zero,
    He,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentConfig {
    pub sign_draws: usize,
    pub steps: usize,
    pub step_size: f64,
    pub init: AscentInit,
    pub seed: u64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self {
            sign_draws: 20,
            steps: 50,
            step_size: 0.5,
            init: AscentInit::He,
            seed: 0,
        }
    }
}

fn project(params: &mut MlpParams, radii: &[f64]) {
    for (layer, &r) in params.layers_mut().iter_mut().zip(radii) {
        let s = spectral_norm(&layer.weight, SPECTRAL_ITERS, SPECTRAL_TOL);
        if s > r {
            let c = r / s;
            layer.weight.data_mut().iter_mut().for_each(|w| *w *= c);
        }
    }
}

/// `(1/n) Σ ε_i f(x_i)` and its weight gradient (biases fixed at zero).
fn correlation(params: &MlpParams, sample: &Tensor, eps: &Tensor) -> Result<(f64, Vec<Tensor>), RademacherError> {
    let tape = Tape::new();
    let layers: Vec<_> = params
        .layers()
        .iter()
        .map(|l| (tape.leaf(l.weight.clone()), tape.constant(l.bias.clone())))
        .collect();
    let vars = crate::model::ParamVars { layers };
    let out = vars.forward(tape.constant(sample.clone()))?;
    let obj = out
        .mul(tape.constant(eps.clone()))
        .map_err(ModelError::from)?
        .mean();
    tape.backward(obj).map_err(ModelError::from)?;
    let grads = vars
        .layers
        .iter()
        .map(|(w, _)| tape.grad(*w).unwrap_or_else(|| Tensor::zeros(&w.shape())))
        .collect();
    Ok((obj.value().item(), grads))
}

/// Lower bound on the Rademacher complexity of bias-free ReLU networks with
/// `‖W_s‖₂ ≤ r_s`.
///
/// For each of `sign_draws` sign vectors, runs `steps` of projected
/// gradient ascent on `|(1/n) Σ ε_i f(x_i)|` and keeps the best value seen
/// (at least 0, attained by the zero network). The class is closed under
/// negation of the last layer, so the absolute value is attainable.
pub fn rademacher_mlp_lower_bound(
    budget: &SpectralBudget,
    dims: &[usize],
    sample: &Tensor,
    cfg: &AscentConfig,
) -> Result<RademacherEstimate, RademacherError> {
    let n = sample.rows();
    if n == 0 || cfg.sign_draws == 0 {
        return Err(RademacherError::Argument("need a non-empty sample and at least one sign draw".into()));
    }
    if dims.len() != budget.radii().len() + 1 {
        return Err(ModelError::BudgetLength {
            expected: dims.len().saturating_sub(1),
            got: budget.radii().len(),
        }
        .into());
    }
    if dims.last() != Some(&1) || dims[0] != sample.cols() {
        return Err(RademacherError::Argument(format!(
            "dims {dims:?} must map the sample width {} to one output",
            sample.cols()
        )));
    }
    let mut rng = stream(cfg.seed);
    let mut maxima = Vec::with_capacity(cfg.sign_draws);
    for _ in 0..cfg.sign_draws {
        let eps = Tensor::matrix(n, 1, random_signs(n, &mut rng)).expect("sign column");
        let mut params = match cfg.init {
            AscentInit::Zero => MlpParams::zeros(dims)?,
            AscentInit::He => MlpParams::he_init(dims, &mut rng)?,
        };
        project(&mut params, budget.radii());
        let (first, _) = correlation(&params, sample, &eps)?;
        let direction = if first < 0.0 { -1.0 } else { 1.0 };
        let mut best = first.abs();
        for _ in 0..cfg.steps {
            let (_, grads) = correlation(&params, sample, &eps)?;
            for (layer, g) in params.layers_mut().iter_mut().zip(&grads) {
                layer
                    .weight
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(w, g)| *w += direction * cfg.step_size * g);
            }
            project(&mut params, budget.radii());
            let (value, _) = correlation(&params, sample, &eps)?;
            best = best.max(value.abs());
        }
        maxima.push(best);
    }
    let (value, std_error) = mean_and_stderr(&maxima);
    Ok(RademacherEstimate {
        value,
        std_error,
        kind: EstimateKind::AscentLowerBound,
        draws: cfg.sign_draws,
    })
}

/// `B_*/B_x = (3h·c¹_K + B_x)/B_x`: how much convolving with a bandwidth-`h`
/// kernel can inflate the complexity bound of a class with input radius `B_x`.
pub fn kcm_scale(h: f64, ck1: f64, b_x: f64) -> Result<f64, RademacherError> {
    if !(h >= 0.0 && ck1 >= 0.0) {
        return Err(RademacherError::Argument("h and c_K must be non-negative".into()));
    }
    if !(b_x > 0.0) {
        return Err(RademacherError::Argument(format!("B_x must be positive, got {b_x}")));
    }
    Ok((3.0 * h * ck1 + b_x) / b_x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_is_its_norm() {
        let s = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let e = rademacher_linear_l2(&s, 1.0, Method::Exhaustive).unwrap();
        assert_eq!(e.value, 5.0);
        assert_eq!(e.draws, 2);
    }

    #[test]
    fn two_opposite_points() {
        // patterns: ++ and -- cancel, +- and -+ give ‖(2,0)‖ = 2;
        // mean over patterns is 1, scaled by W/n = 1/2.
        let s = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let e = rademacher_linear_l2(&s, 1.0, Method::Exhaustive).unwrap();
        assert_eq!(e.value, 0.5);
    }

    #[test]
    fn radius_scales_linearly() {
        let s = Tensor::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.3], vec![2.0, -1.0]]).unwrap();
        let a = rademacher_linear_l2(&s, 1.0, Method::Exhaustive).unwrap().value;
        let b = rademacher_linear_l2(&s, 2.0, Method::Exhaustive).unwrap().value;
        assert_eq!(b, 2.0 * a);
    }

    #[test]
    fn exhaustive_capacity_enforced() {
        let s = Tensor::zeros(&[21, 2]);
        assert_eq!(
            rademacher_linear_l2(&s, 1.0, Method::Exhaustive).unwrap_err(),
            RademacherError::Capacity(21)
        );
        let auto = rademacher_linear_l2(&s, 1.0, Method::Auto { draws: 10, seed: 0 }).unwrap();
        assert_eq!(auto.kind, EstimateKind::MonteCarlo);
    }

    #[test]
    fn kcm_scale_values() {
        assert_eq!(kcm_scale(0.0, 1.25331, 1.0).unwrap(), 1.0);
        assert!((kcm_scale(1.0, 1.25331, 1.0).unwrap() - 4.75993).abs() < 1e-12);
        assert!(kcm_scale(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn zero_init_without_steps_is_zero() {
        let s = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, -0.5]]).unwrap();
        let budget = SpectralBudget::new(vec![1.0, 1.0]).unwrap();
        let cfg = AscentConfig {
            sign_draws: 5,
            steps: 0,
            init: AscentInit::Zero,
            ..AscentConfig::default()
        };
        let e = rademacher_mlp_lower_bound(&budget, &[2, 4, 1], &s, &cfg).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.kind, EstimateKind::AscentLowerBound);
    }

    #[test]
    fn ascent_respects_budget_and_improves() {
        let s = Tensor::from_rows(&[vec![1.0, 0.2], vec![-0.3, 1.0], vec![0.5, -0.5], vec![0.9, 0.9]]).unwrap();
        let budget = SpectralBudget::new(vec![1.0, 2.0]).unwrap();
        let mut prev = -1.0;
        for steps in [0, 5, 20, 60] {
            let cfg = AscentConfig {
                sign_draws: 8,
                steps,
                ..AscentConfig::default()
            };
            let e = rademacher_mlp_lower_bound(&budget, &[2, 6, 1], &s, &cfg).unwrap();
            assert!(e.value >= prev);
            prev = e.value;
        }
        // linear-class ceiling: any f with ‖W‖ product ≤ 2 is 2-Lipschitz and f(0)=0
        let lin = rademacher_linear_l2(&s, 2.0, Method::Exhaustive).unwrap().value;
        assert!(prev <= lin * 4.0 + 1e-9, "{prev} vs {lin}");
    }
}
