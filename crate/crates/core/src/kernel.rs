//! Kernel-convoluted models.
//!
//! A model `f` is replaced by its local average `f^K(x) = ∫ f(x − u) K(u) du`
//! against a product-Gaussian kernel `K = N(0, h² I_d)`. The integral is
//! approximated by Monte Carlo, `f̂^K(x) = N⁻¹ Σ_i f(x − u_i)` with
//! `u_i ∼ K`. Gradients flow through every shifted evaluation, so the same
//! estimator serves training, prediction and input-gradient attacks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::model::{MlpParams, ModelError, ParamVars};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("bandwidth must be positive and finite, got {0}")]
    Bandwidth(f64),
    #[error("kernel dimension must be at least 1")]
    Dimension,
    #[error("Monte Carlo sample size must be at least 1")]
    ZeroSamples,
    #[error("antithetic sampling needs an even sample size, got {0}")]
    OddAntithetic(usize),
    #[error("offsets have dimension {offsets}, inputs have {inputs}")]
    DimensionMismatch { offsets: usize, inputs: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelFamily {
    #[default]
    GaussianProduct,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Bandwidth `h`, in input units.
    pub bandwidth: f64,
    pub dim: usize,
    /// Draw offsets in mirrored `(u, −u)` pairs.
    pub antithetic: bool,
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64, dim: usize) -> Result<Self, KernelError> {
        let spec = Self {
            family: KernelFamily::GaussianProduct,
            bandwidth,
            dim,
            antithetic: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_antithetic(mut self, antithetic: bool) -> Self {
        self.antithetic = antithetic;
        self
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(KernelError::Bandwidth(self.bandwidth));
        }
        if self.dim == 0 {
            return Err(KernelError::Dimension);
        }
        Ok(())
    }
}

/// `N` kernel draws, applied to every row of a batch (shared layout) or one
/// set per row (per-example layout, `N·B` rows).
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetBatch {
    offsets: Tensor,
    copies: usize,
    per_example: bool,
}

impl OffsetBatch {
    /// Wraps an explicit `N×d` matrix of shared offsets.
    pub fn shared(offsets: Tensor) -> Result<Self, KernelError> {
        let (n, d) = offsets.dims2("offsets").map_err(ModelError::from)?;
        if n == 0 {
            return Err(KernelError::ZeroSamples);
        }
        if d == 0 {
            return Err(KernelError::Dimension);
        }
        Ok(Self {
            offsets,
            copies: n,
            per_example: false,
        })
    }

    /// `N` zero offsets: `f̂^K` reduces to `f`.
    pub fn zeros(n: usize, dim: usize) -> Result<Self, KernelError> {
        Self::shared(Tensor::zeros(&[n, dim]))
    }

    pub fn offsets(&self) -> &Tensor {
        &self.offsets
    }

    /// Monte Carlo sample size `N`.
    pub fn copies(&self) -> usize {
        self.copies
    }

    pub fn dim(&self) -> usize {
        self.offsets.cols()
    }

    pub fn is_per_example(&self) -> bool {
        self.per_example
    }

    /// Largest `‖u_i‖₂` over all draws.
    pub fn max_norm(&self) -> f64 {
        (0..self.offsets.rows())
            .map(|i| self.offsets.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

fn draw<R: Rng + ?Sized>(spec: &KernelSpec, rows: usize, rng: &mut R) -> Tensor {
    let d = spec.dim;
    let h = spec.bandwidth;
    let mut data = Vec::with_capacity(rows * d);
    if spec.antithetic {
        for _ in 0..rows / 2 {
            let u: Vec<f64> = (0..d)
                .map(|_| { let z: f64 = StandardNormal.sample(rng); h * z })
                .collect();
            data.extend(u.iter().copied());
            data.extend(u.iter().map(|v| -v));
        }
    } else {
        data.extend((0..rows * d).map(|_| { let z: f64 = StandardNormal.sample(rng); h * z }));
    }
    Tensor::matrix(rows, d, data).expect("offset buffer")
}

fn check_count(spec: &KernelSpec, n: usize) -> Result<(), KernelError> {
    spec.validate()?;
    if n == 0 {
        return Err(KernelError::ZeroSamples);
    }
    if spec.antithetic && !n.is_multiple_of(2) {
        return Err(KernelError::OddAntithetic(n));
    }
    Ok(())
}

/// Draws `N` offsets `u_i ∼ N(0, h² I_d)` shared by a whole batch.
///
/// Each coordinate is `h·z` for a standard normal `z`, so under a fixed
/// stream the offsets scale exactly linearly in `h`.
pub fn sample_offsets<R: Rng + ?Sized>(
    spec: &KernelSpec,
    n: usize,
    rng: &mut R,
) -> Result<OffsetBatch, KernelError> {
    check_count(spec, n)?;
    Ok(OffsetBatch {
        offsets: draw(spec, n, rng),
        copies: n,
        per_example: false,
    })
}

/// Draws an independent set of `N` offsets for each of `batch` rows.
pub fn sample_offsets_per_example<R: Rng + ?Sized>(
    spec: &KernelSpec,
    n: usize,
    batch: usize,
    rng: &mut R,
) -> Result<OffsetBatch, KernelError> {
    check_count(spec, n)?;
    let mut data = Vec::with_capacity(n * batch * spec.dim);
    let mut per_row = Vec::with_capacity(batch);
    for _ in 0..batch {
        per_row.push(draw(spec, n, rng));
    }
    // copy-major: row i·B + j holds draw i of example j
    for i in 0..n {
        for draws in &per_row {
            data.extend_from_slice(draws.row(i));
        }
    }
    Ok(OffsetBatch {
        offsets: Tensor::matrix(n * batch, spec.dim, data).expect("offset buffer"),
        copies: n,
        per_example: true,
    })
}

/// `E‖u‖₂` for `u ∼ N(0, h² I_d)`: `h·√2·Γ((d+1)/2)/Γ(d/2)`.
pub fn gaussian_mean_norm(bandwidth: f64, dim: usize) -> f64 {
    let d = dim as f64;
    bandwidth * 2f64.sqrt() * (ln_gamma((d + 1.0) / 2.0) - ln_gamma(d / 2.0)).exp()
}

/// The first absolute moment `∫ K(u) ‖u‖₂ du` of the kernel.
pub fn kernel_mean_norm(spec: &KernelSpec) -> f64 {
    match spec.family {
        KernelFamily::GaussianProduct => gaussian_mean_norm(spec.bandwidth, spec.dim),
    }
}

/// `f̂^K(x) = N⁻¹ Σ_i f(x − u_i)` recorded on the tape.
pub fn kcm_forward<'t>(
    params: &ParamVars<'t>,
    x: Var<'t>,
    offsets: &OffsetBatch,
) -> Result<Var<'t>, KernelError> {
    let shape = x.shape();
    let d = shape.get(1).copied().unwrap_or(0);
    if offsets.dim() != d {
        return Err(KernelError::DimensionMismatch {
            offsets: offsets.dim(),
            inputs: d,
        });
    }
    let shifted = x
        .shift_rows(&offsets.offsets, offsets.copies)
        .map_err(ModelError::from)?;
    let out = params.forward(shifted)?;
    Ok(out.block_mean(offsets.copies).map_err(ModelError::from)?)
}

const EVAL_CHUNK: usize = 1024;

/// Evaluates `f̂^K` on a batch without tracking gradients.
///
/// Shared offsets are reused for every chunk of rows; per-example offsets
/// must match the batch exactly.
pub fn kcm_eval(params: &MlpParams, x: &Tensor, offsets: &OffsetBatch) -> Result<Tensor, KernelError> {
    let rows = x.rows();
    if offsets.per_example || rows <= EVAL_CHUNK {
        let tape = Tape::new();
        let vars = params.register(&tape, false);
        return Ok(kcm_forward(&vars, tape.constant(x.clone()), offsets)?.value());
    }
    let out_dim = params.output_dim();
    let mut data = Vec::with_capacity(rows * out_dim);
    let idx: Vec<usize> = (0..rows).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let tape = Tape::new();
        let vars = params.register(&tape, false);
        let part = kcm_forward(&vars, tape.constant(x.select_rows(chunk)), offsets)?;
        data.extend_from_slice(part.value().data());
    }
    Ok(Tensor::matrix(rows, out_dim, data).expect("output buffer"))
}

/// Raw model outputs, chunked like [`kcm_eval`].
pub fn model_eval(params: &MlpParams, x: &Tensor) -> Result<Tensor, ModelError> {
    let rows = x.rows();
    if rows <= EVAL_CHUNK {
        return params.forward(x);
    }
    let mut data = Vec::with_capacity(rows * params.output_dim());
    let idx: Vec<usize> = (0..rows).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        data.extend_from_slice(params.forward(&x.select_rows(chunk))?.data());
    }
    Ok(Tensor::matrix(rows, params.output_dim(), data)?)
}

/// Labels from model outputs: `±1` by sign for a single output column
/// (ties at 0 go to `+1`), otherwise the first argmax.
pub fn labels_from_outputs(outputs: &Tensor) -> Vec<i64> {
    let c = outputs.cols();
    (0..outputs.rows())
        .map(|i| {
            let row = outputs.row(i);
            if c == 1 {
                if row[0] >= 0.0 {
                    1
                } else {
                    -1
                }
            } else {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best as i64
            }
        })
        .collect()
}

/// Classifies by the sign (or argmax) of `f̂^K` with `n_eval` fresh offsets.
pub fn kcm_predict<R: Rng + ?Sized>(
    params: &MlpParams,
    spec: &KernelSpec,
    n_eval: usize,
    x: &Tensor,
    rng: &mut R,
) -> Result<Vec<i64>, KernelError> {
    let offsets = sample_offsets(spec, n_eval, rng)?;
    Ok(labels_from_outputs(&kcm_eval(params, x, &offsets)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn antithetic_pair_mirrors_exactly() {
        let spec = KernelSpec::gaussian(0.7, 3).unwrap().with_antithetic(true);
        let b = sample_offsets(&spec, 2, &mut stream(1)).unwrap();
        let u = b.offsets();
        for j in 0..3 {
            assert_eq!(u.get2(1, j), -u.get2(0, j));
        }
    }

    #[test]
    fn antithetic_odd_count_rejected() {
        let spec = KernelSpec::gaussian(1.0, 2).unwrap().with_antithetic(true);
        assert_eq!(
            sample_offsets(&spec, 3, &mut stream(1)).unwrap_err(),
            KernelError::OddAntithetic(3)
        );
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(KernelSpec::gaussian(0.0, 2).is_err());
        assert!(KernelSpec::gaussian(-1.0, 2).is_err());
        assert!(KernelSpec::gaussian(1.0, 0).is_err());
        let spec = KernelSpec::gaussian(1.0, 2).unwrap();
        assert!(sample_offsets(&spec, 0, &mut stream(0)).is_err());
    }

    #[test]
    fn offsets_scale_linearly_in_bandwidth() {
        let a = sample_offsets(&KernelSpec::gaussian(0.5, 2).unwrap(), 8, &mut stream(4)).unwrap();
        let b = sample_offsets(&KernelSpec::gaussian(0.05, 2).unwrap(), 8, &mut stream(4)).unwrap();
        for (x, y) in a.offsets().data().iter().zip(b.offsets().data()) {
            assert!((x * 0.1 - y).abs() <= 1e-15 * x.abs().max(1.0));
        }
    }

    #[test]
    fn mean_norm_closed_forms() {
        let d1 = gaussian_mean_norm(1.0, 1);
        assert!((d1 - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
        let d2 = gaussian_mean_norm(0.5, 2);
        assert!((d2 - 0.5 * (std::f64::consts::PI / 2.0).sqrt()).abs() < 1e-12);
        assert!((d2 - 0.62666).abs() < 1e-5);
        assert_eq!(gaussian_mean_norm(0.0, 5), 0.0);
        let spec = KernelSpec::gaussian(1.0, 1).unwrap();
        assert!((kernel_mean_norm(&spec) - 0.79788).abs() < 1e-5);
    }

    #[test]
    fn zero_offset_reproduces_model() {
        let m = MlpParams::linear(&[1.0, 2.0], 0.5);
        let x = Tensor::matrix(1, 2, vec![0.3, -0.1]).unwrap();
        let y = kcm_eval(&m, &x, &OffsetBatch::zeros(1, 2).unwrap()).unwrap();
        assert_eq!(y, m.forward(&x).unwrap());
    }

    #[test]
    fn antithetic_linear_model_is_exact() {
        let m = MlpParams::linear(&[1.0, 2.0], 0.5);
        let spec = KernelSpec::gaussian(0.8, 2).unwrap().with_antithetic(true);
        let off = sample_offsets(&spec, 6, &mut stream(11)).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.3, -0.1]).unwrap();
        let y = kcm_eval(&m, &x, &off).unwrap().item();
        assert!((y - 0.6).abs() < 1e-12);
    }

    #[test]
    fn sign_and_argmax_labels() {
        let binary = Tensor::matrix(3, 1, vec![0.6, -0.1, 0.0]).unwrap();
        assert_eq!(labels_from_outputs(&binary), vec![1, -1, 1]);
        let multi = Tensor::matrix(2, 3, vec![0.1, 0.5, 0.2, 2.0, -1.0, 2.0]).unwrap();
        assert_eq!(labels_from_outputs(&multi), vec![1, 0]);
    }

    #[test]
    fn per_example_layout_is_copy_major() {
        let spec = KernelSpec::gaussian(1.0, 2).unwrap();
        let b = sample_offsets_per_example(&spec, 3, 4, &mut stream(2)).unwrap();
        assert_eq!(b.offsets().shape(), &[12, 2]);
        assert!(b.is_per_example());
        assert_eq!(b.copies(), 3);
        let m = MlpParams::linear(&[1.0, -1.0], 0.0);
        let x = Tensor::zeros(&[4, 2]);
        let y = kcm_eval(&m, &x, &b).unwrap();
        for j in 0..4 {
            let expect: f64 = (0..3)
                .map(|i| {
                    let u = b.offsets().row(i * 4 + j);
                    -(u[0] - u[1])
                })
                .sum::<f64>()
                / 3.0;
            assert!((y.data()[j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn mismatched_offset_dimension_is_an_error() {
        let m = MlpParams::linear(&[1.0, 2.0], 0.0);
        let x = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            kcm_eval(&m, &x, &OffsetBatch::zeros(2, 3).unwrap()),
            Err(KernelError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn chunked_eval_matches_single_pass() {
        let mut rng = stream(5);
        let m = MlpParams::he_init(&[2, 8, 1], &mut rng).unwrap();
        let x = Tensor::matrix(
            2500,
            2,
            (0..5000).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect(),
        )
        .unwrap();
        let off = sample_offsets(&KernelSpec::gaussian(0.1, 2).unwrap(), 3, &mut rng).unwrap();
        let chunked = kcm_eval(&m, &x, &off).unwrap();
        let tape = Tape::new();
        let vars = m.register(&tape, false);
        let whole = kcm_forward(&vars, tape.constant(x.clone()), &off).unwrap().value();
        assert_eq!(chunked, whole);
    }
}
