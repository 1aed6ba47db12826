//! ReLU multilayer perceptrons and the spectral quantities used to bound them.
//!
//! A network with hidden widths `d_1..d_L` computes
//! `f(x) = W_{L+1} ρ(W_L ρ(⋯ ρ(W_1 x + b_1)⋯) + b_L) + b_{L+1}` with
//! `ρ(t) = max(0, t)`. A zero-depth network (one layer) is a linear model.
//! Weights are stored `d_s × d_{s−1}`; inputs are row-major batches.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("layer {layer}: {reason}")]
    Layer { layer: usize, reason: String },
    #[error("network must have at least one layer")]
    Empty,
    #[error("spectral budget has {got} radii for {expected} layers")]
    BudgetLength { expected: usize, got: usize },
    #[error("spectral radii must be positive, got {0}")]
    BudgetRadius(f64),
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `d_out × d_in`
    pub weight: Tensor,
    /// length `d_out`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self, ModelError> {
        if layers.is_empty() {
            return Err(ModelError::Empty);
        }
        let mut prev_out = None;
        for (s, layer) in layers.iter().enumerate() {
            let (out, inp) = layer.weight.dims2("layer")?;
            if layer.bias.len() != out {
                return Err(ModelError::Layer {
                    layer: s,
                    reason: format!("bias length {} != output width {out}", layer.bias.len()),
                });
            }
            if let Some(p) = prev_out {
                if p != inp {
                    return Err(ModelError::Layer {
                        layer: s,
                        reason: format!("input width {inp} does not chain with previous output {p}"),
                    });
                }
            }
            if !layer.weight.is_finite() || !layer.bias.is_finite() {
                return Err(ModelError::Layer {
                    layer: s,
                    reason: "non-finite parameter".into(),
                });
            }
            prev_out = Some(out);
        }
        Ok(Self { layers })
    }

    /// He (fan-in scaled Gaussian) weights, zero biases.
    pub fn he_init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self, ModelError> {
        Self::from_dims(dims, |fan_in, _| {
            let std = (2.0 / fan_in as f64).sqrt();
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self, ModelError> {
        Self::from_dims(dims, |_, _| 0.0)
    }

    fn from_dims(
        dims: &[usize],
        mut weight: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, ModelError> {
        if dims.len() < 2 {
            return Err(ModelError::Empty);
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (inp, out) = (pair[0], pair[1]);
            let data = (0..inp * out).map(|_| weight(inp, out)).collect();
            layers.push(Layer {
                weight: Tensor::matrix(out, inp, data)?,
                bias: Tensor::zeros(&[out]),
            });
        }
        Self::new(layers)
    }

    /// Single-layer model `f(x) = w·x + b`.
    pub fn linear(weights: &[f64], bias: f64) -> Self {
        Self::new(vec![Layer {
            weight: Tensor::matrix(1, weights.len(), weights.to_vec()).expect("row vector"),
            bias: Tensor::vector(vec![bias]),
        }])
        .expect("valid linear model")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// `(d_0, d_1, …, d_{L+1})`
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.bias.len()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bias.len())
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// All parameters, layer by layer (weights then bias).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.num_params() {
            return Err(ModelError::Argument(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut pos = 0;
        for l in &mut self.layers {
            for t in [&mut l.weight, &mut l.bias] {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[pos..pos + n]);
                pos += n;
            }
        }
        Ok(())
    }

    /// Records the parameters on `tape`.
    pub fn register<'t>(&self, tape: &'t Tape, requires_grad: bool) -> ParamVars<'t> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if requires_grad {
                    (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                }
            })
            .collect();
        ParamVars { layers }
    }

    /// Evaluates the network on a `batch × d_0` matrix.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let tape = Tape::new();
        let vars = self.register(&tape, false);
        let out = vars.forward(tape.constant(x.clone()))?;
        Ok(out.value())
    }

    /// Scalar output for a single input point (first output coordinate).
    pub fn eval_point(&self, x: &[f64]) -> Result<f64, ModelError> {
        let t = Tensor::matrix(1, x.len(), x.to_vec())?;
        Ok(self.forward(&t)?.data()[0])
    }
}

/// Parameters recorded on a tape, one `(weight, bias)` pair per layer.
#[derive(Debug, Clone)]
pub struct ParamVars<'t> {
    pub layers: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> ParamVars<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>, ModelError> {
        let d0 = self.layers[0].0.shape()[1];
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != d0 {
            return Err(TensorError::Shape {
                op: "forward",
                lhs: shape,
                rhs: vec![d0],
            }
            .into());
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (s, &(w, b)) in self.layers.iter().enumerate() {
            h = h.matmul_t(w)?.add_row(b)?;
            if s != last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Reads the accumulated gradients back in parameter layout.
    pub fn grads(&self, tape: &Tape, like: &MlpParams) -> MlpParams {
        let layers = self
            .layers
            .iter()
            .zip(like.layers())
            .map(|(&(w, b), l)| Layer {
                weight: tape.grad(w).unwrap_or_else(|| Tensor::zeros(l.weight.shape())),
                bias: tape.grad(b).unwrap_or_else(|| Tensor::zeros(l.bias.shape())),
            })
            .collect();
        MlpParams { layers }
    }
}

pub const SPECTRAL_ITERS: usize = 10_000;
pub const SPECTRAL_TOL: f64 = 1e-14;

/// Largest singular value by power iteration on `WᵀW`.
///
/// Stops once the relative change of the estimate drops below `tol`. The
/// start vector is a fixed pseudo-random draw so the result is
/// deterministic. Returns 0 for a zero matrix.
pub fn spectral_norm(w: &Tensor, iters: usize, tol: f64) -> f64 {
    let (rows, cols) = match w.dims2("spectral_norm") {
        Ok(d) => d,
        Err(_) => (1, w.len()),
    };
    if w.data().iter().all(|&v| v == 0.0) || rows == 0 || cols == 0 {
        return 0.0;
    }
    let a = w.data();
    let mut rng = ChaCha8Rng::seed_from_u64(0x005e_ed0f_5bec);
    let mut v: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    let mut u = vec![0.0; rows];
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = a[i * cols..(i + 1) * cols].iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        if normalize(&mut u) == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x = 0.0);
        for (i, &ui) in u.iter().enumerate() {
            for (vj, &aij) in v.iter_mut().zip(&a[i * cols..(i + 1) * cols]) {
                *vj += aij * ui;
            }
        }
        let next = normalize(&mut v);
        let converged = (next - sigma).abs() <= tol * next;
        sigma = next;
        if converged {
            break;
        }
    }
    sigma
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// `∏_s ‖W_s‖₂`, a Lipschitz constant of the network w.r.t. `ℓ₂` inputs
/// since ReLU is 1-Lipschitz.
pub fn lipschitz_upper_bound(params: &MlpParams) -> f64 {
    params
        .layers()
        .iter()
        .map(|l| spectral_norm(&l.weight, SPECTRAL_ITERS, SPECTRAL_TOL))
        .product()
}

/// Singular values in descending order.
pub fn singular_values(w: &Tensor) -> Vec<f64> {
    let (r, c) = w.dims2("singular_values").unwrap_or((1, w.len()));
    let m = nalgebra::DMatrix::from_row_slice(r, c, w.data());
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Count of singular values above `rank_tol · σ_max`.
pub fn numerical_rank(w: &Tensor, rank_tol: f64) -> usize {
    let s = singular_values(w);
    let Some(&max) = s.first() else { return 0 };
    if max == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rank_tol * max).count()
}

pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Per-layer spectral radii `r_s` with `‖W_s‖₂ ≤ r_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBudget {
    radii: Vec<f64>,
}

impl SpectralBudget {
    pub fn new(radii: Vec<f64>) -> Result<Self, ModelError> {
        if let Some(&r) = radii.iter().find(|&&r| !(r > 0.0 && r.is_finite())) {
            return Err(ModelError::BudgetRadius(r));
        }
        Ok(Self { radii })
    }

    /// Radii measured from the weights themselves (`r_s := ‖W_s‖₂`).
    pub fn measured(params: &MlpParams) -> Result<Self, ModelError> {
        Self::new(
            params
                .layers()
                .iter()
                .map(|l| spectral_norm(&l.weight, SPECTRAL_ITERS, SPECTRAL_TOL))
                .collect(),
        )
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexityProxy {
    pub value: f64,
    /// Argument of the logarithm before clamping.
    pub log_argument: f64,
    /// True when the log argument was ≤ 1 and the log was clamped to 0.
    pub clamped: bool,
}

/// Complexity proxy `G` for spectrally bounded ReLU networks:
///
/// `G = (B_x ∏ r_s / √n) · √(d_w · log((L+1)√n · max_s r_s m_s / (√d_w · min_s r_s)))`
///
/// with `d_w = Σ_s d_{s−1} d_s` and `m_s = √rank(W_s)`.
pub fn complexity_proxy_g(
    params: &MlpParams,
    budget: &SpectralBudget,
    b_x: f64,
    n: usize,
    rank_tol: f64,
) -> Result<ComplexityProxy, ModelError> {
    let layers = params.layers();
    if budget.radii().len() != layers.len() {
        return Err(ModelError::BudgetLength {
            expected: layers.len(),
            got: budget.radii().len(),
        });
    }
    if n == 0 {
        return Err(ModelError::Argument("n must be at least 1".into()));
    }
    let ranks: Vec<f64> = layers
        .iter()
        .map(|l| (numerical_rank(&l.weight, rank_tol) as f64).sqrt())
        .collect();
    Ok(complexity_formula(
        &params.dims(),
        budget.radii(),
        &ranks,
        b_x,
        n,
    ))
}

/// The `G` formula given dims, radii and `m_s` directly.
pub fn complexity_formula(
    dims: &[usize],
    radii: &[f64],
    m: &[f64],
    b_x: f64,
    n: usize,
) -> ComplexityProxy {
    let d_w: usize = dims.windows(2).map(|p| p[0] * p[1]).sum();
    let depth = radii.len() as f64;
    let sqrt_n = (n as f64).sqrt();
    let max_rm = radii
        .iter()
        .zip(m)
        .map(|(r, m)| r * m)
        .fold(f64::NEG_INFINITY, f64::max);
    let min_r = radii.iter().copied().fold(f64::INFINITY, f64::min);
    let log_argument = depth * sqrt_n * max_rm / ((d_w as f64).sqrt() * min_r);
    let clamped = !(log_argument > 1.0);
    if clamped {
        log::warn!("complexity proxy: log argument {log_argument} <= 1, clamping log to 0");
    }
    let log_term = if clamped { 0.0 } else { log_argument.ln() };
    let prod_r: f64 = radii.iter().product();
    ComplexityProxy {
        value: b_x * prod_r / sqrt_n * (d_w as f64 * log_term).sqrt(),
        log_argument,
        clamped,
    }
}
