//! FGSM and I-FGSM `ℓ∞` attacks plus white-/black-box robustness evaluation.
//!
//! Attacks on a kernel-convoluted target differentiate through `f̂^K` with
//! one frozen offset batch, so the attacked function is the one that is
//! evaluated. Re-drawing offsets every iteration is available through
//! [`AttackConfig::resample_offsets`].

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::Tape;
use crate::data::{Dataset, Normalization};
use crate::kernel::{kcm_eval, kcm_forward, labels_from_outputs, model_eval, sample_offsets, KernelError, KernelSpec, OffsetBatch};
use crate::loss::Surrogate;
use crate::model::{MlpParams, ModelError};
use crate::rng::stream;
use crate::tensor::{Tensor, TensorError};
use crate::train::EvalSettings;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("attack config: {0}")]
    Config(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Fgsm,
    Ifgsm,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Fgsm => "FGSM",
            AttackKind::Ifgsm => "IFGSM",
        })
    }
}

impl FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().replace('-', "").as_str() {
            "FGSM" => Ok(AttackKind::Fgsm),
            "IFGSM" => Ok(AttackKind::Ifgsm),
            _ => Err(format!("unknown attack kind {s:?} (expected FGSM or IFGSM)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Threat {
    WhiteBox,
    /// Gradients from a separately trained source model.
    BlackBox,
}

impl fmt::Display for Threat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Threat::WhiteBox => "white-box",
            Threat::BlackBox => "black-box",
        })
    }
}

impl FromStr for Threat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "white-box" | "white" | "whitebox" => Ok(Threat::WhiteBox),
            "black-box" | "black" | "blackbox" => Ok(Threat::BlackBox),
            _ => Err(format!("unknown threat model {s:?} (expected white-box or black-box)")),
        }
    }
}

/// Which function of the target is attacked and scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttackTarget {
    /// `f̂^K` with the evaluation offsets (plain `f` for non-kernel models).
    #[default]
    Smoothed,
    Raw,
}

/// Per-coordinate valid input range.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl InputBox {
    pub fn uniform(dim: usize, lower: f64, upper: f64) -> Self {
        Self {
            lower: vec![lower; dim],
            upper: vec![upper; dim],
        }
    }

    /// The image of the pixel range `[0, 1]` under `norm`.
    pub fn normalized_unit(norm: &Normalization) -> Self {
        Self {
            lower: (0..norm.dim()).map(|j| norm.apply(0.0, j)).collect(),
            upper: (0..norm.dim()).map(|j| norm.apply(1.0, j)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, row: &[f64]) -> bool {
        row.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    /// I-FGSM iterations; FGSM always takes a single step.
    pub iterations: usize,
    /// I-FGSM step size, `epsilon / iterations` when unset.
    pub step_size: Option<f64>,
    pub bounds: Option<InputBox>,
    pub threat: Threat,
    pub target: AttackTarget,
    pub resample_offsets: bool,
    /// Stream for re-drawn offsets.
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon: 0.031,
            iterations: 10,
            step_size: None,
            bounds: None,
            threat: Threat::WhiteBox,
            target: AttackTarget::Smoothed,
            resample_offsets: false,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(AttackError::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.iterations == 0 {
            return Err(AttackError::Config("iterations must be >= 1".into()));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0 && s.is_finite()) {
                return Err(AttackError::Config(format!("step size must be > 0, got {s}")));
            }
        }
        if let Some(b) = &self.bounds {
            if b.lower.len() != b.upper.len() || b.lower.iter().zip(&b.upper).any(|(l, u)| !(l <= u)) {
                return Err(AttackError::Config("box bounds must satisfy lower <= upper".into()));
            }
        }
        Ok(())
    }

    /// Number of sign steps and their size.
    pub fn schedule(&self) -> (usize, f64) {
        match self.kind {
            AttackKind::Fgsm => (1, self.epsilon),
            AttackKind::Ifgsm => (
                self.iterations,
                self.step_size.unwrap_or(self.epsilon / self.iterations as f64),
            ),
        }
    }
}

/// Offsets used while differentiating `f̂^K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smoothing {
    pub spec: KernelSpec,
    pub samples: usize,
    pub seed: u64,
}

/// The model whose input gradient drives the attack.
#[derive(Debug, Clone, Copy)]
pub struct GradientSource<'a> {
    pub params: &'a MlpParams,
    pub smoothing: Option<Smoothing>,
    pub loss: Surrogate,
}

impl<'a> GradientSource<'a> {
    pub fn raw(params: &'a MlpParams, loss: Surrogate) -> Self {
        Self {
            params,
            smoothing: None,
            loss,
        }
    }
}

/// `∇_x` of the training loss at `x` against `targets` (`±1` column or
/// one-hot rows), optionally through `f̂^K` with the given offsets.
pub fn input_gradient(
    params: &MlpParams,
    offsets: Option<&OffsetBatch>,
    loss: Surrogate,
    x: &Tensor,
    targets: &Tensor,
) -> Result<Tensor, AttackError> {
    let tape = Tape::new();
    let vars = params.register(&tape, false);
    let input = tape.leaf(x.clone());
    let out = match offsets {
        Some(off) => kcm_forward(&vars, input, off)?,
        None => vars.forward(input)?,
    };
    let objective = if out.shape().get(1) == Some(&1) {
        out.margin_loss(targets.data(), loss)?
    } else {
        out.softmax_cross_entropy(targets)?
    };
    tape.backward(objective)?;
    Ok(tape.grad(input).unwrap_or_else(|| Tensor::zeros(x.shape())))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Runs the attack described by `cfg` from clean inputs `x`.
fn sign_ascent(source: &GradientSource<'_>, x: &Tensor, targets: &Tensor, cfg: &AttackConfig) -> Result<Tensor, AttackError> {
    cfg.validate()?;
    if let Some(b) = &cfg.bounds {
        if b.dim() != x.cols() {
            return Err(AttackError::Config(format!("box has {} coordinates, inputs have {}", b.dim(), x.cols())));
        }
    }
    let (steps, step) = cfg.schedule();
    let eps = cfg.epsilon;
    let mut offset_rng = source.smoothing.map(|s| stream(s.seed));
    let mut frozen = None;
    let mut adv = x.clone();
    for _ in 0..steps {
        let offsets = match (source.smoothing, offset_rng.as_mut()) {
            (Some(s), Some(rng)) => {
                if cfg.resample_offsets || frozen.is_none() {
                    frozen = Some(sample_offsets(&s.spec, s.samples, rng)?);
                }
                frozen.as_ref()
            }
            _ => None,
        };
        let g = input_gradient(source.params, offsets, source.loss, &adv, targets)?;
        let d = x.cols();
        for (k, (a, gk)) in adv.data_mut().iter_mut().zip(g.data()).enumerate() {
            let x0 = x.data()[k];
            let mut v = (*a + step * sign(*gk)).clamp(x0 - eps, x0 + eps);
            if let Some(b) = &cfg.bounds {
                v = v.clamp(b.lower[k % d], b.upper[k % d]);
            }
            *a = v;
        }
    }
    Ok(adv)
}

/// `clip_box(x + ε·sign(∇_x loss))`, with `sign(0) = 0`.
pub fn fgsm(source: &GradientSource<'_>, x: &Tensor, targets: &Tensor, cfg: &AttackConfig) -> Result<Tensor, AttackError> {
    let cfg = AttackConfig {
        kind: AttackKind::Fgsm,
        ..cfg.clone()
    };
    sign_ascent(source, x, targets, &cfg)
}

/// Iterated sign steps, each projected onto the `ε`-ball around `x` and
/// the input box.
pub fn ifgsm(source: &GradientSource<'_>, x: &Tensor, targets: &Tensor, cfg: &AttackConfig) -> Result<Tensor, AttackError> {
    let cfg = AttackConfig {
        kind: AttackKind::Ifgsm,
        ..cfg.clone()
    };
    sign_ascent(source, x, targets, &cfg)
}

pub fn attack(source: &GradientSource<'_>, x: &Tensor, targets: &Tensor, cfg: &AttackConfig) -> Result<Tensor, AttackError> {
    sign_ascent(source, x, targets, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub threat: Threat,
    pub kind: AttackKind,
    pub epsilon: f64,
    pub iterations: usize,
    pub clean_acc: f64,
    pub adv_acc: f64,
    pub max_linf: f64,
    /// `true` where the target misclassifies the adversarial input.
    pub success: Vec<bool>,
}

pub const REPORT_HEADER: [&str; 7] = ["threat", "kind", "epsilon", "iters", "clean_acc", "adv_acc", "max_linf"];

impl AttackReport {
    pub fn csv_row(&self) -> [String; 7] {
        [
            self.threat.to_string(),
            self.kind.to_string(),
            self.epsilon.to_string(),
            self.iterations.to_string(),
            self.clean_acc.to_string(),
            self.adv_acc.to_string(),
            self.max_linf.to_string(),
        ]
    }
}

const ATTACK_CHUNK: usize = 256;

/// Crafts adversarial examples for every row of `data` and scores the
/// target on them.
///
/// White-box attacks differentiate the target itself (through `f̂^K` with
/// the evaluation offsets unless `cfg.target` is raw). Black-box attacks
/// differentiate the raw `source` model and transfer.
pub fn evaluate_robustness(
    target: &MlpParams,
    eval: &EvalSettings,
    source: Option<&MlpParams>,
    cfg: &AttackConfig,
    data: &Dataset,
) -> Result<AttackReport, AttackError> {
    cfg.validate()?;
    let smoothing = match cfg.target {
        AttackTarget::Smoothed => eval.kernel.map(|(spec, samples)| Smoothing {
            spec,
            samples,
            seed: eval.seed,
        }),
        AttackTarget::Raw => None,
    };
    let grad_source = match cfg.threat {
        Threat::WhiteBox => GradientSource {
            params: target,
            smoothing,
            loss: eval.loss,
        },
        Threat::BlackBox => {
            let src = source.ok_or_else(|| AttackError::Config("black-box attack needs a source checkpoint".into()))?;
            if src.input_dim() != target.input_dim() || src.output_dim() != target.output_dim() {
                return Err(AttackError::Config(format!(
                    "source model maps {}→{}, target maps {}→{}",
                    src.input_dim(),
                    src.output_dim(),
                    target.input_dim(),
                    target.output_dim()
                )));
            }
            GradientSource::raw(src, eval.loss)
        }
    };
    let eval_offsets = match smoothing {
        Some(s) => Some(sample_offsets(&s.spec, s.samples, &mut stream(s.seed))?),
        None => None,
    };
    let outputs = |x: &Tensor| -> Result<Tensor, AttackError> {
        Ok(match &eval_offsets {
            Some(off) => kcm_eval(target, x, off)?,
            None => model_eval(target, x)?,
        })
    };

    let n = data.len();
    let mut clean_hits = 0usize;
    let mut adv_hits = 0usize;
    let mut max_linf = 0.0f64;
    let mut success = Vec::with_capacity(n);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(ATTACK_CHUNK) {
        let x = data.inputs().select_rows(chunk);
        let targets = data.targets(chunk);
        let adv = attack(&grad_source, &x, &targets, cfg)?;
        for (a, b) in adv.data().iter().zip(x.data()) {
            max_linf = max_linf.max((a - b).abs());
        }
        let clean = labels_from_outputs(&outputs(&x)?);
        let attacked = labels_from_outputs(&outputs(&adv)?);
        for (k, &i) in chunk.iter().enumerate() {
            let y = data.labels()[i];
            clean_hits += (clean[k] == y) as usize;
            adv_hits += (attacked[k] == y) as usize;
            success.push(attacked[k] != y);
        }
    }
    let denom = n.max(1) as f64;
    Ok(AttackReport {
        threat: cfg.threat,
        kind: cfg.kind,
        epsilon: cfg.epsilon,
        iterations: cfg.schedule().0,
        clean_acc: clean_hits as f64 / denom,
        adv_acc: adv_hits as f64 / denom,
        max_linf,
        success,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabelKind, Split};

    fn linear() -> MlpParams {
        MlpParams::linear(&[2.0, -3.0], 0.0)
    }

    fn one_point() -> (Tensor, Tensor) {
        (
            Tensor::from_rows(&[vec![0.3, 0.1]]).unwrap(),
            Tensor::from_rows(&[vec![1.0]]).unwrap(),
        )
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let (x, y) = one_point();
        let p = linear();
        let cfg = AttackConfig {
            epsilon: 0.0,
            ..AttackConfig::default()
        };
        let adv = fgsm(&GradientSource::raw(&p, Surrogate::Logistic), &x, &y, &cfg).unwrap();
        assert_eq!(adv, x);
    }

    #[test]
    fn linear_fgsm_direction() {
        let (x, y) = one_point();
        let p = linear();
        let cfg = AttackConfig {
            epsilon: 0.1,
            ..AttackConfig::default()
        };
        let adv = fgsm(&GradientSource::raw(&p, Surrogate::Logistic), &x, &y, &cfg).unwrap();
        assert_eq!(adv.data(), &[0.3 - 0.1, 0.1 + 0.1]);
    }

    #[test]
    fn single_iteration_matches_fgsm() {
        let (x, y) = one_point();
        let p = linear();
        let cfg = AttackConfig {
            epsilon: 0.05,
            iterations: 1,
            step_size: Some(0.05),
            ..AttackConfig::default()
        };
        let s = GradientSource::raw(&p, Surrogate::Logistic);
        assert_eq!(fgsm(&s, &x, &y, &cfg).unwrap(), ifgsm(&s, &x, &y, &cfg).unwrap());
    }

    #[test]
    fn box_is_respected() {
        let (x, y) = one_point();
        let p = linear();
        let cfg = AttackConfig {
            epsilon: 0.5,
            bounds: Some(InputBox::uniform(2, 0.0, 0.4)),
            ..AttackConfig::default()
        };
        let adv = fgsm(&GradientSource::raw(&p, Surrogate::Logistic), &x, &y, &cfg).unwrap();
        assert_eq!(adv.data(), &[0.0, 0.4]);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            AttackConfig {
                epsilon: -1.0,
                ..AttackConfig::default()
            },
            AttackConfig {
                iterations: 0,
                ..AttackConfig::default()
            },
            AttackConfig {
                step_size: Some(0.0),
                ..AttackConfig::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(AttackError::Config(_))));
        }
    }

    #[test]
    fn black_box_requires_source() {
        let data = Dataset::new(
            Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap(),
            vec![1],
            LabelKind::Binary,
            Split::Test,
        )
        .unwrap();
        let cfg = AttackConfig {
            threat: Threat::BlackBox,
            ..AttackConfig::default()
        };
        let err = evaluate_robustness(&linear(), &EvalSettings::raw(Surrogate::Logistic), None, &cfg, &data).unwrap_err();
        assert!(matches!(err, AttackError::Config(_)));
    }

    #[test]
    fn report_flags_misclassified_points() {
        // f(x) = x1; the attack pushes every point across the boundary
        let p = MlpParams::linear(&[1.0, 0.0], 0.0);
        let data = Dataset::new(
            Tensor::from_rows(&[vec![0.05, 0.0], vec![-0.05, 0.0], vec![0.5, 0.0]]).unwrap(),
            vec![1, -1, 1],
            LabelKind::Binary,
            Split::Test,
        )
        .unwrap();
        let cfg = AttackConfig {
            epsilon: 0.1,
            ..AttackConfig::default()
        };
        let r = evaluate_robustness(&p, &EvalSettings::raw(Surrogate::Logistic), None, &cfg, &data).unwrap();
        assert_eq!(r.clean_acc, 1.0);
        assert_eq!(r.success, vec![true, true, false]);
        assert!((r.adv_acc - 1.0 / 3.0).abs() < 1e-15);
        assert!(r.max_linf <= 0.1 + 1e-7);
    }
}
