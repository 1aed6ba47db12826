//! One training loop for four learning rules.
//!
//! | mode        | per step                                                   |
//! |-------------|------------------------------------------------------------|
//! | `ERM`       | loss on the minibatch                                      |
//! | `MIXUP`     | draw λ, mix the minibatch, loss on mixed pairs             |
//! | `KCM`       | draw `N` kernel offsets, loss on `N⁻¹ Σ f(x − u_i)`        |
//! | `MIXUP_KCM` | both, mixing first                                         |
//!
//! Each source of randomness has its own stream (see [`SeedBundle`]), so
//! the modes are comparable step by step: Mixup with λ ≡ 0 and KCM with
//! zero offsets reproduce the ERM trajectory bit for bit.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use thiserror::Error;

use crate::autodiff::Tape;
use crate::data::{io, DataError, Dataset, LabelKind};
use crate::kernel::{
    kcm_eval, kcm_forward, labels_from_outputs, model_eval, sample_offsets, sample_offsets_per_example,
    KernelError, KernelSpec, OffsetBatch,
};
use crate::loss::Surrogate;
use crate::mixup::{mix_batch, sample_lambdas, MixupConfig, MixupError};
use crate::model::{MlpParams, ModelError};
use crate::rng::{stream, SeedBundle, Stream};
use crate::tensor::{Tensor, TensorError};
use rand::seq::SliceRandom;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step} (epoch {epoch}): {diagnostics}")]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        diagnostics: String,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Mixup(#[from] MixupError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Erm,
    Mixup,
    Kcm,
    MixupKcm,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Erm, Mode::Mixup, Mode::Kcm, Mode::MixupKcm];

    pub fn uses_mixup(self) -> bool {
        matches!(self, Mode::Mixup | Mode::MixupKcm)
    }

    pub fn uses_kernel(self) -> bool {
        matches!(self, Mode::Kcm | Mode::MixupKcm)
    }

    pub fn from_flags(mixup: bool, kernel: bool) -> Self {
        match (mixup, kernel) {
            (false, false) => Mode::Erm,
            (true, false) => Mode::Mixup,
            (false, true) => Mode::Kcm,
            (true, true) => Mode::MixupKcm,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Erm => "ERM",
            Mode::Mixup => "MIXUP",
            Mode::Kcm => "KCM",
            Mode::MixupKcm => "MIXUP_KCM",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "ERM" => Ok(Mode::Erm),
            "MIXUP" => Ok(Mode::Mixup),
            "KCM" => Ok(Mode::Kcm),
            "MIXUP_KCM" | "MIXUP+KCM" => Ok(Mode::MixupKcm),
            _ => Err(format!("unknown mode `{s}` (expected ERM, MIXUP, KCM or MIXUP_KCM)")),
        }
    }
}

/// Kernel settings for the KCM modes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KcmTrainConfig {
    pub spec: KernelSpec,
    /// Monte Carlo sample size per training step.
    pub n_train: usize,
    /// Monte Carlo sample size at evaluation.
    pub n_eval: usize,
    /// Independent offsets for every example instead of one shared draw.
    pub per_example: bool,
    /// Replace every draw by zero (the `h → 0` limit); diagnostic only.
    pub zero_offsets: bool,
}

impl KcmTrainConfig {
    pub fn new(spec: KernelSpec, n_train: usize) -> Self {
        Self {
            spec,
            n_train,
            n_eval: n_train,
            per_example: false,
            zero_offsets: false,
        }
    }
}

/// Step decay: the rate is multiplied by `factor` at each milestone epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn constant(rate: f64) -> Self {
        Self {
            initial: rate,
            milestones: Vec::new(),
            factor: 1.0,
        }
    }

    /// Rate used during 0-based `epoch`.
    pub fn rate_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.initial * self.factor.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seeds: SeedBundle,
    /// Seed of the fixed evaluation offsets.
    pub eval_seed: u64,
    pub mixup: Option<MixupConfig>,
    pub kernel: Option<KcmTrainConfig>,
    pub loss: Surrogate,
    /// Record elapsed time per epoch (0 otherwise, for byte-identical reruns).
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Erm,
            epochs: 1,
            batch_size: 128,
            schedule: LrSchedule {
                initial: 0.1,
                milestones: Vec::new(),
                factor: 0.1,
            },
            momentum: 0.9,
            weight_decay: 1e-4,
            seeds: SeedBundle::default(),
            eval_seed: 0,
            mixup: None,
            kernel: None,
            loss: Surrogate::Logistic,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.schedule.initial > 0.0) || !(self.schedule.factor > 0.0) {
            return bad("learning rate and decay factor must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative".into());
        }
        match (self.mode.uses_mixup(), &self.mixup) {
            (true, None) => return bad(format!("{} requires mixup settings", self.mode)),
            (true, Some(m)) => m.validate()?,
            _ => {}
        }
        match (self.mode.uses_kernel(), &self.kernel) {
            (true, None) => return bad(format!("{} requires kernel settings", self.mode)),
            (true, Some(k)) => {
                k.spec.validate()?;
                if k.n_train == 0 || k.n_eval == 0 {
                    return bad("kernel sample sizes must be at least 1".into());
                }
                if k.spec.antithetic && (k.n_train % 2 != 0 || k.n_eval % 2 != 0) {
                    return Err(KernelError::OddAntithetic(k.n_train).into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Evaluation settings implied by the mode.
    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            kernel: self
                .kernel
                .filter(|_| self.mode.uses_kernel())
                .map(|k| (k.spec, k.n_eval)),
            seed: self.eval_seed,
            loss: self.loss,
        }
    }

    /// He-initialized network with the given hidden widths for `data`.
    pub fn init_model(&self, hidden: &[usize], data: &Dataset) -> Result<MlpParams, TrainError> {
        let mut dims = vec![data.dim()];
        dims.extend_from_slice(hidden);
        dims.push(data.kind().output_dim());
        Ok(MlpParams::he_init(&dims, &mut self.seeds.init_stream())?)
    }
}

/// How a trained model is evaluated: raw `f` or `f̂^K` with fixed offsets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub kernel: Option<(KernelSpec, usize)>,
    pub seed: u64,
    pub loss: Surrogate,
}

impl EvalSettings {
    pub fn raw(loss: Surrogate) -> Self {
        Self {
            kernel: None,
            seed: 0,
            loss,
        }
    }

    /// The offsets every evaluation with these settings uses.
    pub fn offsets(&self) -> Result<Option<OffsetBatch>, KernelError> {
        self.kernel
            .map(|(spec, n)| sample_offsets(&spec, n, &mut stream(self.seed)))
            .transpose()
    }

    /// `f̂^K(x)` (or `f(x)`) for every row of `x`.
    pub fn outputs(&self, params: &MlpParams, x: &Tensor) -> Result<Tensor, KernelError> {
        match self.offsets()? {
            Some(off) => kcm_eval(params, x, &off),
            None => Ok(model_eval(params, x)?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Mean surrogate loss (cross-entropy for multi-class).
    pub risk: f64,
}

/// Mean surrogate loss of `outputs` against the dataset's labels.
pub fn surrogate_risk(outputs: &Tensor, data: &Dataset, loss: Surrogate) -> f64 {
    let n = data.len() as f64;
    match data.kind() {
        LabelKind::Binary => {
            outputs
                .data()
                .iter()
                .zip(data.labels())
                .map(|(&f, &y)| loss.value(y as f64 * f))
                .sum::<f64>()
                / n
        }
        LabelKind::MultiClass(_) => {
            (0..data.len())
                .map(|i| -crate::autodiff::log_softmax(outputs.row(i))[data.labels()[i] as usize])
                .sum::<f64>()
                / n
        }
    }
}

pub fn accuracy(predicted: &[i64], labels: &[i64]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// 0–1 accuracy of `sign(f̂^K)` (or argmax) plus the mean surrogate loss.
pub fn evaluate(params: &MlpParams, settings: &EvalSettings, data: &Dataset) -> Result<Evaluation, TrainError> {
    let outputs = settings.outputs(params, data.inputs())?;
    Ok(Evaluation {
        accuracy: accuracy(&labels_from_outputs(&outputs), data.labels()),
        risk: surrogate_risk(&outputs, data, settings.loss),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: [&str; 6] = ["epoch", "mode", "train_loss", "train_acc", "test_acc", "wall_ms"];

pub fn metrics_csv(mode: Mode, metrics: &[EpochMetrics]) -> Result<Vec<u8>, DataError> {
    io::csv_bytes(
        &METRICS_HEADER,
        metrics.iter().map(|m| {
            [
                m.epoch.to_string(),
                mode.to_string(),
                m.train_loss.to_string(),
                m.train_acc.to_string(),
                m.test_acc.to_string(),
                m.wall_ms.to_string(),
            ]
        }),
    )
}

/// Median of the last `k` values (all of them if fewer); mean of the two
/// middle values for an even count.
pub fn median_of_last(values: &[f64], k: usize) -> Option<f64> {
    if values.is_empty() || k == 0 {
        return None;
    }
    let mut tail: Vec<f64> = values[values.len().saturating_sub(k)..].to_vec();
    tail.sort_by(|a, b| a.total_cmp(b));
    let m = tail.len();
    Some(if m % 2 == 1 {
        tail[m / 2]
    } else {
        (tail[m / 2 - 1] + tail[m / 2]) / 2.0
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainOutcome {
    /// Median test accuracy over the last 10 epochs.
    pub fn summary_accuracy(&self) -> f64 {
        let accs: Vec<f64> = self.metrics.iter().map(|m| m.test_acc).collect();
        median_of_last(&accs, 10).unwrap_or(0.0)
    }
}

/// What an observer sees after every optimization step.
#[derive(Debug)]
pub struct StepRecord<'a> {
    pub step: usize,
    pub epoch: usize,
    pub batch: &'a [usize],
    pub loss: f64,
    pub lambdas: Option<&'a [f64]>,
    pub params: &'a MlpParams,
}

/// Minibatch trainer holding parameters, momentum and random streams.
pub struct Trainer<'d> {
    config: TrainConfig,
    params: MlpParams,
    velocity: Vec<f64>,
    train: &'d Dataset,
    shuffle_rng: Stream,
    mixup_rng: Stream,
    kernel_rng: Stream,
    step: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainConfig, init: MlpParams, train: &'d Dataset) -> Result<Self, TrainError> {
        config.validate()?;
        if train.is_empty() {
            return Err(TrainError::Config("training set is empty".into()));
        }
        if init.input_dim() != train.dim() || init.output_dim() != train.kind().output_dim() {
            return Err(TrainError::Config(format!(
                "model dims {:?} do not fit data (d = {}, outputs = {})",
                init.dims(),
                train.dim(),
                train.kind().output_dim()
            )));
        }
        Ok(Self {
            velocity: vec![0.0; init.num_params()],
            shuffle_rng: config.seeds.shuffle_stream(),
            mixup_rng: config.seeds.mixup_stream(),
            kernel_rng: config.seeds.kernel_stream(),
            config,
            params: init,
            train,
            step: 0,
        })
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn into_params(self) -> MlpParams {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Shuffled minibatches for one epoch.
    pub fn epoch_batches(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Loss and parameter gradient on one minibatch (no update).
    pub fn loss_and_grad(&mut self, batch: &[usize]) -> Result<(f64, MlpParams, Option<Vec<f64>>), TrainError> {
        let mut x = self.train.inputs().select_rows(batch);
        let mut targets = self.train.targets(batch);
        let mut lambdas = None;
        if self.config.mode.uses_mixup() {
            let cfg = self.config.mixup.as_ref().expect("validated");
            let l = sample_lambdas(cfg, batch.len(), &mut self.mixup_rng)?;
            let mixed = mix_batch(&x, &targets, &l, &mut self.mixup_rng)?;
            x = mixed.inputs;
            targets = mixed.targets;
            lambdas = Some(l);
        }

        let tape = Tape::new();
        let vars = self.params.register(&tape, true);
        let xv = tape.constant(x);
        let out = if self.config.mode.uses_kernel() {
            let k = self.config.kernel.as_ref().expect("validated");
            let offsets = if k.zero_offsets {
                OffsetBatch::zeros(k.n_train, k.spec.dim)?
            } else if k.per_example {
                sample_offsets_per_example(&k.spec, k.n_train, batch.len(), &mut self.kernel_rng)?
            } else {
                sample_offsets(&k.spec, k.n_train, &mut self.kernel_rng)?
            };
            kcm_forward(&vars, xv, &offsets)?
        } else {
            vars.forward(xv)?
        };
        let loss = match self.train.kind() {
            LabelKind::Binary => out.margin_loss(targets.data(), self.config.loss)?,
            LabelKind::MultiClass(_) => out.softmax_cross_entropy(&targets)?,
        };
        let value = loss.value().item();
        if !value.is_finite() {
            let out_v = out.value();
            return Err(TrainError::NonFiniteLoss {
                step: self.step,
                epoch: 0,
                diagnostics: format!(
                    "loss={value}, max|output|={}, max|param|={}, lr={}",
                    out_v.max_abs(),
                    self.params.flatten().iter().fold(0.0f64, |a, v| a.max(v.abs())),
                    self.config.schedule.initial
                ),
            });
        }
        tape.backward(loss)?;
        Ok((value, vars.grads(&tape, &self.params), lambdas))
    }

    /// SGD with momentum and L2 weight decay:
    /// `v ← μ v + (g + wd·w)`, `w ← w − rate·v`.
    pub fn apply_gradient(&mut self, grads: &MlpParams, rate: f64) -> Result<(), TrainError> {
        let mut w = self.params.flatten();
        let g = grads.flatten();
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        for ((wi, gi), vi) in w.iter_mut().zip(&g).zip(self.velocity.iter_mut()) {
            *vi = mu * *vi + (gi + wd * *wi);
            *wi -= rate * *vi;
        }
        self.params.set_flat(&w)?;
        Ok(())
    }

    /// Runs one step on `batch` and returns the minibatch loss.
    pub fn step(&mut self, batch: &[usize], epoch: usize) -> Result<(f64, Option<Vec<f64>>), TrainError> {
        let (loss, grads, lambdas) = self.loss_and_grad(batch).map_err(|e| match e {
            TrainError::NonFiniteLoss { step, diagnostics, .. } => TrainError::NonFiniteLoss {
                step,
                epoch,
                diagnostics,
            },
            other => other,
        })?;
        let rate = self.config.schedule.rate_at(epoch);
        self.apply_gradient(&grads, rate)?;
        self.step += 1;
        Ok((loss, lambdas))
    }
}

/// Trains and reports per-epoch metrics.
pub fn train(
    config: &TrainConfig,
    init: MlpParams,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<TrainOutcome, TrainError> {
    train_observed(config, init, train_set, test_set, |_| {})
}

/// [`train`] with a callback after every optimization step.
pub fn train_observed(
    config: &TrainConfig,
    init: MlpParams,
    train_set: &Dataset,
    test_set: &Dataset,
    mut observer: impl FnMut(&StepRecord<'_>),
) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(config.clone(), init, train_set)?;
    let eval = config.eval_settings();
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let mut total = 0.0;
        let mut seen = 0usize;
        for batch in trainer.epoch_batches() {
            let (loss, lambdas) = trainer.step(&batch, epoch)?;
            total += loss * batch.len() as f64;
            seen += batch.len();
            observer(&StepRecord {
                step: trainer.step - 1,
                epoch,
                batch: &batch,
                loss,
                lambdas: lambdas.as_deref(),
                params: trainer.params(),
            });
        }
        let train_eval = evaluate(trainer.params(), &eval, train_set)?;
        let test_eval = evaluate(trainer.params(), &eval, test_set)?;
        let wall_ms = if config.record_wall_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        log::debug!(
            "{} epoch {epoch}: loss {:.4} train {:.4} test {:.4}",
            config.mode,
            total / seen as f64,
            train_eval.accuracy,
            test_eval.accuracy
        );
        metrics.push(EpochMetrics {
            epoch,
            train_loss: total / seen as f64,
            train_acc: train_eval.accuracy,
            test_acc: test_eval.accuracy,
            wall_ms,
        });
    }
    Ok(TrainOutcome {
        params: trainer.into_params(),
        metrics,
    })
}

/// One grid cell of a bandwidth × interpolation-weight sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub h: f64,
    pub lambda: f64,
    pub mode: Mode,
    pub epochs: usize,
    pub n_kernel: usize,
    pub seeds: SeedBundle,
    pub train: Evaluation,
    pub test: Evaluation,
    pub median_test_acc: f64,
}

pub const SWEEP_HEADER: [&str; 15] = [
    "h",
    "lambda",
    "mode",
    "epochs",
    "n_kernel",
    "seed_init",
    "seed_shuffle",
    "seed_mixup",
    "seed_kernel",
    "train_acc",
    "train_risk",
    "test_acc",
    "test_risk",
    "median_test_acc",
    "excess_test_risk",
];

/// Cell configuration: `h = 0` disables the kernel, `λ = 0` disables Mixup,
/// otherwise λ is held fixed (no Beta draws, no min-trick).
pub fn sweep_cell_config(base: &TrainConfig, h: f64, lambda: f64, dim: usize) -> Result<TrainConfig, TrainError> {
    let mut cfg = base.clone();
    cfg.mode = Mode::from_flags(lambda > 0.0, h > 0.0);
    cfg.mixup = (lambda > 0.0).then(|| MixupConfig::fixed(lambda));
    cfg.kernel = if h > 0.0 {
        let template = base.kernel.unwrap_or_else(|| {
            KcmTrainConfig::new(KernelSpec::gaussian(1.0, dim).expect("unit kernel"), 1)
        });
        Some(KcmTrainConfig {
            spec: KernelSpec {
                bandwidth: h,
                dim,
                ..template.spec
            },
            ..template
        })
    } else {
        None
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Trains one model per `(h, λ)` cell from the same initialization and
/// seeds; rows are ordered `h`-major.
pub fn sweep(
    hs: &[f64],
    lambdas: &[f64],
    base: &TrainConfig,
    init: &MlpParams,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<Vec<SweepRow>, TrainError> {
    if hs.is_empty() || lambdas.is_empty() {
        return Err(TrainError::Config("sweep grid is empty".into()));
    }
    if let Some(v) = hs.iter().chain(lambdas).find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(TrainError::Config(format!("sweep values must be finite and >= 0, got {v}")));
    }
    let mut rows = Vec::with_capacity(hs.len() * lambdas.len());
    for &h in hs {
        for &lambda in lambdas {
            let cfg = sweep_cell_config(base, h, lambda, train_set.dim())?;
            let outcome = train(&cfg, init.clone(), train_set, test_set)?;
            let eval = cfg.eval_settings();
            rows.push(SweepRow {
                h,
                lambda,
                mode: cfg.mode,
                epochs: cfg.epochs,
                n_kernel: cfg.kernel.map_or(0, |k| k.n_train),
                seeds: cfg.seeds,
                train: evaluate(&outcome.params, &eval, train_set)?,
                test: evaluate(&outcome.params, &eval, test_set)?,
                median_test_acc: outcome.summary_accuracy(),
            });
        }
    }
    Ok(rows)
}

/// Sweep table; `excess_test_risk` is relative to the `(h, λ) = (0, 0)`
/// cell when the grid contains it, blank otherwise.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>, DataError> {
    let baseline = rows
        .iter()
        .find(|r| r.h == 0.0 && r.lambda == 0.0)
        .map(|r| r.test.risk);
    io::csv_bytes(
        &SWEEP_HEADER,
        rows.iter().map(|r| {
            [
                r.h.to_string(),
                r.lambda.to_string(),
                r.mode.to_string(),
                r.epochs.to_string(),
                r.n_kernel.to_string(),
                r.seeds.init.to_string(),
                r.seeds.shuffle.to_string(),
                r.seeds.mixup.to_string(),
                r.seeds.kernel.to_string(),
                r.train.accuracy.to_string(),
                r.train.risk.to_string(),
                r.test.accuracy.to_string(),
                r.test.risk.to_string(),
                r.median_test_acc.to_string(),
                baseline.map_or(String::new(), |b| (r.test.risk - b).to_string()),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{two_moons, Split};
    use crate::model::Layer;

    fn line_data() -> Dataset {
        Dataset::new(
            Tensor::matrix(2, 1, vec![-1.0, 1.0]).unwrap(),
            vec![-1, 1],
            LabelKind::Binary,
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn mode_round_trips_through_text() {
        for m in Mode::ALL {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert_eq!("MIXUP+KCM".parse::<Mode>().unwrap(), Mode::MixupKcm);
        assert!("SGD".parse::<Mode>().is_err());
    }

    #[test]
    fn schedule_decays_at_milestones() {
        let s = LrSchedule {
            initial: 0.1,
            milestones: vec![2, 4],
            factor: 0.5,
        };
        assert_eq!(s.rate_at(0), 0.1);
        assert_eq!(s.rate_at(2), 0.05);
        assert_eq!(s.rate_at(5), 0.025);
    }

    #[test]
    fn config_requires_mode_sections() {
        let cfg = TrainConfig {
            mode: Mode::MixupKcm,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn erm_loss_decreases_on_separable_points() {
        let data = line_data();
        let cfg = TrainConfig {
            batch_size: 2,
            schedule: LrSchedule::constant(0.05),
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(cfg, MlpParams::linear(&[0.0], 0.0), &data).unwrap();
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let (loss, _) = t.step(&[0, 1], 0).unwrap();
            assert!(loss < prev, "{loss} !< {prev}");
            prev = loss;
        }
    }

    #[test]
    fn plain_sgd_step_is_minus_rate_times_gradient() {
        let data = two_moons(16, 0.1, 2, Split::Train).unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            schedule: LrSchedule::constant(0.3),
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let init = cfg.init_model(&[8], &data).unwrap();
        let mut t = Trainer::new(cfg, init.clone(), &data).unwrap();
        let batch: Vec<usize> = (0..16).collect();
        let (_, grads, _) = t.loss_and_grad(&batch).unwrap();
        t.apply_gradient(&grads, 0.3).unwrap();
        for ((after, before), g) in t.params().flatten().iter().zip(init.flatten()).zip(grads.flatten()) {
            assert!((after - (before - 0.3 * g)).abs() <= 1e-12);
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_step() {
        let data = line_data();
        let cfg = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        let bad = MlpParams::new(vec![Layer {
            weight: Tensor::matrix(1, 1, vec![-1e308]).unwrap(),
            bias: Tensor::vector(vec![1e308]),
        }])
        .unwrap();
        let mut t = Trainer::new(cfg, bad, &data).unwrap();
        match t.step(&[0, 1], 3) {
            Err(TrainError::NonFiniteLoss { step: 0, epoch: 3, diagnostics }) => {
                assert!(diagnostics.contains("loss=inf"), "{diagnostics}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn evaluate_extremes() {
        let data = line_data();
        let perfect = MlpParams::linear(&[1.0], 0.0);
        let e = evaluate(&perfect, &EvalSettings::raw(Surrogate::Logistic), &data).unwrap();
        assert_eq!(e.accuracy, 1.0);
        let constant = MlpParams::linear(&[0.0], 0.3);
        let e = evaluate(&constant, &EvalSettings::raw(Surrogate::Logistic), &data).unwrap();
        assert_eq!(e.accuracy, 0.5);
    }

    #[test]
    fn median_of_last_window() {
        let v: Vec<f64> = (0..15).map(|i| i as f64).collect();
        assert_eq!(median_of_last(&v, 10), Some(9.5));
        assert_eq!(median_of_last(&[3.0, 1.0, 2.0], 10), Some(2.0));
        assert_eq!(median_of_last(&[], 10), None);
    }

    #[test]
    fn metrics_csv_header_and_rows() {
        let m = vec![EpochMetrics {
            epoch: 0,
            train_loss: 0.5,
            train_acc: 0.75,
            test_acc: 0.8,
            wall_ms: 12,
        }];
        let s = String::from_utf8(metrics_csv(Mode::MixupKcm, &m).unwrap()).unwrap();
        assert_eq!(s, "epoch,mode,train_loss,train_acc,test_acc,wall_ms\n0,MIXUP_KCM,0.5,0.75,0.8,12\n");
    }

    #[test]
    fn sweep_cell_modes() {
        let base = TrainConfig::default();
        assert_eq!(sweep_cell_config(&base, 0.0, 0.0, 2).unwrap().mode, Mode::Erm);
        assert_eq!(sweep_cell_config(&base, 0.0, 0.2, 2).unwrap().mode, Mode::Mixup);
        let c = sweep_cell_config(&base, 0.5, 0.0, 2).unwrap();
        assert_eq!(c.mode, Mode::Kcm);
        assert_eq!(c.kernel.unwrap().spec.bandwidth, 0.5);
        assert_eq!(sweep_cell_config(&base, 0.5, 0.1, 2).unwrap().mode, Mode::MixupKcm);
        assert!(sweep(&[], &[0.0], &base, &MlpParams::linear(&[0.0, 0.0], 0.0), &line_data(), &line_data()).is_err());
    }
}
