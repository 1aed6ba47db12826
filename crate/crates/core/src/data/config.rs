//! Experiment configuration: flat `key = value` lines.
//!
//! ```text
//! # two-moon MIXUP_KCM run
//! mode = MIXUP_KCM
//! data.source = two_moons
//! kernel.h = 0.05
//! mixup.alpha = 1.0
//! ```
//!
//! `#` starts a comment, blank lines are ignored and every key must be one
//! of [`KEYS`]. Later assignments override earlier ones, which is how
//! command-line `--set key=value` overrides are applied.

use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::cifar::{channel_normalization, read_records, records_to_dataset, CifarVariant};
use super::contour::GridBounds;
use super::{two_moons, DataError, Dataset, Split};
use crate::attack::{AttackConfig, AttackKind, AttackTarget, InputBox, Threat};
use crate::kernel::KernelSpec;
use crate::loss::Surrogate;
use crate::mixup::MixupConfig;
use crate::rng::SeedBundle;
use crate::train::{KcmTrainConfig, LrSchedule, Mode, TrainConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {key:?}{}", location(.line))]
    UnknownKey { key: String, line: Option<usize> },
    #[error("invalid value {value:?} for {key}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("cannot read config file {path}: {reason}")]
    Missing { path: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

fn location(line: &Option<usize>) -> String {
    line.map(|l| format!(" on line {l}")).unwrap_or_default()
}

/// Every recognized key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("mode", "ERM | MIXUP | KCM | MIXUP_KCM"),
    ("data.source", "two_moons | cifar10"),
    ("data.path", "CIFAR-10 binary directory or file"),
    ("data.n_train", "training examples (cifar10: 0 keeps all)"),
    ("data.n_test", "test examples (cifar10: 0 keeps all)"),
    ("data.noise", "two-moon noise std-dev"),
    ("data.train_seed", "two-moon training sample seed"),
    ("data.test_seed", "two-moon test sample seed"),
    ("model.hidden", "comma-separated hidden widths"),
    ("train.epochs", "number of epochs"),
    ("train.batch_size", "minibatch size"),
    ("train.lr", "initial learning rate"),
    ("train.milestones", "comma-separated epochs where the rate decays"),
    ("train.lr_factor", "decay multiplier at each milestone"),
    ("train.momentum", "SGD momentum"),
    ("train.weight_decay", "L2 weight decay"),
    ("train.loss", "logistic | hinge | clipped_logistic"),
    ("mixup.alpha", "Beta(alpha, alpha) parameter"),
    ("mixup.per_example", "one lambda per example (true) or per batch"),
    ("mixup.min_trick", "replace lambda by min(lambda, 1 - lambda)"),
    ("mixup.lambda", "fixed lambda instead of Beta draws (disables the min trick)"),
    ("kernel.h", "Gaussian kernel bandwidth"),
    ("kernel.n_train", "offsets per training step"),
    ("kernel.n_eval", "offsets at evaluation"),
    ("kernel.antithetic", "draw offsets in (u, -u) pairs"),
    ("kernel.per_example", "independent offsets per example"),
    ("seed.master", "derives init/shuffle/mixup/kernel seeds"),
    ("seed.init", "initialization seed"),
    ("seed.shuffle", "minibatch order seed"),
    ("seed.mixup", "mixup seed"),
    ("seed.kernel", "training offset seed"),
    ("seed.eval", "evaluation offset seed"),
    ("attack.kind", "FGSM | IFGSM"),
    ("attack.epsilon", "l-infinity budget"),
    ("attack.iterations", "I-FGSM iterations"),
    ("attack.step_size", "I-FGSM step (default epsilon / iterations)"),
    ("attack.threat", "white-box | black-box"),
    ("attack.source", "black-box source checkpoint"),
    ("attack.target", "smoothed | raw"),
    ("attack.resample", "re-draw offsets every iteration"),
    ("attack.box_lower", "lower pixel bound before normalization"),
    ("attack.box_upper", "upper pixel bound before normalization"),
    ("contour.resolution", "grid nodes per axis"),
    ("contour.x1", "x1 range as lo,hi"),
    ("contour.x2", "x2 range as lo,hi"),
    ("rademacher.n", "sample size"),
    ("rademacher.dim", "input dimension"),
    ("rademacher.radius", "l2 radius of the linear class"),
    ("rademacher.method", "auto | exhaustive | mc"),
    ("rademacher.draws", "Monte Carlo sign draws"),
    ("rademacher.seed", "sample and sign seed"),
    ("rademacher.ascent_steps", "projected ascent steps for the network bound"),
    ("rademacher.ascent_draws", "sign vectors for the network bound"),
    ("sweep.h", "comma-separated bandwidths (0 = no kernel)"),
    ("sweep.lambda", "comma-separated fixed lambdas (0 = no mixup)"),
    ("output.dir", "artifact directory"),
    ("output.wall_time", "record wall-clock time in metrics"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    TwoMoons,
    Cifar10,
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataSource::TwoMoons => "two_moons",
            DataSource::Cifar10 => "cifar10",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RademacherMethod {
    Auto,
    Exhaustive,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    pub train_seed: u64,
    pub test_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: Surrogate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSection {
    pub h: f64,
    pub n_train: usize,
    pub n_eval: Option<usize>,
    pub antithetic: bool,
    pub per_example: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedSection {
    pub master: u64,
    pub init: Option<u64>,
    pub shuffle: Option<u64>,
    pub mixup: Option<u64>,
    pub kernel: Option<u64>,
    pub eval: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSection {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub iterations: usize,
    pub step_size: Option<f64>,
    pub threat: Threat,
    pub source: Option<PathBuf>,
    pub target: AttackTarget,
    pub resample: bool,
    pub box_lower: Option<f64>,
    pub box_upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RademacherSection {
    pub n: usize,
    pub dim: usize,
    pub radius: f64,
    pub method: RademacherMethod,
    pub draws: usize,
    pub seed: u64,
    pub ascent_steps: usize,
    pub ascent_draws: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub data: DataSection,
    pub hidden: Vec<usize>,
    pub train: TrainSection,
    pub mixup: MixupConfig,
    pub kernel: KernelSection,
    pub seed: SeedSection,
    pub attack: AttackSection,
    pub contour_resolution: usize,
    pub contour_bounds: GridBounds,
    pub rademacher: RademacherSection,
    pub sweep_h: Vec<f64>,
    pub sweep_lambda: Vec<f64>,
    pub output_dir: Option<PathBuf>,
    pub wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Erm,
            data: DataSection {
                source: DataSource::TwoMoons,
                path: None,
                n_train: 1000,
                n_test: 1000,
                noise: 0.2,
                train_seed: 1,
                test_seed: 2,
            },
            hidden: vec![64, 64],
            train: TrainSection {
                epochs: 100,
                batch_size: 128,
                lr: 0.1,
                milestones: Vec::new(),
                lr_factor: 0.1,
                momentum: 0.9,
                weight_decay: 1e-4,
                loss: Surrogate::Logistic,
            },
            mixup: MixupConfig::default(),
            kernel: KernelSection {
                h: 0.05,
                n_train: 1,
                n_eval: None,
                antithetic: false,
                per_example: false,
            },
            seed: SeedSection {
                master: 0,
                init: None,
                shuffle: None,
                mixup: None,
                kernel: None,
                eval: 0,
            },
            attack: AttackSection {
                kind: AttackKind::Fgsm,
                epsilon: 0.031,
                iterations: 10,
                step_size: None,
                threat: Threat::WhiteBox,
                source: None,
                target: AttackTarget::Smoothed,
                resample: false,
                box_lower: None,
                box_upper: None,
            },
            contour_resolution: 100,
            contour_bounds: GridBounds::two_moons(),
            rademacher: RademacherSection {
                n: 8,
                dim: 2,
                radius: 1.0,
                method: RademacherMethod::Auto,
                draws: 10_000,
                seed: 0,
                ascent_steps: 50,
                ascent_draws: 20,
            },
            sweep_h: vec![0.0],
            sweep_lambda: vec![0.0],
            output_dir: None,
            wall_time: true,
        }
    }
}

fn parse_err(key: &str, value: &str, reason: impl fmt::Display) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| parse_err(key, value, e))
}

fn boolean(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(parse_err(key, value, "expected true or false")),
    }
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn range(key: &str, value: &str) -> Result<(f64, f64), ConfigError> {
    match list::<f64>(key, value)?.as_slice() {
        [lo, hi] if lo < hi => Ok((*lo, *hi)),
        _ => Err(parse_err(key, value, "expected lo,hi with lo < hi")),
    }
}

/// Splits `key = value`, ignoring surrounding whitespace.
pub fn split_assignment(text: &str) -> Option<(&str, &str)> {
    let (k, v) = text.split_once('=')?;
    let k = k.trim();
    (!k.is_empty()).then_some((k, v.trim()))
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value;
        match key {
            "mode" => self.mode = num(key, v)?,
            "data.source" => {
                self.data.source = match v.to_ascii_lowercase().as_str() {
                    "two_moons" | "two-moons" | "twomoons" => DataSource::TwoMoons,
                    "cifar10" | "cifar-10" => DataSource::Cifar10,
                    _ => return Err(parse_err(key, v, "expected two_moons or cifar10")),
                }
            }
            "data.path" => self.data.path = Some(PathBuf::from(v)),
            "data.n_train" => self.data.n_train = num(key, v)?,
            "data.n_test" => self.data.n_test = num(key, v)?,
            "data.noise" => self.data.noise = num(key, v)?,
            "data.train_seed" => self.data.train_seed = num(key, v)?,
            "data.test_seed" => self.data.test_seed = num(key, v)?,
            "model.hidden" => self.hidden = list(key, v)?,
            "train.epochs" => self.train.epochs = num(key, v)?,
            "train.batch_size" => self.train.batch_size = num(key, v)?,
            "train.lr" => self.train.lr = num(key, v)?,
            "train.milestones" => self.train.milestones = list(key, v)?,
            "train.lr_factor" => self.train.lr_factor = num(key, v)?,
            "train.momentum" => self.train.momentum = num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = num(key, v)?,
            "train.loss" => self.train.loss = num(key, v)?,
            "mixup.alpha" => self.mixup.alpha = num(key, v)?,
            "mixup.per_example" => self.mixup.per_example = boolean(key, v)?,
            "mixup.min_trick" => self.mixup.min_trick = boolean(key, v)?,
            "mixup.lambda" => {
                let l: f64 = num(key, v)?;
                self.mixup.fixed_lambda = Some(l);
                self.mixup.min_trick = false;
            }
            "kernel.h" => self.kernel.h = num(key, v)?,
            "kernel.n_train" => self.kernel.n_train = num(key, v)?,
            "kernel.n_eval" => self.kernel.n_eval = Some(num(key, v)?),
            "kernel.antithetic" => self.kernel.antithetic = boolean(key, v)?,
            "kernel.per_example" => self.kernel.per_example = boolean(key, v)?,
            "seed.master" => self.seed.master = num(key, v)?,
            "seed.init" => self.seed.init = Some(num(key, v)?),
            "seed.shuffle" => self.seed.shuffle = Some(num(key, v)?),
            "seed.mixup" => self.seed.mixup = Some(num(key, v)?),
            "seed.kernel" => self.seed.kernel = Some(num(key, v)?),
            "seed.eval" => self.seed.eval = num(key, v)?,
            "attack.kind" => self.attack.kind = v.parse().map_err(|e| parse_err(key, v, e))?,
            "attack.epsilon" => self.attack.epsilon = num(key, v)?,
            "attack.iterations" => self.attack.iterations = num(key, v)?,
            "attack.step_size" => self.attack.step_size = Some(num(key, v)?),
            "attack.threat" => self.attack.threat = v.parse().map_err(|e| parse_err(key, v, e))?,
            "attack.source" => self.attack.source = Some(PathBuf::from(v)),
            "attack.target" => {
                self.attack.target = match v.to_ascii_lowercase().as_str() {
                    "smoothed" => AttackTarget::Smoothed,
                    "raw" => AttackTarget::Raw,
                    _ => return Err(parse_err(key, v, "expected smoothed or raw")),
                }
            }
            "attack.resample" => self.attack.resample = boolean(key, v)?,
            "attack.box_lower" => self.attack.box_lower = Some(num(key, v)?),
            "attack.box_upper" => self.attack.box_upper = Some(num(key, v)?),
            "contour.resolution" => self.contour_resolution = num(key, v)?,
            "contour.x1" => self.contour_bounds.x1 = range(key, v)?,
            "contour.x2" => self.contour_bounds.x2 = range(key, v)?,
            "rademacher.n" => self.rademacher.n = num(key, v)?,
            "rademacher.dim" => self.rademacher.dim = num(key, v)?,
            "rademacher.radius" => self.rademacher.radius = num(key, v)?,
            "rademacher.method" => {
                self.rademacher.method = match v.to_ascii_lowercase().as_str() {
                    "auto" => RademacherMethod::Auto,
                    "exhaustive" => RademacherMethod::Exhaustive,
                    "mc" | "monte-carlo" | "monte_carlo" => RademacherMethod::MonteCarlo,
                    _ => return Err(parse_err(key, v, "expected auto, exhaustive or mc")),
                }
            }
            "rademacher.draws" => self.rademacher.draws = num(key, v)?,
            "rademacher.seed" => self.rademacher.seed = num(key, v)?,
            "rademacher.ascent_steps" => self.rademacher.ascent_steps = num(key, v)?,
            "rademacher.ascent_draws" => self.rademacher.ascent_draws = num(key, v)?,
            "sweep.h" => self.sweep_h = list(key, v)?,
            "sweep.lambda" => self.sweep_lambda = list(key, v)?,
            "output.dir" => self.output_dir = Some(PathBuf::from(v)),
            "output.wall_time" => self.wall_time = boolean(key, v)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    line: None,
                })
            }
        }
        Ok(())
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_assignment(line).ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k, v).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { key, line: Some(i + 1) },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Missing {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// `flag` > `output.dir` > `$KCM_OUT` > `./kcm-out`.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os("KCM_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("kcm-out"))
    }

    pub fn seeds(&self) -> SeedBundle {
        let base = SeedBundle::from_master(self.seed.master);
        SeedBundle {
            init: self.seed.init.unwrap_or(base.init),
            shuffle: self.seed.shuffle.unwrap_or(base.shuffle),
            mixup: self.seed.mixup.unwrap_or(base.mixup),
            kernel: self.seed.kernel.unwrap_or(base.kernel),
        }
    }

    /// Kernel settings for input dimension `dim`.
    pub fn kcm(&self, dim: usize) -> Result<KcmTrainConfig, ConfigError> {
        let spec = KernelSpec::gaussian(self.kernel.h, dim)
            .map_err(|e| parse_err("kernel.h", &self.kernel.h.to_string(), e))?
            .with_antithetic(self.kernel.antithetic);
        Ok(KcmTrainConfig {
            spec,
            n_train: self.kernel.n_train,
            n_eval: self.kernel.n_eval.unwrap_or(self.kernel.n_train),
            per_example: self.kernel.per_example,
            zero_offsets: false,
        })
    }

    /// Training settings for `mode` on inputs of dimension `dim`.
    pub fn train_config(&self, mode: Mode, dim: usize) -> Result<TrainConfig, ConfigError> {
        let cfg = TrainConfig {
            mode,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            schedule: LrSchedule {
                initial: self.train.lr,
                milestones: self.train.milestones.clone(),
                factor: self.train.lr_factor,
            },
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            seeds: self.seeds(),
            eval_seed: self.seed.eval,
            mixup: mode.uses_mixup().then_some(self.mixup),
            kernel: if mode.uses_kernel() { Some(self.kcm(dim)?) } else { None },
            loss: self.train.loss,
            record_wall_time: self.wall_time,
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn attack_config(&self, train: &Dataset) -> Result<AttackConfig, ConfigError> {
        let bounds = match (self.attack.box_lower, self.attack.box_upper) {
            (None, None) => None,
            (lo, hi) => {
                let (lo, hi) = (lo.unwrap_or(f64::NEG_INFINITY), hi.unwrap_or(f64::INFINITY));
                let d = train.dim();
                Some(match train.normalization() {
                    Some(n) => InputBox {
                        lower: (0..d).map(|j| n.apply(lo, j)).collect(),
                        upper: (0..d).map(|j| n.apply(hi, j)).collect(),
                    },
                    None => InputBox::uniform(d, lo, hi),
                })
            }
        };
        let cfg = AttackConfig {
            kind: self.attack.kind,
            epsilon: self.attack.epsilon,
            iterations: self.attack.iterations,
            step_size: self.attack.step_size,
            bounds,
            threat: self.attack.threat,
            target: self.attack.target,
            resample_offsets: self.attack.resample,
            seed: self.seed.eval,
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    /// Loads the train/test pair. CIFAR-10 subsets keep the first records
    /// and fit the channel normalization on the training subset.
    pub fn load_data(&self) -> Result<(Dataset, Dataset), DataError> {
        let d = &self.data;
        match d.source {
            DataSource::TwoMoons => Ok((
                two_moons(d.n_train, d.noise, d.train_seed, Split::Train)?,
                two_moons(d.n_test, d.noise, d.test_seed, Split::Test)?,
            )),
            DataSource::Cifar10 => {
                let path = d
                    .path
                    .clone()
                    .or_else(|| std::env::var_os("CIFAR10_DIR").map(PathBuf::from))
                    .ok_or_else(|| DataError::Contract("cifar10 needs data.path or CIFAR10_DIR".into()))?;
                let take = |ds: Dataset, n: usize| {
                    if n == 0 || n >= ds.len() {
                        ds
                    } else {
                        ds.subset(&(0..n).collect::<Vec<_>>())
                    }
                };
                let train_raw = records_to_dataset(&read_records(&path, Split::Train, CifarVariant::Cifar10)?, Split::Train);
                let test_raw = records_to_dataset(&read_records(&path, Split::Test, CifarVariant::Cifar10)?, Split::Test);
                let mut train = take(train_raw, d.n_train);
                let mut test = take(test_raw, d.n_test);
                let norm = channel_normalization(&train);
                train.normalize(norm.clone())?;
                test.normalize(norm)?;
                Ok((train, test))
            }
        }
    }
}
