use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use kcm_core::attack::{evaluate_robustness, REPORT_HEADER};
use kcm_core::data::checkpoint::Checkpoint;
use kcm_core::data::config::{ConfigError, ExperimentConfig, RademacherMethod};
use kcm_core::data::contour::export_contour;
use kcm_core::data::io::{write_atomic, write_csv};
use kcm_core::data::Dataset;
use kcm_core::kernel::gaussian_mean_norm;
use kcm_core::model::{complexity_proxy_g, Layer, MlpParams, SpectralBudget, DEFAULT_RANK_TOL};
use kcm_core::rademacher::{
    kcm_scale, rademacher_class, rademacher_mlp_lower_bound, AscentConfig, ClassKind, Convolution, FunctionClassSpec,
    Method, CSV_HEADER,
};
use kcm_core::tensor::Tensor;
use kcm_core::train::{evaluate, metrics_csv, sweep, sweep_csv, train, Mode, TrainConfig};

#[derive(Parser)]
#[command(name = "kcm", version, about = "Kernel-convoluted models and Mixup: training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set kernel.h=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (beats `output.dir` and `$KCM_OUT`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ModeArg {
    /// ERM, MIXUP, KCM or MIXUP_KCM.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args, Clone)]
struct CheckpointArg {
    /// Model checkpoint; defaults to `<out>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv and model.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mode: ModeArg,
    },
    /// Evaluate a checkpoint on both splits; writes eval.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mode: ModeArg,
        #[command(flatten)]
        ckpt: CheckpointArg,
    },
    /// FGSM / I-FGSM robustness of a checkpoint; writes attack.csv.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mode: ModeArg,
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// FGSM or IFGSM.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        epsilon: Option<String>,
        #[arg(long)]
        iters: Option<String>,
        /// white-box or black-box.
        #[arg(long)]
        threat: Option<String>,
        /// Black-box source checkpoint.
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Decision-function grid of a 2-d checkpoint; writes contour.csv.
    Contour {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mode: ModeArg,
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long)]
        resolution: Option<String>,
    },
    /// Rademacher complexity estimates; writes rademacher.csv.
    Rademacher {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mode: ModeArg,
        /// Also bound the network class of this checkpoint from below.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train over an (h, lambda) grid; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated bandwidths; 0 disables the kernel.
        #[arg(long = "h")]
        h: Option<String>,
        /// Comma-separated fixed Mixup weights; 0 disables Mixup.
        #[arg(long = "lambda")]
        lambda: Option<String>,
    },
}

/// Errors that are the caller's fault (exit 2) versus runtime failures (exit 1).
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome<T> = Result<T, Failure>;

fn load_config(common: &Common, flags: &[(&str, Option<&String>)]) -> Outcome<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for item in &common.overrides {
        let (k, v) = kcm_core::data::config::split_assignment(item)
            .ok_or_else(|| Failure::Usage(anyhow!("--set expects KEY=VALUE, got {item:?}")))?;
        cfg.set(k, v)?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Rebuilds the train/test pair, normalized like the checkpoint's training data.
fn data_for(cfg: &ExperimentConfig) -> anyhow::Result<(Dataset, Dataset)> {
    cfg.load_data().context("loading data")
}

fn eval_config(cfg: &ExperimentConfig, dim: usize) -> Outcome<TrainConfig> {
    Ok(cfg.train_config(cfg.mode, dim)?)
}

fn run_train(common: &Common, mode: &ModeArg) -> Outcome<()> {
    let cfg = load_config(common, &[("mode", mode.mode.as_ref())])?;
    let out = cfg.output_dir(common.out.as_deref());
    let (train_set, test_set) = data_for(&cfg)?;
    let tc = eval_config(&cfg, train_set.dim())?;
    let init = tc.init_model(&cfg.hidden, &train_set).context("initializing model")?;
    let outcome = train(&tc, init, &train_set, &test_set).context("training")?;
    write_atomic(&out.join("metrics.csv"), &metrics_csv(tc.mode, &outcome.metrics).context("metrics")?)
        .context("writing metrics")?;
    Checkpoint {
        params: outcome.params.clone(),
        seeds: tc.seeds,
        normalization: train_set.normalization().cloned(),
    }
    .save(&out.join("model.ckpt"))
    .context("writing checkpoint")?;
    let last = outcome.metrics.last().expect("at least one epoch");
    println!(
        "{} epochs={} final_test_acc={} median_test_acc={}",
        tc.mode,
        tc.epochs,
        last.test_acc,
        outcome.summary_accuracy()
    );
    log::info!("artifacts in {}", out.display());
    Ok(())
}

fn checkpoint_path(ckpt: &CheckpointArg, out: &Path) -> PathBuf {
    ckpt.checkpoint.clone().unwrap_or_else(|| out.join("model.ckpt"))
}

fn check_dims(params: &MlpParams, data: &Dataset) -> Outcome<()> {
    if params.input_dim() != data.dim() || params.output_dim() != data.kind().output_dim() {
        return Err(Failure::Runtime(anyhow!(
            "checkpoint maps {}→{} but the data has {} inputs and {} outputs",
            params.input_dim(),
            params.output_dim(),
            data.dim(),
            data.kind().output_dim()
        )));
    }
    Ok(())
}

fn run_eval(common: &Common, mode: &ModeArg, ckpt: &CheckpointArg) -> Outcome<()> {
    let cfg = load_config(common, &[("mode", mode.mode.as_ref())])?;
    let out = cfg.output_dir(common.out.as_deref());
    let ck = load_checkpoint(&checkpoint_path(ckpt, &out))?;
    let (train_set, test_set) = data_for(&cfg)?;
    check_dims(&ck.params, &train_set)?;
    let settings = eval_config(&cfg, train_set.dim())?.eval_settings();
    let mut rows = Vec::new();
    for (name, ds) in [("train", &train_set), ("test", &test_set)] {
        let e = evaluate(&ck.params, &settings, ds).context("evaluating")?;
        println!("{name} accuracy={} risk={}", e.accuracy, e.risk);
        rows.push([name.to_string(), e.accuracy.to_string(), e.risk.to_string()]);
    }
    write_csv(&out.join("eval.csv"), &["split", "accuracy", "risk"], rows).context("writing eval.csv")?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_attack(
    common: &Common,
    mode: &ModeArg,
    ckpt: &CheckpointArg,
    kind: Option<&String>,
    epsilon: Option<&String>,
    iters: Option<&String>,
    threat: Option<&String>,
    source: Option<&PathBuf>,
) -> Outcome<()> {
    let mut cfg = load_config(
        common,
        &[
            ("mode", mode.mode.as_ref()),
            ("attack.kind", kind),
            ("attack.epsilon", epsilon),
            ("attack.iterations", iters),
            ("attack.threat", threat),
        ],
    )?;
    if let Some(s) = source {
        cfg.attack.source = Some(s.clone());
    }
    let out = cfg.output_dir(common.out.as_deref());
    let ck = load_checkpoint(&checkpoint_path(ckpt, &out))?;
    let (train_set, test_set) = data_for(&cfg)?;
    check_dims(&ck.params, &train_set)?;
    let settings = eval_config(&cfg, train_set.dim())?.eval_settings();
    let attack = cfg.attack_config(&train_set)?;
    let source_params = match &cfg.attack.source {
        Some(p) => Some(load_checkpoint(p)?.params),
        None => None,
    };
    let report = evaluate_robustness(&ck.params, &settings, source_params.as_ref(), &attack, &test_set)
        .map_err(|e| match e {
            kcm_core::attack::AttackError::Config(m) => Failure::Usage(anyhow!(m)),
            other => Failure::Runtime(other.into()),
        })?;
    println!(
        "{} {} epsilon={} clean_acc={} adv_acc={} max_linf={}",
        report.threat, report.kind, report.epsilon, report.clean_acc, report.adv_acc, report.max_linf
    );
    write_csv(&out.join("attack.csv"), &REPORT_HEADER, [report.csv_row()]).context("writing attack.csv")?;
    Ok(())
}

fn run_contour(common: &Common, mode: &ModeArg, ckpt: &CheckpointArg, resolution: Option<&String>) -> Outcome<()> {
    let cfg = load_config(common, &[("mode", mode.mode.as_ref()), ("contour.resolution", resolution)])?;
    let out = cfg.output_dir(common.out.as_deref());
    let ck = load_checkpoint(&checkpoint_path(ckpt, &out))?;
    let settings = eval_config(&cfg, ck.params.input_dim())?.eval_settings();
    let grid = export_contour(&ck.params, &settings, cfg.contour_bounds, cfg.contour_resolution)
        .context("exporting contour")?;
    write_atomic(&out.join("contour.csv"), &grid.csv().context("contour csv")?).context("writing contour.csv")?;
    println!("contour nodes={}", grid.len());
    Ok(())
}

fn bias_free(params: &MlpParams) -> MlpParams {
    let layers = params
        .layers()
        .iter()
        .map(|l| Layer {
            weight: l.weight.clone(),
            bias: Tensor::zeros(l.bias.shape()),
        })
        .collect();
    MlpParams::new(layers).expect("same shapes")
}

fn run_rademacher(common: &Common, mode: &ModeArg, checkpoint: Option<&PathBuf>) -> Outcome<()> {
    let cfg = load_config(common, &[("mode", mode.mode.as_ref())])?;
    let out = cfg.output_dir(common.out.as_deref());
    let r = &cfg.rademacher;
    let (train_set, _) = data_for(&cfg)?;
    if r.n == 0 || r.n > train_set.len() {
        return Err(Failure::Usage(anyhow!(
            "rademacher.n must be in 1..={}, got {}",
            train_set.len(),
            r.n
        )));
    }
    let sample = train_set.inputs().select_rows(&(0..r.n).collect::<Vec<_>>());
    let method = match r.method {
        RademacherMethod::Auto => Method::Auto {
            draws: r.draws,
            seed: r.seed,
        },
        RademacherMethod::Exhaustive => Method::Exhaustive,
        RademacherMethod::MonteCarlo => Method::MonteCarlo {
            draws: r.draws,
            seed: r.seed,
        },
    };
    let mut rows = Vec::new();
    let plain = FunctionClassSpec {
        kind: ClassKind::LinearL2 { radius: r.radius },
        kernel: None,
    };
    let est = rademacher_class(&plain, &sample, method).context("linear class")?;
    println!("linear {} value={} stderr={}", est.kind, est.value, est.std_error);
    rows.push(est.csv_row(r.n));

    let b_x = (0..sample.rows())
        .map(|i| sample.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    if cfg.mode.uses_kernel() {
        let kcm = cfg.kcm(sample.cols())?;
        let conv = FunctionClassSpec {
            kind: ClassKind::LinearL2 { radius: r.radius },
            kernel: Some(Convolution {
                spec: kcm.spec,
                samples: kcm.n_eval,
                seed: cfg.seed.eval,
            }),
        };
        let est = rademacher_class(&conv, &sample, method).context("convolved linear class")?;
        println!("convolved-linear {} value={} stderr={}", est.kind, est.value, est.std_error);
        let mut row = est.csv_row(r.n);
        row[0] = format!("convolved-{}", row[0]);
        rows.push(row);
        let scale = kcm_scale(kcm.spec.bandwidth, gaussian_mean_norm(1.0, kcm.spec.dim), b_x)
            .context("kcm scale")?;
        println!("kcm_scale={scale}");
    }

    if let Some(path) = checkpoint {
        let ck = load_checkpoint(path)?;
        let params = bias_free(&ck.params);
        if params.output_dim() != 1 || params.input_dim() != sample.cols() {
            return Err(Failure::Runtime(anyhow!("network bound needs a single-output model on the sample's inputs")));
        }
        let budget = SpectralBudget::measured(&params).context("measuring spectral norms")?;
        let ascent = AscentConfig {
            sign_draws: r.ascent_draws,
            steps: r.ascent_steps,
            seed: r.seed,
            ..AscentConfig::default()
        };
        let lower = rademacher_mlp_lower_bound(&budget, &params.dims(), &sample, &ascent).context("ascent bound")?;
        let g = complexity_proxy_g(&params, &budget, b_x, r.n, DEFAULT_RANK_TOL).context("complexity proxy")?;
        println!(
            "network {} value={} stderr={} proxy_G={} ratio={}",
            lower.kind,
            lower.value,
            lower.std_error,
            g.value,
            if g.value > 0.0 { lower.value / g.value } else { f64::NAN }
        );
        rows.push(lower.csv_row(r.n));
        rows.push(["proxy-G".into(), r.n.to_string(), "0".into(), g.value.to_string(), "0".into()]);
    }
    write_csv(&out.join("rademacher.csv"), &CSV_HEADER, rows).context("writing rademacher.csv")?;
    Ok(())
}

fn run_sweep(common: &Common, h: Option<&String>, lambda: Option<&String>) -> Outcome<()> {
    let cfg = load_config(common, &[("sweep.h", h), ("sweep.lambda", lambda)])?;
    let out = cfg.output_dir(common.out.as_deref());
    let (train_set, test_set) = data_for(&cfg)?;
    let mut base = cfg.train_config(Mode::Erm, train_set.dim())?;
    base.kernel = Some(cfg.kcm(train_set.dim())?);
    let init = base.init_model(&cfg.hidden, &train_set).context("initializing model")?;
    let rows = sweep(&cfg.sweep_h, &cfg.sweep_lambda, &base, &init, &train_set, &test_set)
        .map_err(|e| match e {
            kcm_core::train::TrainError::Config(m) => Failure::Usage(anyhow!(m)),
            other => Failure::Runtime(other.into()),
        })?;
    for r in &rows {
        println!("h={} lambda={} {} test_acc={} test_risk={}", r.h, r.lambda, r.mode, r.test.accuracy, r.test.risk);
    }
    write_atomic(&out.join("sweep.csv"), &sweep_csv(&rows).context("sweep csv")?).context("writing sweep.csv")?;
    Ok(())
}

fn run(cli: Cli) -> Outcome<()> {
    match &cli.command {
        Command::Train { common, mode } => run_train(common, mode),
        Command::Eval { common, mode, ckpt } => run_eval(common, mode, ckpt),
        Command::Attack {
            common,
            mode,
            ckpt,
            kind,
            epsilon,
            iters,
            threat,
            source,
        } => run_attack(
            common,
            mode,
            ckpt,
            kind.as_ref(),
            epsilon.as_ref(),
            iters.as_ref(),
            threat.as_ref(),
            source.as_ref(),
        ),
        Command::Contour {
            common,
            mode,
            ckpt,
            resolution,
        } => run_contour(common, mode, ckpt, resolution.as_ref()),
        Command::Rademacher {
            common,
            mode,
            checkpoint,
        } => run_rademacher(common, mode, checkpoint.as_ref()),
        Command::Sweep { common, h, lambda } => run_sweep(common, h.as_ref(), lambda.as_ref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
