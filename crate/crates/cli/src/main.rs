//! `featurefool` — train victim networks, craft universal perturbations,
//! and measure how well they fool.
//!
//! Exit codes: 0 success, 2 argument error, 3 file or format error,
//! 4 numerical failure.

mod source;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use featurefool::attack::{craft, CraftConfig, Init, SelectionPolicy, Validation};
use featurefool::baselines::{random_perturbation, uap_craft, UapConfig};
use featurefool::data::Dataset;
use featurefool::eval::{
    fooling_rate, transfer_matrix, FoolingReport, TimingReport, TransferMatrix,
};
use featurefool::io::{
    encode_perturbation, fnv1a64, load_model, load_perturbation, render_perturbation, save_model,
    save_perturbation,
};
use featurefool::nn::presets::{self, Normalization};
use featurefool::train::{accuracy, train, EpochStats, TrainConfig};
use featurefool::{gradcheck, Error, Perturbation, PerturbationMeta};
use serde::Serialize;

use source::DataSource;

#[derive(Parser, Debug, Serialize)]
#[command(
    name = "featurefool",
    version,
    about = "Data-free universal adversarial perturbations"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
struct Global {
    /// Seed for every random choice (initialisation, shuffling, noise).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for evaluation; crafting stays single-threaded.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
enum Command {
    /// Train a preset architecture and save it as an FFM1 model.
    Train(TrainArgs),
    /// Craft a universal perturbation and save it as an FFP1 file.
    Craft(CraftArgs),
    /// Fooling rate of one perturbation on one model.
    Eval(EvalArgs),
    /// Fooling rate of every perturbation on every model.
    Transfer(TransferArgs),
    /// Render a perturbation as a PNG image.
    Render(RenderArgs),
    /// Finite-difference check of the activation-loss gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long, value_parser = presets::NAMES)]
    arch: String,
    /// idx:<images>,<labels> | cifar10:<batch>,... | synth[:<classes>,<count>,<C>x<H>x<W>[,<seed>]]
    #[arg(long)]
    dataset: DataSource,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Fraction of the data held out for per-epoch accuracy.
    #[arg(long, default_value_t = 0.0)]
    eval_fraction: f64,
    #[arg(long)]
    no_shuffle: bool,
    /// Output classes (defaults to the number found in the data).
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Training-history JSON (defaults to `<out>.history.json`).
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
enum MethodArg {
    Fff,
    #[value(alias = "uap-desk")]
    Uap,
    Random,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
enum PolicyArg {
    Auto,
    AllPostReluConvs,
    ConcatPlusOuterConvs,
}

#[derive(Args, Debug, Serialize)]
struct CraftArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Fff)]
    method: MethodArg,
    #[arg(long, default_value_t = 10.0)]
    xi: f64,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 300)]
    rescale_every: usize,
    #[arg(long, default_value_t = 0.5)]
    rescale_factor: f64,
    #[arg(long, default_value_t = 3000)]
    max_iters: usize,
    /// Moving-average window of the loss-saturation rule.
    #[arg(long, default_value_t = 500)]
    window: usize,
    #[arg(long, default_value_t = 1e-3)]
    rel_tol: f64,
    #[arg(long, default_value_t = 1e-12)]
    eps_floor: f64,
    #[arg(long, value_enum, default_value_t = PolicyArg::Auto)]
    policy: PolicyArg,
    /// Explicit comma-separated layer ids, overriding --policy.
    #[arg(long, value_delimiter = ',')]
    layers: Vec<String>,
    /// Warm-start perturbation (fff only).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Held-out images for best-checkpoint selection (fff only).
    #[arg(long)]
    val_data: Option<DataSource>,
    #[arg(long, default_value_t = 1000)]
    val_count: usize,
    /// Iterations between held-out checkpoints (defaults to --rescale-every).
    #[arg(long)]
    val_every: Option<usize>,
    /// Images drawn for the uap baseline.
    #[arg(long)]
    samples: Option<usize>,
    /// Image source for the uap baseline.
    #[arg(long)]
    data: Option<DataSource>,
    #[arg(long, default_value_t = 10)]
    max_epochs: usize,
    #[arg(long, default_value_t = 50)]
    max_inner_iters: usize,
    #[arg(long, default_value_t = 0.02)]
    overshoot: f64,
    #[arg(long)]
    out: PathBuf,
    /// Trace JSON (defaults to `<out>.trace.json`).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    delta: PathBuf,
    #[arg(long)]
    data: DataSource,
    /// Evaluate only the first N images.
    #[arg(long)]
    count: Option<usize>,
    /// Clamp x + δ to [0, 255].
    #[arg(long)]
    clamp: bool,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TransferArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    models: Vec<PathBuf>,
    /// One perturbation per model, in the same order.
    #[arg(long, value_delimiter = ',', required = true)]
    deltas: Vec<PathBuf>,
    #[arg(long)]
    data: DataSource,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    clamp: bool,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct RenderArgs {
    #[arg(long)]
    delta: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    #[arg(long)]
    report: Option<PathBuf>,
}

/// A failure with its process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn numerical(message: impl Into<String>) -> Self {
        Failure {
            code: 4,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::NonFinite(_) | Error::Diverged { .. } => 4,
            Error::Shape(_) | Error::InvalidArgument(_) | Error::Network(_) => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

/// Resolved configuration echoed into every JSON output.
#[derive(Serialize)]
struct Echo<'a, A: Serialize> {
    command: &'static str,
    global: &'a Global,
    args: &'a A,
}

struct Ctx<'a> {
    global: &'a Global,
}

impl Ctx<'_> {
    fn output(&self, path: &Path) -> Outcome<PathBuf> {
        let resolved = match &self.global.out_dir {
            Some(dir) if path.is_relative() => dir.join(path),
            _ => path.to_path_buf(),
        };
        if let Some(parent) = resolved.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(resolved)
    }

    fn echo<'a, A: Serialize>(&'a self, command: &'static str, args: &'a A) -> Echo<'a, A> {
        Echo {
            command,
            global: self.global,
            args,
        }
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let text = serde_json::to_vec_pretty(value).expect("report serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn load_data(source: &DataSource, count: Option<usize>) -> Outcome<Dataset> {
    let data = source.load()?;
    Ok(match count {
        Some(n) if n < data.len() => data.head(n)?,
        _ => data,
    })
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    config: Echo<'a, TrainArgs>,
    dataset: String,
    n_train: usize,
    normalization: NormEcho,
    class_count: usize,
    model_digest: String,
    train_accuracy: f64,
    seconds: f64,
    history: Vec<EpochStats>,
}

#[derive(Serialize)]
struct NormEcho {
    mean: Vec<f64>,
    scale: f64,
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Outcome {
    let start = Instant::now();
    let seed = ctx.global.seed;
    let data = load_data(&a.dataset, None)?;
    let classes = a.classes.unwrap_or(data.class_count);
    if classes < data.class_count {
        return Err(Failure::usage(format!(
            "--classes {classes} is below the {} classes in the data",
            data.class_count
        )));
    }
    let (mean, std) = data.channel_stats();
    let norm = Normalization {
        mean,
        scale: if std > 0.0 { 1.0 / std } else { 1.0 },
    };
    let spec = presets::by_name(&a.arch, data.image_shape(), classes, &norm)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed,
        shuffle: !a.no_shuffle,
        eval_fraction: a.eval_fraction,
    };
    eprintln!(
        "training {} on {} images ({} epochs)",
        a.arch,
        data.len(),
        a.epochs
    );
    let trained = train(&spec, &data, &cfg)?;
    for h in &trained.history {
        eprintln!("epoch {:>3}  loss {:.5}", h.epoch, h.train_loss);
    }
    let out = ctx.output(&a.out)?;
    save_model(&trained.model, &out)?;
    let train_accuracy = accuracy(&trained.model, &data)?;
    let history = ctx.output(
        &a.history
            .clone()
            .unwrap_or_else(|| sibling(&a.out, "history.json")),
    )?;
    write_json(
        &history,
        &TrainOutput {
            config: ctx.echo("train", a),
            dataset: data.name.clone(),
            n_train: data.len(),
            normalization: NormEcho {
                mean: norm.mean.clone(),
                scale: norm.scale,
            },
            class_count: classes,
            model_digest: format!("{:016x}", trained.model.digest()),
            train_accuracy,
            seconds: start.elapsed().as_secs_f64(),
            history: trained.history,
        },
    )?;
    eprintln!(
        "wrote {} (train accuracy {:.4})",
        out.display(),
        train_accuracy
    );
    Ok(())
}

#[derive(Serialize)]
struct CraftOutput<'a> {
    config: Echo<'a, CraftArgs>,
    method: &'static str,
    perturbation: PerturbationMeta,
    file_digest: String,
    linf: f64,
    timing: TimingReport,
    trace: serde_json::Value,
}

fn cmd_craft(ctx: &Ctx, a: &CraftArgs) -> Outcome {
    let seed = ctx.global.seed;
    if a.method == MethodArg::Fff
        && (a.samples.is_some() || a.data.is_some())
        && a.val_data.is_none()
    {
        return Err(Failure::usage(
            "fff is data-free: --samples/--data are refused unless --val-data enables held-out checkpointing",
        ));
    }
    if a.method != MethodArg::Fff && (a.init.is_some() || a.val_data.is_some()) {
        return Err(Failure::usage(
            "--init and --val-data apply to --method fff only",
        ));
    }
    if a.method != MethodArg::Uap
        && (a.samples.is_some() || a.data.is_some())
        && a.method != MethodArg::Fff
    {
        return Err(Failure::usage(
            "--samples/--data apply to --method uap only",
        ));
    }
    let model = load_model(&a.model)?;
    let start = Instant::now();
    let (p, iterations, trace, method) = match a.method {
        MethodArg::Fff => {
            let init = match &a.init {
                Some(path) => Init::WarmStart(load_perturbation(path)?.into_delta()),
                None => Init::Random,
            };
            let validation = match &a.val_data {
                Some(src) => Some(Validation {
                    data: load_data(src, Some(a.val_count))?,
                    every: a.val_every.unwrap_or(a.rescale_every),
                }),
                None => None,
            };
            let selection = if a.layers.is_empty() {
                match a.policy {
                    PolicyArg::Auto => SelectionPolicy::Auto,
                    PolicyArg::AllPostReluConvs => SelectionPolicy::AllPostReluConvs,
                    PolicyArg::ConcatPlusOuterConvs => SelectionPolicy::ConcatPlusOuterConvs,
                }
            } else {
                SelectionPolicy::Explicit(a.layers.clone())
            };
            let mut cfg = CraftConfig {
                xi: a.xi,
                lr: a.lr,
                rescale_every: a.rescale_every,
                rescale_factor: a.rescale_factor,
                max_iters: a.max_iters,
                eps_floor: a.eps_floor,
                seed,
                init,
                selection,
                validation,
                ..CraftConfig::default()
            };
            cfg.convergence.window = a.window;
            cfg.convergence.rel_tol = a.rel_tol;
            let (p, trace) = craft(&model, &cfg)?;
            eprintln!(
                "fff: {} iterations, loss {:.5} -> {:.5}{}",
                trace.iterations,
                trace.losses.first().copied().unwrap_or(f64::NAN),
                trace.losses.last().copied().unwrap_or(f64::NAN),
                if trace.converged { " (saturated)" } else { "" }
            );
            (p, trace.iterations, serde_json::to_value(&trace), "fff")
        }
        MethodArg::Uap => {
            let Some(src) = &a.data else {
                return Err(Failure::usage("--method uap needs --data"));
            };
            let data = load_data(src, None)?;
            let cfg = UapConfig {
                xi: a.xi,
                sample_count: a.samples.unwrap_or(1000),
                max_epochs: a.max_epochs,
                max_inner_iters: a.max_inner_iters,
                overshoot: a.overshoot,
                seed,
            };
            let (p, trace) = uap_craft(&model, &data, &cfg)?;
            eprintln!(
                "uap: epoch sample-set rates {:?}, best epoch {}",
                trace.epoch_rates, trace.best_epoch
            );
            (
                p,
                trace.epoch_rates.len(),
                serde_json::to_value(&trace),
                "uap-desk",
            )
        }
        MethodArg::Random => (
            random_perturbation(model.input_shape(), a.xi, seed)?,
            1,
            Ok(serde_json::Value::Null),
            "random",
        ),
    };
    let seconds = start.elapsed().as_secs_f64();
    let out = ctx.output(&a.out)?;
    save_perturbation(&p, &out)?;
    let trace_path = ctx.output(
        &a.trace
            .clone()
            .unwrap_or_else(|| sibling(&a.out, "trace.json")),
    )?;
    write_json(
        &trace_path,
        &CraftOutput {
            config: ctx.echo("craft", a),
            method,
            perturbation: p.meta().clone(),
            file_digest: format!("{:016x}", fnv1a64(&encode_perturbation(&p))),
            linf: p.delta().linf_norm(),
            timing: TimingReport::new(seconds, iterations.max(1))?,
            trace: trace.expect("trace serializes"),
        },
    )?;
    eprintln!("wrote {} in {seconds:.2}s", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    config: Echo<'a, EvalArgs>,
    #[serde(flatten)]
    report: FoolingReport,
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Outcome {
    let model = load_model(&a.model)?;
    let delta = load_perturbation(&a.delta)?;
    let data = load_data(&a.data, a.count)?;
    let report = fooling_rate(&model, &delta, &data, a.clamp)?;
    eprintln!(
        "fooling rate {:.4} ({} of {})",
        report.fooling_rate, report.n_flipped, report.n_images
    );
    write_json(
        &ctx.output(&a.report)?,
        &EvalOutput {
            config: ctx.echo("eval", a),
            report,
        },
    )
}

#[derive(Serialize)]
struct TransferOutput<'a> {
    config: Echo<'a, TransferArgs>,
    #[serde(flatten)]
    matrix: TransferMatrix,
}

fn cmd_transfer(ctx: &Ctx, a: &TransferArgs) -> Outcome {
    if a.models.len() != a.deltas.len() {
        return Err(Failure::usage(format!(
            "{} models but {} perturbations",
            a.models.len(),
            a.deltas.len()
        )));
    }
    let models = a
        .models
        .iter()
        .map(load_model)
        .collect::<featurefool::Result<Vec<_>>>()?;
    let deltas: Vec<Perturbation> = a
        .deltas
        .iter()
        .map(load_perturbation)
        .collect::<featurefool::Result<_>>()?;
    let names: Vec<String> = a
        .models
        .iter()
        .map(|p| {
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
        .collect();
    let data = load_data(&a.data, a.count)?;
    let pairs: Vec<(String, &featurefool::nn::Model)> = names.into_iter().zip(&models).collect();
    let matrix = transfer_matrix(&pairs, &deltas, &data, a.clamp)?;
    for (name, row) in matrix.models.iter().zip(&matrix.rates) {
        let cells: Vec<String> = row.iter().map(|r| format!("{r:.4}")).collect();
        eprintln!("{name:>12}: {}", cells.join("  "));
    }
    write_json(
        &ctx.output(&a.report)?,
        &TransferOutput {
            config: ctx.echo("transfer", a),
            matrix,
        },
    )
}

fn cmd_render(ctx: &Ctx, a: &RenderArgs) -> Outcome {
    let p = load_perturbation(&a.delta)?;
    let out = ctx.output(&a.out)?;
    render_perturbation(&p, &out)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct GradcheckOutput<'a> {
    config: Echo<'a, GradcheckArgs>,
    passed: bool,
    #[serde(flatten)]
    report: gradcheck::GradcheckReport,
}

fn cmd_gradcheck(ctx: &Ctx, a: &GradcheckArgs) -> Outcome {
    let report = gradcheck::run(ctx.global.seed, a.trials)?;
    let passed = report.max_rel_error < a.tolerance;
    println!(
        "max relative error {:.3e} over {} networks",
        report.max_rel_error,
        report.trials.len()
    );
    if let Some(path) = &a.report {
        write_json(
            &ctx.output(path)?,
            &GradcheckOutput {
                config: ctx.echo("gradcheck", a),
                passed,
                report: report.clone(),
            },
        )?;
    }
    if passed {
        Ok(())
    } else {
        Err(Failure::numerical(format!(
            "relative error {:.3e} exceeds {:.1e}",
            report.max_rel_error, a.tolerance
        )))
    }
}

fn run(cli: &Cli) -> Outcome {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(format!("--threads: {e}")))?;
    }
    let ctx = Ctx {
        global: &cli.global,
    };
    match &cli.command {
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Craft(a) => cmd_craft(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Transfer(a) => cmd_transfer(&ctx, a),
        Command::Render(a) => cmd_render(&ctx, a),
        Command::Gradcheck(a) => cmd_gradcheck(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
