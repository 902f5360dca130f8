//! Command-line entry point: train, evaluate, sweep the tail level,
//! generate synthetic banks, and inspect file headers.
//!
//! Exit codes: 0 success, 1 runtime failure (I/O, format, task
//! mismatch), 2 usage error (bad flags or invalid values).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tailprobe::feature_bank::{
    gen_synthetic, load_bank, read_bank_header, save_bank, BankError, FeatureBank, SyntheticLabels,
    SyntheticSpec, TaskKind,
};
use tailprobe::loss::CvarConfig;
use tailprobe::metrics::EvalReport;
use tailprobe::mlp::{read_checkpoint_header, Mlp, MlpConfig};
use tailprobe::optim::SamConfig;
use tailprobe::trainer::{evaluate, train, Seeds, TrainConfig, TrainError, Validation};

#[derive(Parser)]
#[command(
    name = "tailprobe",
    version,
    about = "Train MLP classifier heads on embedding feature banks with a CVaR tail objective"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a head on a feature bank and write an MLPC checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a bank and write a per-class report.
    Eval(EvalArgs),
    /// Train one model per tail level α and tabulate validation macro F1.
    SweepAlpha(SweepArgs),
    /// Generate a deterministic synthetic feature bank.
    GenSynthetic(GenArgs),
    /// Print header metadata of a bank or checkpoint without loading the payload.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    /// 8-way expression classification (softmax head).
    Expr,
    /// 12-unit action-unit detection (sigmoid head).
    Au,
}

#[derive(Args, Clone)]
struct HeadArgs {
    /// Task head preset: expr (8 classes) or au (12 units).
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Override the multiclass head width (expr task only).
    #[arg(long)]
    classes: Option<u16>,
    /// Override the multilabel head width (au task only).
    #[arg(long)]
    units: Option<u16>,
}

impl HeadArgs {
    fn resolve(&self) -> Result<TaskKind, CliError> {
        match (self.task, self.classes, self.units) {
            (TaskArg::Expr, classes, None) => {
                let k = classes.unwrap_or(8);
                if k < 2 {
                    return Err(CliError::Usage(format!(
                        "--classes must be at least 2, got {k}"
                    )));
                }
                Ok(TaskKind::Multiclass { classes: k })
            }
            (TaskArg::Au, None, units) => {
                let m = units.unwrap_or(12);
                if m < 1 {
                    return Err(CliError::Usage(format!(
                        "--units must be at least 1, got {m}"
                    )));
                }
                Ok(TaskKind::Multilabel { units: m })
            }
            (TaskArg::Expr, _, Some(_)) => Err(CliError::Usage(
                "--units applies to the au task; use --classes with expr".into(),
            )),
            (TaskArg::Au, Some(_), _) => Err(CliError::Usage(
                "--classes applies to the expr task; use --units with au".into(),
            )),
        }
    }
}

#[derive(Args, Clone)]
struct FitArgs {
    /// CVaR tail level α in (0, 1]; 1 trains on the plain mean loss.
    #[arg(long, default_value_t = 0.3, allow_negative_numbers = true)]
    alpha: f64,
    /// Sharpness perturbation magnitude γ; 0 disables the perturbed pass.
    #[arg(long, default_value_t = 0.05, allow_negative_numbers = true)]
    gamma: f64,
    /// Base learning rate (cosine-annealed to 0 over training).
    #[arg(long, default_value_t = 1e-3, allow_negative_numbers = true)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 32)]
    epochs: usize,
    /// Master seed; init/shuffle/dropout streams are derived from it.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Hidden layer widths as h1,h2.
    #[arg(long, default_value = "512,256", value_parser = parse_hidden)]
    hidden: (usize, usize),
    /// Dropout rate on the hidden blocks, in [0, 1).
    #[arg(long, default_value_t = 0.3, allow_negative_numbers = true)]
    dropout: f64,
}

impl FitArgs {
    fn check(&self, alpha: f64) -> Result<(), CliError> {
        if alpha.is_nan() || alpha <= 0.0 || alpha > 1.0 {
            return Err(CliError::Usage(format!(
                "--alpha must lie in (0, 1], got {alpha}"
            )));
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(CliError::Usage(format!(
                "--gamma must be nonnegative, got {}",
                self.gamma
            )));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(CliError::Usage(format!(
                "--lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size < 2 {
            return Err(CliError::Usage(format!(
                "--batch-size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.epochs < 1 {
            return Err(CliError::Usage("--epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CliError::Usage(format!(
                "--dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    fn train_config(
        &self,
        alpha: f64,
        d: usize,
        out: usize,
        validation: Validation,
    ) -> TrainConfig {
        let mut mlp = MlpConfig::new(d, self.hidden.0, self.hidden.1, out);
        mlp.dropout = self.dropout;
        TrainConfig {
            mlp,
            cvar: CvarConfig {
                alpha,
                ..CvarConfig::default()
            },
            sam: SamConfig::new(self.gamma),
            lr: self.lr,
            lr_min: 0.0,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seeds: Seeds::from_single(self.seed),
            validation,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training bank (FBNK or CSV).
    #[arg(long)]
    bank: PathBuf,
    /// Explicit validation bank (takes precedence over --val-fraction).
    #[arg(long)]
    val_bank: Option<PathBuf>,
    /// Held-out fraction of --bank used for validation.
    #[arg(long, default_value_t = 0.2, allow_negative_numbers = true)]
    val_fraction: f64,
    #[command(flatten)]
    head: HeadArgs,
    #[command(flatten)]
    fit: FitArgs,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Training-log CSV path (default: the checkpoint path with a .log.csv extension).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// MLPC checkpoint to evaluate.
    #[arg(long)]
    model: PathBuf,
    /// Evaluation bank (FBNK or CSV).
    #[arg(long)]
    bank: PathBuf,
    /// Per-class report CSV path (default: the model path with a .eval.csv extension).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Training bank (FBNK or CSV).
    #[arg(long)]
    bank: PathBuf,
    /// Explicit validation bank (takes precedence over --val-fraction).
    #[arg(long)]
    val_bank: Option<PathBuf>,
    /// Held-out fraction of --bank used for validation.
    #[arg(long, default_value_t = 0.2, allow_negative_numbers = true)]
    val_fraction: f64,
    /// Comma-separated tail levels to sweep.
    #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    alphas: String,
    #[command(flatten)]
    head: HeadArgs,
    #[command(flatten)]
    fit: FitArgs,
    /// Output CSV (`alpha,val_macro_f1`), rows in ascending α.
    #[arg(long, default_value = "alpha_sweep.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    head: HeadArgs,
    /// Feature dimension.
    #[arg(long, default_value_t = 768)]
    dims: usize,
    /// Multiclass: comma-separated per-class sample counts (defines the class count).
    #[arg(long)]
    counts: Option<String>,
    /// Multilabel: comma-separated per-unit positive rates in (0, 1).
    #[arg(long)]
    rates: Option<String>,
    /// Multilabel: number of samples to draw.
    #[arg(long)]
    samples: Option<usize>,
    /// Per-class mean separation (> 0).
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    separation: f64,
    /// Gaussian noise standard deviation (> 0).
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    noise: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output FBNK path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    /// Bank to inspect.
    #[arg(long, conflicts_with = "model")]
    bank: Option<PathBuf>,
    /// Checkpoint to inspect.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<BankError> for CliError {
    fn from(e: BankError) -> Self {
        match e {
            // Synthetic-spec validation is a usage problem, not a runtime one.
            BankError::InvalidSpec(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<tailprobe::mlp::MlpError> for CliError {
    fn from(e: tailprobe::mlp::MlpError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("io failure: {e}"))
    }
}

fn parse_hidden(s: &str) -> Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("expected two comma-separated widths, e.g. 512,256".into());
    }
    let h1: usize = parts[0].trim().parse().map_err(|e| format!("h1: {e}"))?;
    let h2: usize = parts[1].trim().parse().map_err(|e| format!("h2: {e}"))?;
    if h1 < 1 || h2 < 1 {
        return Err("hidden widths must be at least 1".into());
    }
    Ok((h1, h2))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|e| CliError::Usage(format!("bad {what} entry {p:?}: {e}")))
        })
        .collect()
}

/// Loads a bank and reconciles it with the requested head: multiclass
/// banks narrower than the head (e.g. CSV imports, which carry no class
/// count) are widened; anything else must match exactly.
fn load_bank_for(path: &Path, task: TaskKind) -> Result<FeatureBank, CliError> {
    let bank = load_bank(path)?;
    match (bank.task(), task) {
        (TaskKind::Multiclass { classes: have }, TaskKind::Multiclass { classes: want })
            if have < want =>
        {
            eprintln!(
                "note: widening {} from {have} to {want} classes",
                path.display()
            );
            Ok(bank.with_class_count(want)?)
        }
        (have, want) if have == want => Ok(bank),
        (have, want) => Err(CliError::Runtime(format!(
            "task mismatch: {} is {}, head is {}",
            path.display(),
            describe_task(have),
            describe_task(want)
        ))),
    }
}

fn describe_task(task: TaskKind) -> String {
    match task {
        TaskKind::Multiclass { classes } => format!("multiclass with {classes} classes"),
        TaskKind::Multilabel { units } => format!("multilabel with {units} units"),
    }
}

fn resolve_validation(
    val_bank: &Option<PathBuf>,
    val_fraction: f64,
    task: TaskKind,
) -> Result<Validation, CliError> {
    if let Some(path) = val_bank {
        return Ok(Validation::Bank(load_bank_for(path, task)?));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(CliError::Usage(format!(
            "--val-fraction must lie in [0, 1), got {val_fraction}"
        )));
    }
    if val_fraction == 0.0 {
        Ok(Validation::None)
    } else {
        Ok(Validation::Fraction(val_fraction))
    }
}

fn write_report(report: &EvalReport, path: &Path) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    report.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    args.fit.check(args.fit.alpha)?;
    let task = args.head.resolve()?;
    let bank = load_bank_for(&args.bank, task)?;
    let validation = resolve_validation(&args.val_bank, args.val_fraction, task)?;
    let had_validation = !matches!(validation, Validation::None);
    let config = args
        .fit
        .train_config(args.fit.alpha, bank.d(), task.width(), validation);

    let (mlp, log) = train(&bank, &config)?;
    mlp.save_checkpoint(task, &args.out)?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("log.csv"));
    let mut w = BufWriter::new(File::create(&log_path)?);
    log.write_csv(&mut w)?;
    w.flush()?;

    let macro_f1 = match log.best_val_macro_f1 {
        Some(f1) => f1,
        None => evaluate(&mlp, task, &bank)?.macro_f1,
    };
    if !had_validation {
        eprintln!("note: no validation configured; macro_f1 is measured on the training bank");
    }
    println!("macro_f1={macro_f1}");
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let (mlp, task) = Mlp::load_checkpoint(&args.model)?;
    let bank = load_bank_for(&args.bank, task)?;
    let report = evaluate(&mlp, task, &bank)?;
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.model.with_extension("eval.csv"));
    write_report(&report, &report_path)?;
    println!("macro_f1={}", report.macro_f1);
    Ok(())
}

fn cmd_sweep_alpha(args: SweepArgs) -> Result<(), CliError> {
    args.fit.check(args.fit.alpha)?;
    let mut alphas: Vec<f64> = parse_list(&args.alphas, "--alphas")?;
    for &a in &alphas {
        if a.is_nan() || a <= 0.0 || a > 1.0 {
            return Err(CliError::Usage(format!(
                "--alphas entries must lie in (0, 1], got {a}"
            )));
        }
    }
    alphas.sort_by(|a, b| a.partial_cmp(b).expect("alphas are finite"));
    let before = alphas.len();
    alphas.dedup();
    if alphas.len() < before {
        eprintln!("warning: duplicate alpha values removed from --alphas");
    }

    let task = args.head.resolve()?;
    let bank = load_bank_for(&args.bank, task)?;
    let validation = resolve_validation(&args.val_bank, args.val_fraction, task)?;
    if matches!(validation, Validation::None) {
        return Err(CliError::Usage(
            "sweep-alpha needs a validation source: pass --val-bank or a nonzero --val-fraction"
                .into(),
        ));
    }

    let mut rows: Vec<(f64, f64)> = Vec::with_capacity(alphas.len());
    for &alpha in &alphas {
        let config = args
            .fit
            .train_config(alpha, bank.d(), task.width(), validation.clone());
        let (_, log) = train(&bank, &config)?;
        let f1 = log
            .best_val_macro_f1
            .expect("validation configured for every sweep run");
        rows.push((alpha, f1));
    }

    let mut w = BufWriter::new(File::create(&args.out)?);
    writeln!(w, "alpha,val_macro_f1")?;
    for (alpha, f1) in &rows {
        writeln!(w, "{alpha},{f1}")?;
    }
    w.flush()?;

    let mut ranked = rows.clone();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("scores are finite"));
    println!("rank,alpha,val_macro_f1");
    for (i, (alpha, f1)) in ranked.iter().enumerate() {
        println!("{},{alpha},{f1}", i + 1);
    }
    Ok(())
}

fn cmd_gen_synthetic(args: GenArgs) -> Result<(), CliError> {
    let task = args.head.resolve()?;
    let labels = match task {
        TaskKind::Multiclass { classes } => {
            let counts = args
                .counts
                .as_deref()
                .ok_or_else(|| CliError::Usage("multiclass synthesis needs --counts".into()))?;
            if args.rates.is_some() || args.samples.is_some() {
                return Err(CliError::Usage(
                    "--rates/--samples apply to the au task".into(),
                ));
            }
            let counts: Vec<usize> = parse_list(counts, "--counts")?;
            // The counts list defines the class count; an explicit
            // --classes must agree with it.
            if args.head.classes.is_some() && counts.len() != classes as usize {
                return Err(CliError::Usage(format!(
                    "--classes {classes} disagrees with {} --counts entries",
                    counts.len()
                )));
            }
            SyntheticLabels::ClassCounts(counts)
        }
        TaskKind::Multilabel { units } => {
            let rates = args
                .rates
                .as_deref()
                .ok_or_else(|| CliError::Usage("multilabel synthesis needs --rates".into()))?;
            let samples = args
                .samples
                .ok_or_else(|| CliError::Usage("multilabel synthesis needs --samples".into()))?;
            if args.counts.is_some() {
                return Err(CliError::Usage("--counts applies to the expr task".into()));
            }
            let rates: Vec<f64> = parse_list(rates, "--rates")?;
            // The rates list defines the unit count; an explicit --units
            // must agree with it.
            if args.head.units.is_some() && rates.len() != units as usize {
                return Err(CliError::Usage(format!(
                    "--units {units} disagrees with {} --rates entries",
                    rates.len()
                )));
            }
            SyntheticLabels::UnitRates { samples, rates }
        }
    };
    let spec = SyntheticSpec {
        dim: args.dims,
        labels,
        separation: args.separation,
        noise: args.noise,
        seed: args.seed,
    };
    let bank = gen_synthetic(&spec)?;
    save_bank(&bank, &args.out)?;
    println!(
        "wrote {} ({} samples, {} dims, {})",
        args.out.display(),
        bank.n(),
        bank.d(),
        describe_task(bank.task())
    );
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), CliError> {
    match (args.bank, args.model) {
        (Some(path), None) => {
            let (task, n, d) = read_bank_header(&path)?;
            println!(
                "bank {} task={} n={n} d={d}",
                path.display(),
                describe_task(task).replace(' ', "-")
            );
            Ok(())
        }
        (None, Some(path)) => {
            let (config, task) = read_checkpoint_header(&path)?;
            println!(
                "checkpoint {} task={} d={} h1={} h2={} out={} dropout={}",
                path.display(),
                describe_task(task).replace(' ', "-"),
                config.input_dim,
                config.hidden1,
                config.hidden2,
                config.output_dim,
                config.dropout
            );
            Ok(())
        }
        _ => Err(CliError::Usage(
            "inspect needs exactly one of --bank or --model".into(),
        )),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::SweepAlpha(args) => cmd_sweep_alpha(args),
        Command::GenSynthetic(args) => cmd_gen_synthetic(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
