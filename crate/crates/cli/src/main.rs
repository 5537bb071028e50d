use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lsa_cot::experiments::{self, ExperimentConfig, ExperimentKind, ExperimentOutput, TrainJob};
use lsa_cot::train::TrainConfig;
use lsa_cot::Error;

/// Linear self-attention in-context regression experiments.
#[derive(Parser, Debug)]
#[command(name = "lsa-cot", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Test error against CoT depth for several prompt lengths and hardness levels.
    Scaling(Common),
    /// Minimal CoT depth reaching each target error, per training prompt length.
    Tradeoff(Common),
    /// Skewed training covariance tested on isotropic inputs.
    Overthink(Common),
    /// Quadratic task-selection program over four task families.
    Select(Common),
    /// Train one layer and write its loss trace.
    Train(TrainArgs),
    /// Run every property suite and report pass/fail.
    Verify(Common),
    /// Closed-form fourth moments against Monte Carlo.
    Moments(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; every random stream is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo trials per curve point.
    #[arg(long)]
    trials: Option<usize>,
    /// Output CSV path, `-` for standard output (the default).
    #[arg(long)]
    out: Option<String>,
    /// Feature dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Comma-separated prompt lengths.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    /// Test prompt length.
    #[arg(long)]
    m: Option<usize>,
    /// Largest CoT depth.
    #[arg(long)]
    k_max: Option<usize>,
    /// Task selection at d = 1000.
    #[arg(long)]
    full_scale: bool,
    /// Flip the sign of Γ in the dominance suite (negative control).
    #[arg(long)]
    inject_bug: bool,
    /// Fill the wall_ms column (makes output time-dependent).
    #[arg(long)]
    record_timing: bool,
    /// Print every summary line (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    /// JSON training job; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the basis and, with --empirical, the prompt pool.
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path for the loss trace, `-` for standard output.
    #[arg(long)]
    out: Option<String>,
    /// Feature dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Training prompt length.
    #[arg(long)]
    n: Option<usize>,
    /// Iterations (population) or epochs (empirical).
    #[arg(long)]
    iters: Option<usize>,
    /// Train on sampled prompts instead of the population loss.
    #[arg(long)]
    empirical: bool,
    /// Print the final loss and distance to the optimum.
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

enum Failure {
    Config(String),
    Checks,
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Config(msg),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn overrides(kind: ExperimentKind, c: &Common) -> ExperimentConfig {
    ExperimentConfig {
        experiment: Some(kind),
        seed: c.seed,
        d: c.d,
        n_list: c.n.clone(),
        m: c.m,
        k_max: c.k_max,
        trials: c.trials,
        full_scale: c.full_scale.then_some(true),
        inject_bug: c.inject_bug.then_some(true),
        record_timing: c.record_timing.then_some(true),
        ..Default::default()
    }
}

fn open_out(out: Option<&str>) -> Result<Box<dyn Write>, Failure> {
    match out {
        None | Some("-") => Ok(Box::new(io::stdout().lock())),
        Some(path) => fs::File::create(path)
            .map(|f| Box::new(f) as Box<dyn Write>)
            .map_err(|e| Failure::Runtime(format!("cannot create {path}: {e}"))),
    }
}

/// `results.csv` with table `tasks` becomes `results.tasks.csv`.
fn table_path(out: &str, name: &str) -> PathBuf {
    let path = Path::new(out);
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{name}.csv"))
}

fn run_experiment(kind: ExperimentKind, c: &Common) -> Result<(), Failure> {
    let base = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(file_kind) = base.experiment {
        if file_kind != kind {
            return Err(Failure::Config(format!(
                "config is for `{}` but `{}` was requested",
                file_kind.as_str(),
                kind.as_str()
            )));
        }
    }
    let settings = base.merged_with(&overrides(kind, c)).resolve()?;
    let output = experiments::run(&settings)?;
    write_output(&output, c.out.as_deref())?;
    report(kind, &output, c.verbose);
    match (kind, output.passed) {
        (ExperimentKind::Verify, Some(false)) => Err(Failure::Checks),
        _ => Ok(()),
    }
}

fn write_output(output: &ExperimentOutput, out: Option<&str>) -> Result<(), Failure> {
    let csv = output.records_csv()?;
    let mut sink = open_out(out)?;
    sink.write_all(csv.as_bytes()).map_err(|e| Failure::Runtime(e.to_string()))?;
    sink.flush().map_err(|e| Failure::Runtime(e.to_string()))?;
    if let Some(path) = out.filter(|p| *p != "-") {
        for table in &output.tables {
            let target = table_path(path, &table.name);
            fs::write(&target, &table.csv)
                .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", target.display())))?;
        }
    }
    Ok(())
}

fn report(kind: ExperimentKind, output: &ExperimentOutput, verbose: u8) {
    let status = match output.passed {
        Some(true) => "checks passed",
        Some(false) => "checks FAILED",
        None => "no checks",
    };
    eprintln!("{}: {} records, {status}", kind.as_str(), output.records.len());
    let always = kind == ExperimentKind::Verify;
    if verbose > 0 || always {
        for line in &output.summary {
            eprintln!("  {line}");
        }
    }
}

fn run_train(a: &TrainArgs) -> Result<(), Failure> {
    let mut job = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str::<TrainJob>(&text).map_err(|e| Failure::Config(e.to_string()))?
        }
        None => TrainJob {
            train: TrainConfig::population(20, 1.0, 5_000),
            empirical: false,
            covariance: None,
            d: 10,
            hardness: 1.0,
        },
    };
    if let Some(seed) = a.seed {
        job.train.seed = seed;
    }
    if let Some(d) = a.d {
        job.d = d;
    }
    if let Some(n) = a.n {
        job.train.n = n;
    }
    if let Some(iters) = a.iters {
        job.train.iters = iters;
    }
    job.empirical |= a.empirical;
    let trace = experiments::run_train(&job)?;
    let mut sink = open_out(a.out.as_deref())?;
    trace.write_csv(&mut sink)?;
    eprintln!(
        "train: {} iterations, converged={}, final loss {:.6e}",
        trace.iterations,
        trace.converged,
        trace.losses.last().copied().unwrap_or(f64::NAN)
    );
    if a.verbose > 0 {
        if let Some(d) = trace.dist_to_opt.last().filter(|d| !d.is_nan()) {
            eprintln!("  distance to closed-form optimum {d:.3e}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Scaling(c) => run_experiment(ExperimentKind::Scaling, c),
        Command::Tradeoff(c) => run_experiment(ExperimentKind::Tradeoff, c),
        Command::Overthink(c) => run_experiment(ExperimentKind::Overthink, c),
        Command::Select(c) => run_experiment(ExperimentKind::Select, c),
        Command::Verify(c) => run_experiment(ExperimentKind::Verify, c),
        Command::Moments(c) => run_experiment(ExperimentKind::Moments, c),
        Command::Train(a) => run_train(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks) => ExitCode::from(1),
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
