use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use robust_sysid::baseline::{default_fir_order, estimate_noise_variance};
use robust_sysid::bench::{generate_trial, parse_methods, run_monte_carlo, BenchConfig, Scenario};
use robust_sysid::em::{run_em, EmOptions, Estimate};
use robust_sysid::{Dataset, Dof, Error, Grouping, NoiseModel};

#[derive(Parser)]
#[command(name = "robust-sysid", version, about = "Robust kernel-based FIR identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a random system and write a `u,y` dataset.
    Simulate(SimulateArgs),
    /// Estimate an impulse response from a `u,y` dataset.
    Identify(IdentifyArgs),
    /// Monte Carlo comparison of estimators.
    Bench(BenchArgs),
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 30)]
    order: usize,
    #[arg(long = "N", default_value_t = 200)]
    samples: usize,
    /// Length of the stored true impulse response.
    #[arg(long = "n", default_value_t = 50)]
    n: usize,
    #[arg(long, default_value_t = 0.1)]
    outlier_prob: f64,
    /// Nominal noise variance relative to the noiseless output variance.
    #[arg(long, default_value_t = 0.1)]
    noise_fraction: f64,
    /// `mixture` or `student:<nu>`.
    #[arg(long, default_value = "mixture")]
    scenario: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
    /// JSON file for the true impulse response and generation settings.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NoiseArg {
    Gaussian,
    Laplace,
    Student,
    StudentAuto,
}

#[derive(clap::Args)]
struct IdentifyArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long = "n", default_value_t = 50)]
    n: usize,
    #[arg(long, value_enum, default_value_t = NoiseArg::StudentAuto)]
    noise: NoiseArg,
    /// Degrees of freedom for `--noise student` (`inf` allowed).
    #[arg(long)]
    nu: Option<String>,
    /// Number of contiguous noise-variance groups.
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Nominal noise variance; estimated from a long FIR fit when absent.
    #[arg(long)]
    sigma2: Option<f64>,
    /// Output JSON path; stdout when absent.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long = "N", default_value_t = 200)]
    samples: usize,
    #[arg(long = "n", default_value_t = 50)]
    n: usize,
    #[arg(long, default_value_t = 30)]
    order: usize,
    #[arg(long, default_value_t = 0.1)]
    outlier_prob: f64,
    #[arg(long, default_value_t = 0.1)]
    noise_fraction: f64,
    /// `mixture` or `student:<nu>`.
    #[arg(long, default_value = "mixture")]
    scenario: String,
    /// Comma-separated: em-s, em-l, ss-ml, em-s-fixed:<nu>, em-s-opt, em-l-p:<p>.
    #[arg(long, default_value = "em-s,em-l,ss-ml")]
    methods: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Give estimators the true nominal noise variance.
    #[arg(long)]
    known_sigma2: bool,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Worker threads (default: machine parallelism).
    #[arg(long)]
    jobs: Option<usize>,
    /// Write 0 instead of measured wall times, for byte-identical reports.
    #[arg(long)]
    no_timing: bool,
    /// Per-run CSV report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Summary JSON; stdout when absent.
    #[arg(long)]
    summary: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: if e.is_numerical() { 3 } else { 2 }, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    usage(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_failure(path, e))
}

fn write_json(path: Option<&Path>, value: &serde_json::Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    match path {
        Some(p) => {
            let mut w = create(p)?;
            writeln!(w, "{text}").and_then(|_| w.flush()).map_err(|e| io_failure(p, e))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let scenario: Scenario = args.scenario.parse()?;
    let config = BenchConfig {
        runs: 1,
        samples: args.samples,
        n: args.n,
        order: args.order,
        outlier_prob: args.outlier_prob,
        noise_fraction: args.noise_fraction,
        seed: args.seed,
        scenario,
        ..BenchConfig::default()
    };
    config.validate()?;
    let trial = generate_trial(&config, 0)?;
    let mut w = create(&args.output)?;
    trial.dataset.write_csv(&mut w)?;
    w.flush().map_err(|e| io_failure(&args.output, e))?;
    if let Some(truth) = &args.truth {
        let value = json!({
            "g": trial.g_true,
            "sigma2": trial.sigma2,
            "order": args.order,
            "N": args.samples,
            "n": args.n,
            "outlier_prob": args.outlier_prob,
            "noise_fraction": args.noise_fraction,
            "scenario": scenario.to_string(),
            "seed": args.seed,
        });
        write_json(Some(truth), &value)?;
    }
    Ok(())
}

fn estimate_json(est: &Estimate) -> serde_json::Value {
    json!({
        "g": est.g_hat,
        "lower99": est.lower99,
        "upper99": est.upper99,
        "lambda": est.theta.lambda,
        "beta": est.theta.beta,
        "tau": est.theta.noise_params(),
        "nu": est.nu,
        "sigma2": est.sigma2,
        "iterations": est.iterations(),
        "converged": est.trace.converged,
        "objective_trace": est.trace.objectives(),
    })
}

fn identify(args: IdentifyArgs) -> Result<(), Failure> {
    let dataset = Dataset::load(&args.input)?;
    if args.nu.is_some() && args.noise != NoiseArg::Student {
        return Err(usage("--nu only applies to --noise student"));
    }
    let sigma2 = match args.sigma2 {
        Some(s) => s,
        None => estimate_noise_variance(&dataset, default_fir_order(args.n, dataset.len()))?,
    };
    let model = match args.noise {
        NoiseArg::Gaussian => NoiseModel::gaussian(sigma2)?,
        NoiseArg::Laplace => NoiseModel::laplacian(sigma2)?,
        NoiseArg::StudentAuto => NoiseModel::student_auto(sigma2, Dof::default_grid())?,
        NoiseArg::Student => {
            let nu: Dof = args
                .nu
                .as_deref()
                .ok_or_else(|| usage("--noise student requires --nu"))?
                .parse()?;
            NoiseModel::student(sigma2, nu)?
        }
    };
    let grouping = args.groups.map(|p| Grouping::contiguous(dataset.len(), p)).transpose()?;
    let options = EmOptions { max_iter: args.max_iter, rel_tol: args.tol, grouping, ..EmOptions::default() };
    let est = run_em(&dataset, args.n, &model, &options)?;
    write_json(args.output.as_deref(), &estimate_json(&est))
}

fn bench(args: BenchArgs) -> Result<(), Failure> {
    if args.jobs == Some(0) {
        return Err(usage("--jobs must be >= 1"));
    }
    let config = BenchConfig {
        runs: args.runs,
        samples: args.samples,
        n: args.n,
        order: args.order,
        outlier_prob: args.outlier_prob,
        noise_fraction: args.noise_fraction,
        methods: parse_methods(&args.methods)?,
        seed: args.seed,
        scenario: args.scenario.parse()?,
        known_sigma2: args.known_sigma2,
        max_iter: args.max_iter,
        rel_tol: args.tol,
        jobs: args.jobs,
    };
    let mut report = run_monte_carlo(&config)?;
    if args.no_timing {
        report.records.iter_mut().for_each(|r| r.wall_time_s = 0.0);
    }
    if let Some(path) = &args.report {
        let mut w = create(path)?;
        report.write_csv(&mut w)?;
        w.flush().map_err(|e| io_failure(path, e))?;
    }
    for r in report.records.iter().filter(|r| r.error.is_some()) {
        eprintln!("run {} {}: {}", r.run, r.method, r.error.as_deref().unwrap_or_default());
    }
    write_json(args.summary.as_deref(), &report.summary_json())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Identify(a) => identify(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
