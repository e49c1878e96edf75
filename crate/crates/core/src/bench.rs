//! Monte Carlo comparison of the estimators on random systems.
//!
//! Every run draws its system, input and noise from streams keyed by
//! `(seed, run)`, so a report is identical whatever the worker count.
//! Wall times are the only non-reproducible field.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::baseline::{default_fir_order, estimate_noise_variance, fit_ss_ml};
use crate::em::{run_em, EmOptions, Estimate};
use crate::error::{Error, Result};
use crate::noise::{sample_noise_with, Dof, Grouping, NoiseModel};
use crate::par;
use crate::posterior::Hyperparameters;
use crate::rng::{run_stream, tag};
use crate::signals::{convolve, sample_outlier_noise_with, white_input, Dataset, RationalSystem};

/// `1 - ‖g - ĝ‖ / ‖g‖`.
pub fn fit_score(g_true: &[f64], g_hat: &[f64]) -> Result<f64> {
    if g_true.len() != g_hat.len() {
        return Err(Error::shape(g_true.len(), g_hat.len()));
    }
    let norm = g_true.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Parameter("true impulse response is zero".into()));
    }
    let err = g_true.iter().zip(g_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(1.0 - err / norm)
}

/// `1 - ‖y - ŷ‖ / ‖y - mean(y)‖`.
pub fn prediction_fit(y_test: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_test.len() != y_pred.len() {
        return Err(Error::shape(y_test.len(), y_pred.len()));
    }
    let mean = y_test.iter().sum::<f64>() / y_test.len() as f64;
    let spread = y_test.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
    if !(spread > 0.0) {
        return Err(Error::Parameter("test output is constant".into()));
    }
    let err = y_test.iter().zip(y_pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(1.0 - err / spread)
}

/// Estimators compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Laplacian noise model.
    EmL,
    /// Student's t with `ν` selected from the default grid.
    EmS,
    /// Student's t with fixed `ν`.
    EmSFixed(Dof),
    /// Best-FIT `ν` over the default grid. Uses the true response.
    EmSOpt,
    /// Laplacian with `p` grouped noise variances.
    EmLGrouped(usize),
    /// Gaussian noise, marginal-likelihood hyperparameters.
    SsMl,
}

impl Method {
    pub fn is_oracle(&self) -> bool {
        matches!(self, Method::EmSOpt)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::EmL => f.write_str("em-l"),
            Method::EmS => f.write_str("em-s"),
            Method::EmSFixed(nu) => write!(f, "em-s-fixed:{nu}"),
            Method::EmSOpt => f.write_str("em-s-opt"),
            Method::EmLGrouped(p) => write!(f, "em-l-p:{p}"),
            Method::SsMl => f.write_str("ss-ml"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let unknown = || Error::Parameter(format!("unknown method `{s}`"));
        match s.as_str() {
            "em-l" => Ok(Method::EmL),
            "em-s" => Ok(Method::EmS),
            "em-s-opt" => Ok(Method::EmSOpt),
            "ss-ml" => Ok(Method::SsMl),
            other => {
                if let Some(nu) = other.strip_prefix("em-s-fixed:") {
                    let nu: Dof = nu.parse()?;
                    if let Dof::Finite(v) = nu {
                        if v <= 2.0 {
                            return Err(Error::Parameter(format!("nu must exceed 2, got {v}")));
                        }
                    }
                    Ok(Method::EmSFixed(nu))
                } else if let Some(p) = other.strip_prefix("em-l-p:") {
                    p.parse::<usize>()
                        .ok()
                        .filter(|p| *p > 0)
                        .map(Method::EmLGrouped)
                        .ok_or_else(unknown)
                } else {
                    Err(unknown())
                }
            }
        }
    }
}

/// Comma-separated list of method names.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let methods = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<_>>>()?;
    if methods.is_empty() {
        return Err(Error::Parameter("no methods given".into()));
    }
    Ok(methods)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scenario {
    /// `(1-c) N(0, σ²) + c N(0, 100σ²)`.
    OutlierMixture,
    /// Student's t noise with variance `σ²`.
    Student(Dof),
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "mixture" {
            return Ok(Scenario::OutlierMixture);
        }
        match s.strip_prefix("student:") {
            Some(nu) => Ok(Scenario::Student(nu.parse()?)),
            None => Err(Error::Parameter(format!("unknown scenario `{s}`"))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::OutlierMixture => f.write_str("mixture"),
            Scenario::Student(nu) => write!(f, "student:{nu}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub runs: usize,
    pub samples: usize,
    pub n: usize,
    pub order: usize,
    /// Outlier probability of the mixture scenario.
    pub outlier_prob: f64,
    /// Nominal noise variance as a fraction of the noiseless output variance.
    pub noise_fraction: f64,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub scenario: Scenario,
    /// Give estimators the nominal `σ²` instead of the long-FIR estimate.
    pub known_sigma2: bool,
    pub max_iter: usize,
    pub rel_tol: f64,
    /// Worker threads; `None` uses the machine's parallelism.
    pub jobs: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            runs: 100,
            samples: 200,
            n: 50,
            order: 30,
            outlier_prob: 0.1,
            noise_fraction: 0.1,
            methods: vec![Method::EmL, Method::EmS, Method::SsMl],
            seed: 0,
            scenario: Scenario::OutlierMixture,
            known_sigma2: false,
            max_iter: 200,
            rel_tol: 1e-3,
            jobs: None,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Parameter("runs must be >= 1".into()));
        }
        if self.samples == 0 || self.n == 0 || self.order == 0 {
            return Err(Error::Parameter("N, n and order must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.outlier_prob) {
            return Err(Error::Parameter("outlier probability must lie in [0,1]".into()));
        }
        if !(self.noise_fraction > 0.0) {
            return Err(Error::Parameter("noise fraction must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Parameter("no methods selected".into()));
        }
        for m in &self.methods {
            if let Method::EmLGrouped(p) = m {
                if !self.samples.is_multiple_of(*p) {
                    return Err(Error::Parameter(format!("{m}: N={} is not divisible by {p}", self.samples)));
                }
            }
        }
        if let Scenario::Student(Dof::Finite(v)) = self.scenario {
            if v <= 2.0 {
                return Err(Error::Parameter("student scenario needs nu > 2".into()));
            }
        }
        Ok(())
    }
}

/// One simulated identification problem.
#[derive(Debug, Clone)]
pub struct Trial {
    pub dataset: Dataset,
    /// True response truncated to the estimated length.
    pub g_true: Vec<f64>,
    /// Nominal noise variance used for generation.
    pub sigma2: f64,
}

/// Generates run `run` of `config`.
pub fn generate_trial(config: &BenchConfig, run: usize) -> Result<Trial> {
    let r = run as u64;
    let system = RationalSystem::random(config.order, &mut run_stream(config.seed, r, tag::SYSTEM))?;
    let g_long = system.impulse_response(config.samples.max(config.n));
    let u = white_input(config.samples, &mut run_stream(config.seed, r, tag::INPUT));
    let clean = convolve(g_long.as_slice(), &u);
    let mean = clean.iter().sum::<f64>() / clean.len() as f64;
    let var = clean.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / clean.len() as f64;
    let sigma2 = config.noise_fraction * var;
    let noise = match config.scenario {
        Scenario::OutlierMixture => sample_outlier_noise_with(
            sigma2,
            config.outlier_prob,
            config.samples,
            &mut run_stream(config.seed, r, tag::MIXTURE),
        )?,
        Scenario::Student(nu) => sample_noise_with(
            &NoiseModel::student(sigma2, nu)?,
            config.samples,
            &mut run_stream(config.seed, r, tag::NOISE),
        )?,
    };
    let y = clean.iter().zip(&noise).map(|(a, b)| a + b).collect();
    Ok(Trial {
        dataset: Dataset::new(u, y)?,
        g_true: g_long.truncated(config.n).0,
        sigma2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub run: usize,
    pub method: String,
    /// NaN when the estimator failed on this run.
    pub fit: f64,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub mean: f64,
    pub median: f64,
    pub ci95_halfwidth: f64,
    pub runs: usize,
    pub failures: usize,
    pub oracle: bool,
}

/// One-tailed paired t-test of `a > b`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedComparison {
    pub a: String,
    pub b: String,
    pub mean_diff: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub methods: Vec<(String, MethodSummary)>,
    pub pairwise: Vec<PairedComparison>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub records: Vec<RunRecord>,
    pub summary: Summary,
}

impl FitReport {
    pub fn fits(&self, method: &str) -> Vec<f64> {
        self.records.iter().filter(|r| r.method == method).map(|r| r.fit).collect()
    }

    pub fn method(&self, method: &str) -> Option<&MethodSummary> {
        self.summary.methods.iter().find(|(m, _)| m == method).map(|(_, s)| s)
    }

    pub fn comparison(&self, a: &str, b: &str) -> Option<&PairedComparison> {
        self.summary.pairwise.iter().find(|c| c.a == a && c.b == b)
    }

    /// `run,method,fit,iterations,wall_time_s`
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let io = |e: csv::Error| Error::Data(format!("report write: {e}"));
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["run", "method", "fit", "iterations", "wall_time_s"]).map_err(io)?;
        for r in &self.records {
            wtr.write_record([
                r.run.to_string(),
                r.method.clone(),
                r.fit.to_string(),
                r.iterations.to_string(),
                r.wall_time_s.to_string(),
            ])
            .map_err(io)?;
        }
        wtr.flush().map_err(|e| Error::Data(format!("report write: {e}")))?;
        Ok(())
    }

    /// Summary JSON: per-method statistics and, with two or more methods,
    /// the pairwise tests.
    pub fn summary_json(&self) -> serde_json::Value {
        let methods: serde_json::Map<String, serde_json::Value> = self
            .summary
            .methods
            .iter()
            .map(|(m, s)| (m.clone(), serde_json::to_value(s).expect("plain struct")))
            .collect();
        let mut root = serde_json::Map::new();
        root.insert("methods".into(), methods.into());
        if !self.summary.pairwise.is_empty() {
            root.insert(
                "pairwise".into(),
                serde_json::to_value(&self.summary.pairwise).expect("plain struct"),
            );
        }
        root.into()
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Mean, median and 95% t-interval half-width of the finite fits.
pub fn summarize(fits: &[f64], oracle: bool) -> MethodSummary {
    let mut ok: Vec<f64> = fits.iter().copied().filter(|f| f.is_finite()).collect();
    ok.sort_by(f64::total_cmp);
    let (mean, sd) = if ok.is_empty() { (f64::NAN, f64::NAN) } else { mean_sd(&ok) };
    let ci95_halfwidth = if ok.len() > 1 {
        let t = StudentsT::new(0.0, 1.0, (ok.len() - 1) as f64).expect("dof >= 1");
        t.inverse_cdf(0.975) * sd / (ok.len() as f64).sqrt()
    } else {
        0.0
    };
    MethodSummary {
        mean,
        median: median(&ok),
        ci95_halfwidth,
        runs: ok.len(),
        failures: fits.len() - ok.len(),
        oracle,
    }
}

/// Paired one-tailed t-test of `mean(a - b) > 0` over runs where both are finite.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> (f64, f64, f64, usize) {
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(x, y)| x - y)
        .collect();
    if diffs.len() < 2 {
        return (f64::NAN, f64::NAN, f64::NAN, diffs.len());
    }
    let (mean, sd) = mean_sd(&diffs);
    let n = diffs.len() as f64;
    if sd == 0.0 {
        let (t, p) = if mean > 0.0 {
            (f64::INFINITY, 0.0)
        } else if mean < 0.0 {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (0.0, 0.5)
        };
        return (mean, t, p, diffs.len());
    }
    let t = mean / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("dof >= 1");
    (mean, t, dist.sf(t), diffs.len())
}

struct MethodOutcome {
    fit: Result<f64>,
    iterations: usize,
    seconds: f64,
}

fn em_options(config: &BenchConfig, initial: &Hyperparameters, grouping: Option<Grouping>) -> EmOptions {
    let initial = match &grouping {
        Some(g) => {
            let ups = vec![initial.tau[0]; g.groups()];
            Hyperparameters::grouped(initial.lambda, initial.beta, &ups, g.clone()).ok()
        }
        None => Some(initial.clone()),
    };
    EmOptions {
        max_iter: config.max_iter,
        rel_tol: config.rel_tol,
        grouping,
        track_objective: false,
        initial,
        ..EmOptions::default()
    }
}

fn run_method(
    method: Method,
    config: &BenchConfig,
    trial: &Trial,
    sigma2: f64,
    ml: &Result<(Estimate, f64)>,
) -> MethodOutcome {
    let (ml_est, ml_secs) = match ml {
        Ok((e, s)) => (e, *s),
        Err(e) => return MethodOutcome { fit: Err(e.clone()), iterations: 0, seconds: 0.0 },
    };
    let start = Instant::now();
    let em = |model: Result<NoiseModel>, grouping: Option<Grouping>| -> Result<Estimate> {
        run_em(&trial.dataset, config.n, &model?, &em_options(config, &ml_est.theta, grouping))
    };
    let outcome: Result<(f64, usize)> = (|| match method {
        Method::SsMl => Ok((fit_score(&trial.g_true, &ml_est.g_hat)?, 0)),
        Method::EmL => {
            let e = em(NoiseModel::laplacian(sigma2), None)?;
            Ok((fit_score(&trial.g_true, &e.g_hat)?, e.iterations()))
        }
        Method::EmS => {
            let e = em(NoiseModel::student_auto(sigma2, Dof::default_grid()), None)?;
            Ok((fit_score(&trial.g_true, &e.g_hat)?, e.iterations()))
        }
        Method::EmSFixed(nu) => {
            let e = em(NoiseModel::student(sigma2, nu), None)?;
            Ok((fit_score(&trial.g_true, &e.g_hat)?, e.iterations()))
        }
        Method::EmLGrouped(p) => {
            let grouping = Grouping::contiguous(trial.dataset.len(), p)?;
            let e = em(NoiseModel::laplacian(sigma2), Some(grouping))?;
            Ok((fit_score(&trial.g_true, &e.g_hat)?, e.iterations()))
        }
        Method::EmSOpt => {
            let mut best: Option<(f64, usize)> = None;
            for nu in Dof::DEFAULT_GRID {
                let e = em(NoiseModel::student(sigma2, nu), None)?;
                let fit = fit_score(&trial.g_true, &e.g_hat)?;
                if best.is_none_or(|(b, _)| fit > b) {
                    best = Some((fit, e.iterations()));
                }
            }
            Ok(best.expect("grid is nonempty"))
        }
    })();
    let seconds = start.elapsed().as_secs_f64() + ml_secs;
    match outcome {
        Ok((fit, iterations)) => MethodOutcome { fit: Ok(fit), iterations, seconds },
        Err(e) => MethodOutcome { fit: Err(e), iterations: 0, seconds },
    }
}

fn run_one(config: &BenchConfig, run: usize) -> Vec<RunRecord> {
    let trial = generate_trial(config, run);
    let trial = match trial {
        Ok(t) => t,
        Err(e) => {
            return config
                .methods
                .iter()
                .map(|m| RunRecord {
                    run,
                    method: m.to_string(),
                    fit: f64::NAN,
                    iterations: 0,
                    wall_time_s: 0.0,
                    error: Some(e.to_string()),
                })
                .collect()
        }
    };
    let sigma2 = if config.known_sigma2 {
        Ok(trial.sigma2)
    } else {
        estimate_noise_variance(&trial.dataset, default_fir_order(config.n, config.samples))
    };
    let ml = sigma2.clone().and_then(|s2| {
        let start = Instant::now();
        let est = fit_ss_ml(&trial.dataset, config.n, s2)?;
        Ok((est, start.elapsed().as_secs_f64()))
    });
    config
        .methods
        .iter()
        .map(|&m| {
            let out = run_method(m, config, &trial, *sigma2.as_ref().unwrap_or(&f64::NAN), &ml);
            let (fit, error) = match out.fit {
                Ok(f) => (f, None),
                Err(e) => (f64::NAN, Some(e.to_string())),
            };
            RunRecord { run, method: m.to_string(), fit, iterations: out.iterations, wall_time_s: out.seconds, error }
        })
        .collect()
}

/// Runs every method on `config.runs` independent trials.
pub fn run_monte_carlo(config: &BenchConfig) -> Result<FitReport> {
    config.validate()?;
    let per_run = par::with_jobs(config.jobs, || par::map_indexed(config.runs, |r| run_one(config, r)));
    let records: Vec<RunRecord> = per_run.into_iter().flatten().collect();

    let names: Vec<String> = config.methods.iter().map(Method::to_string).collect();
    let fits_of = |name: &str| -> Vec<f64> {
        records.iter().filter(|r| r.method == name).map(|r| r.fit).collect()
    };
    let methods = config
        .methods
        .iter()
        .zip(&names)
        .map(|(m, name)| (name.clone(), summarize(&fits_of(name), m.is_oracle())))
        .collect();
    let mut pairwise = Vec::new();
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            let (mean_diff, t_stat, p_value, pairs) = paired_t_test(&fits_of(&names[i]), &fits_of(&names[j]));
            pairwise.push(PairedComparison {
                a: names[i].clone(),
                b: names[j].clone(),
                mean_diff,
                t_stat,
                p_value,
                pairs,
            });
        }
    }
    Ok(FitReport { records, summary: Summary { methods, pairwise } })
}
