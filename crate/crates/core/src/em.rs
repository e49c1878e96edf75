//! EM identification of the kernel and noise hyperparameters.
//!
//! Each iteration computes the posterior at the current `θ` (E-step), then
//! updates the noise variances, `β` and `λ` in that order. The variance
//! updates are closed form per sample (or per block), `β` minimizes the
//! profiled surrogate `Q(β)` on a refined grid, and `λ` is closed form at
//! the new `β`.

use nalgebra::DVector;
use serde::Serialize;

use crate::baseline::ml_hyperparameters;
use crate::error::{Error, Result};
use crate::kernel::{self, log_det_scaled_kernel, log_w_diag, BETA_MAX, BETA_MIN};
use crate::noise::{self, q_tau, q_upsilon, select_nu, Dof, Grouping, NoiseKind, NoiseModel};
use crate::posterior::{credibility_bounds, log_prior_noise, Hyperparameters, PosteriorState};
use crate::signals::Dataset;

/// Grid used by the β update: uniform points over the β domain, then
/// `refinements` rounds of `factor`× finer grids around the incumbent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaGrid {
    pub points: usize,
    pub refinements: usize,
    pub factor: usize,
}

impl Default for BetaGrid {
    fn default() -> Self {
        BetaGrid { points: 2000, refinements: 2, factor: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub beta_grid: BetaGrid,
    pub grouping: Option<Grouping>,
    pub track_objective: bool,
    /// Re-select `ν` every this many iterations (automatic `ν` only).
    pub nu_every: usize,
    /// Keep `λ, β` at their initial values.
    pub freeze_kernel: bool,
    /// Starting point; defaults to the marginal-likelihood fit with `τ ≡ σ²`.
    pub initial: Option<Hyperparameters>,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iter: 200,
            rel_tol: 1e-3,
            beta_grid: BetaGrid::default(),
            grouping: None,
            track_objective: true,
            nu_every: 1,
            freeze_kernel: false,
            initial: None,
        }
    }
}

impl EmOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::Parameter("max_iter must be >= 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::Parameter("rel_tol must be positive".into()));
        }
        if self.beta_grid.points < 2 || self.beta_grid.factor < 2 {
            return Err(Error::Parameter("beta grid needs >= 2 points and factor >= 2".into()));
        }
        if self.nu_every == 0 {
            return Err(Error::Parameter("nu_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Tolerance,
    MaxIter,
}

/// `θ` at one iteration, as `[λ, β, τ...]` (or `[λ, β, Υ...]`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub theta: Vec<f64>,
    pub nu: Option<Dof>,
    pub objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmTrace {
    pub iterations: Vec<TraceEntry>,
    pub converged: bool,
    pub stop_reason: StopReason,
}

impl EmTrace {
    pub fn objectives(&self) -> Vec<f64> {
        self.iterations.iter().filter_map(|e| e.objective).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub g_hat: Vec<f64>,
    pub lower99: Vec<f64>,
    pub upper99: Vec<f64>,
    pub theta: Hyperparameters,
    pub sigma2: f64,
    pub nu: Option<Dof>,
    pub trace: EmTrace,
}

impl Estimate {
    /// Number of M-steps performed.
    pub fn iterations(&self) -> usize {
        self.trace.iterations.len().saturating_sub(1)
    }
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// `log Σ_i d_i / W_i`, computed in the log domain.
fn log_weighted_energy(beta: f64, d: &[f64]) -> f64 {
    let lw = log_w_diag(beta, d.len());
    log_sum_exp(d.iter().zip(&lw).filter(|(di, _)| **di > 0.0).map(|(di, l)| di.ln() - l))
}

fn check_energies(d: &[f64]) -> Result<()> {
    if d.is_empty() {
        return Err(Error::Degenerate("no differential energies".into()));
    }
    if d.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Degenerate("differential energies must be finite and >= 0".into()));
    }
    if d.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("all differential energies are zero".into()));
    }
    Ok(())
}

/// Profiled surrogate for `β`: `Q₀` minimized over `λ`, up to a constant.
///
/// `Q(β) = n log Σ_i d_i / W_i + Σ_i log W_i`
///       `= n log f(β) + n(n-1)/2 log β - log(1-β)` with
/// `f(β) = Σ_{i<n} d_i β^{1-i} + d_n (1-β) β^{1-n}`.
pub fn q_beta(beta: f64, d: &[f64]) -> Result<f64> {
    kernel::check_beta(beta)?;
    check_energies(d)?;
    Ok(q_beta_unchecked(beta, d))
}

fn q_beta_unchecked(beta: f64, d: &[f64]) -> f64 {
    let n = d.len() as f64;
    let sum_log_w = n * (n + 1.0) / 2.0 * beta.ln() + (n - 1.0) * (-beta).ln_1p();
    n * log_weighted_energy(beta, d) + sum_log_w
}

fn argmin_on(lo: f64, hi: f64, points: usize, d: &[f64]) -> f64 {
    let step = (hi - lo) / (points - 1) as f64;
    let mut best = (lo, f64::INFINITY);
    for k in 0..points {
        let b = if k + 1 == points { hi } else { lo + step * k as f64 };
        let q = q_beta_unchecked(b, d);
        if q < best.1 {
            best = (b, q);
        }
    }
    best.0
}

/// Grid minimizer of `q_beta`; ties go to the smaller `β`.
pub fn update_beta(d: &[f64], grid: &BetaGrid) -> Result<f64> {
    check_energies(d)?;
    let mut step = (BETA_MAX - BETA_MIN) / (grid.points - 1) as f64;
    let mut beta = argmin_on(BETA_MIN, BETA_MAX, grid.points, d);
    for _ in 0..grid.refinements {
        let lo = (beta - step).max(BETA_MIN);
        let hi = (beta + step).min(BETA_MAX);
        step /= grid.factor as f64;
        let points = ((hi - lo) / step).round() as usize + 1;
        beta = argmin_on(lo, hi, points.max(2), d);
    }
    Ok(beta)
}

/// `λ = (1/n) Σ_i d_i w_i` with `w = 1/W_β`.
pub fn update_lambda(d: &[f64], beta: f64) -> Result<f64> {
    kernel::check_beta(beta)?;
    check_energies(d)?;
    let lambda = (log_weighted_energy(beta, d) - (d.len() as f64).ln()).exp();
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Degenerate(format!("lambda update out of range at beta={beta}")));
    }
    Ok(lambda)
}

/// Terms of the EM surrogate at `θ` given the E-step state:
/// `Q₀(λ,β) = ĝᵀ(λK)⁻¹ĝ + log det λK + Tr((λK)⁻¹P)` and the noise terms
/// `ε_t/τ_t + log τ_t - 2 log p(τ_t)`, one per sample (or per block, with
/// `ζ_i` and block size `m`, when `θ` is grouped).
pub fn q_components(
    theta: &Hyperparameters,
    state: &PosteriorState,
    sigma2: f64,
    kind: &NoiseKind,
) -> Result<(f64, Vec<f64>)> {
    let n = state.g_hat.len();
    let params = theta.kernel(n);
    let kinv_g = kernel::apply_kernel_inverse_vec(&params, &state.g_hat)?;
    let kinv_p = kernel::apply_kernel_inverse(&params, &state.p)?;
    let q0 = state.g_hat.dot(&kinv_g) + log_det_scaled_kernel(&params) + kinv_p.trace();
    if state.eps.len() != theta.tau.len() {
        return Err(Error::shape(theta.tau.len(), state.eps.len()));
    }
    let qt = match &theta.grouping {
        None => state
            .eps
            .iter()
            .zip(&theta.tau)
            .map(|(e, t)| q_tau(*e, *t, sigma2, kind))
            .collect::<Result<Vec<_>>>()?,
        Some(g) => g
            .block_sums(&state.eps)?
            .iter()
            .zip(theta.noise_params())
            .map(|(z, u)| q_upsilon(*z, u, g.block_size(), sigma2, kind))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok((q0, qt))
}

/// `θ⁽⁰⁾ = [λ_ML, β_ML, σ², ..., σ²]`.
pub fn initialize_theta(
    dataset: &Dataset,
    sigma2: f64,
    n: usize,
    grouping: Option<&Grouping>,
) -> Result<Hyperparameters> {
    let u = dataset.regressor(n)?;
    let ml = ml_hyperparameters(&u, dataset.y(), sigma2)?;
    match grouping {
        None => Hyperparameters::new(ml.lambda, ml.beta, vec![sigma2; dataset.len()]),
        Some(g) => Hyperparameters::grouped(ml.lambda, ml.beta, &vec![sigma2; g.groups()], g.clone()),
    }
}

fn relative_change(new: &[f64], old: &[f64]) -> f64 {
    let diff: f64 = new.iter().zip(old).map(|(a, b)| (a - b).powi(2)).sum();
    let base: f64 = old.iter().map(|v| v * v).sum();
    (diff / base).sqrt()
}

fn noise_update(
    state: &PosteriorState,
    theta: &Hyperparameters,
    sigma2: f64,
    kind: &NoiseKind,
) -> Result<Vec<f64>> {
    if !kind.has_free_variances() {
        return Ok(vec![sigma2; theta.tau.len()]);
    }
    match &theta.grouping {
        None => Ok(state.eps.iter().map(|e| noise::tau_update(*e, sigma2, kind)).collect()),
        Some(g) => {
            let upsilon = g
                .block_sums(&state.eps)?
                .iter()
                .map(|z| noise::upsilon_update(*z, sigma2, g.block_size(), kind))
                .collect::<Result<Vec<_>>>()?;
            Ok(g.expand(&upsilon))
        }
    }
}

/// Runs EM from `θ⁽⁰⁾` until the relative change of `θ` drops below
/// `rel_tol` or `max_iter` M-steps have been taken. Non-convergence is
/// reported through the trace, not as an error.
pub fn run_em(dataset: &Dataset, n: usize, model: &NoiseModel, options: &EmOptions) -> Result<Estimate> {
    model.validate()?;
    options.validate()?;
    let sigma2 = model.sigma2;
    let y = dataset.y();
    let u = dataset.regressor(n)?;
    if let Some(g) = &options.grouping {
        if g.len() != y.len() {
            return Err(Error::Parameter(format!("grouping covers {} samples, data has {}", g.len(), y.len())));
        }
    }

    let mut theta = match &options.initial {
        Some(t) => {
            let mut t = t.clone();
            if t.grouping.is_none() {
                t.grouping = options.grouping.clone();
            }
            t.validate()?;
            t
        }
        None => initialize_theta(dataset, sigma2, n, options.grouping.as_ref())?,
    };
    if theta.tau.len() != y.len() {
        return Err(Error::shape(y.len(), theta.tau.len()));
    }

    let mut kind = model.kind;
    let at = |iteration: usize| move |e: Error| Error::Iteration { iteration, source: Box::new(e) };
    let mut iterations = Vec::new();
    let mut converged = false;

    for k in 0..options.max_iter {
        let state = PosteriorState::compute(&u, y, &theta).map_err(at(k))?;
        if let Some(grid) = &model.nu_grid {
            if k % options.nu_every == 0 {
                kind = NoiseKind::StudentT(select_nu(&state.residuals(y), sigma2, grid).map_err(at(k))?);
            }
        }
        let objective = if options.track_objective {
            Some(state.log_marginal + log_prior_noise(&theta, sigma2, &kind).map_err(at(k))?)
        } else {
            None
        };
        let old = theta.as_vector();
        iterations.push(TraceEntry { theta: old.clone(), nu: model.nu_grid.as_ref().map(|_| kind_nu(&kind)), objective });

        let tau = noise_update(&state, &theta, sigma2, &kind).map_err(at(k))?;
        let (lambda, beta) = if options.freeze_kernel {
            (theta.lambda, theta.beta)
        } else {
            let d = state.d.as_slice();
            let mut beta = update_beta(d, &options.beta_grid).map_err(at(k))?;
            if q_beta_unchecked(theta.beta, d) < q_beta_unchecked(beta, d) {
                beta = theta.beta;
            }
            (update_lambda(d, beta).map_err(at(k))?, beta)
        };
        theta = Hyperparameters { lambda, beta, tau, grouping: theta.grouping.clone() };
        if relative_change(&theta.as_vector(), &old) < options.rel_tol {
            converged = true;
            break;
        }
    }

    let k = iterations.len();
    let state = PosteriorState::compute(&u, y, &theta).map_err(at(k))?;
    let objective = if options.track_objective {
        Some(state.log_marginal + log_prior_noise(&theta, sigma2, &kind).map_err(at(k))?)
    } else {
        None
    };
    let nu = if model.is_auto() { Some(kind_nu(&kind)) } else { model.nu() };
    iterations.push(TraceEntry { theta: theta.as_vector(), nu: model.nu_grid.as_ref().map(|_| kind_nu(&kind)), objective });
    let (lower99, upper99) = credibility_bounds(&state.g_hat, &state.p, 0.99)?;

    Ok(Estimate {
        g_hat: state.g_hat.as_slice().to_vec(),
        lower99,
        upper99,
        theta,
        sigma2,
        nu,
        trace: EmTrace {
            iterations,
            converged,
            stop_reason: if converged { StopReason::Tolerance } else { StopReason::MaxIter },
        },
    })
}

fn kind_nu(kind: &NoiseKind) -> Dof {
    match kind {
        NoiseKind::StudentT(nu) => *nu,
        _ => Dof::Infinite,
    }
}

/// `d_i` proportional to `W_i`: the fixed point of the `λ` update.
pub fn energies_for_lambda(lambda: f64, beta: f64, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, log_w_diag(beta, n).into_iter().map(|l| lambda * l.exp()))
}
