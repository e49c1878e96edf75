//! Gaussian conditioning of the impulse response on the data.
//!
//! With `K_β = L Lᵀ`, `L = Δ⁻¹ W^{1/2}`, write `g = √λ L z` with `z ~ N(0, I)`.
//! Then with `B = U L` and `Ω = Σ_v⁻¹`,
//!
//! ```text
//! M = I + λ Bᵀ Ω B,   P = λ L M⁻¹ Lᵀ,   ĝ = λ L M⁻¹ Bᵀ Ω y,
//! log det Σ_y = Σ log τ_t + log det M,
//! yᵀ Σ_y⁻¹ y  = yᵀ Ω y - λ ‖R⁻¹ Bᵀ Ω y‖²        (M = R Rᵀ)
//! ```
//!
//! which equals `P = (Uᵀ Ω U + (λK_β)⁻¹)⁻¹` but only ever factors `M ⪰ I`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::kernel::{self, KernelParams};
use crate::noise::{log_prior_tau, Grouping, NoiseKind};

/// Kernel scale, decay rate and noise variances.
///
/// `tau` always has one entry per sample. With a grouping, samples of one
/// block share a value and the free parameters are the block values `Υ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub lambda: f64,
    pub beta: f64,
    pub tau: Vec<f64>,
    pub grouping: Option<Grouping>,
}

impl Hyperparameters {
    pub fn new(lambda: f64, beta: f64, tau: Vec<f64>) -> Result<Self> {
        let theta = Hyperparameters { lambda, beta, tau, grouping: None };
        theta.validate()?;
        Ok(theta)
    }

    pub fn grouped(lambda: f64, beta: f64, upsilon: &[f64], grouping: Grouping) -> Result<Self> {
        if upsilon.len() != grouping.groups() {
            return Err(Error::shape(grouping.groups(), upsilon.len()));
        }
        let theta = Hyperparameters {
            lambda,
            beta,
            tau: grouping.expand(upsilon),
            grouping: Some(grouping),
        };
        theta.validate()?;
        Ok(theta)
    }

    pub fn validate(&self) -> Result<()> {
        KernelParams { lambda: self.lambda, beta: self.beta, n: 1 }.validate()?;
        if self.tau.is_empty() {
            return Err(Error::Parameter("no noise variances".into()));
        }
        if let Some(t) = self.tau.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return Err(Error::Parameter(format!("noise variance must be positive, got {t}")));
        }
        if let Some(g) = &self.grouping {
            if g.len() != self.tau.len() {
                return Err(Error::shape(g.len(), self.tau.len()));
            }
        }
        Ok(())
    }

    pub fn kernel(&self, n: usize) -> KernelParams {
        KernelParams { lambda: self.lambda, beta: self.beta, n }
    }

    /// The free noise variances: `τ` per sample, or `Υ` per block.
    pub fn noise_params(&self) -> Vec<f64> {
        match &self.grouping {
            None => self.tau.clone(),
            Some(g) => g.blocks().iter().map(|b| self.tau[b[0]]).collect(),
        }
    }

    /// `[λ, β, τ...]` (or `[λ, β, Υ...]`), the vector tracked for convergence.
    pub fn as_vector(&self) -> Vec<f64> {
        let mut v = vec![self.lambda, self.beta];
        v.extend(self.noise_params());
        v
    }

    pub fn min_tau(&self) -> f64 {
        self.tau.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// Cholesky with diagonal jitter `c·(trace/n)·I`, `c` escalating ×10 from
/// 1e-10 to 1e-4. Returns the factor and the jitter that was added.
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, f64)> {
    if let Some(ch) = Cholesky::new(m.clone()) {
        return Some((ch, 0.0));
    }
    let n = m.nrows().max(1);
    let scale = (m.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut c = JITTER_START;
    while c <= JITTER_MAX * (1.0 + 1e-12) {
        let jitter = c * scale;
        let mut shifted = m.clone();
        for i in 0..m.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(shifted) {
            return Some((ch, jitter));
        }
        c *= 10.0;
    }
    None
}

/// Posterior mean and covariance plus the evidence terms of the same
/// factorization.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub g_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    /// `log det Σ_y`
    pub log_det_sigma_y: f64,
    /// `yᵀ Σ_y⁻¹ y`
    pub quad_form: f64,
}

impl Posterior {
    /// `log p(y | θ)`.
    pub fn log_marginal(&self, n_samples: usize) -> f64 {
        -0.5 * (n_samples as f64 * (2.0 * std::f64::consts::PI).ln()
            + self.log_det_sigma_y
            + self.quad_form)
    }
}

fn check_dims(u: &DMatrix<f64>, y: &[f64], theta: &Hyperparameters) -> Result<()> {
    if u.nrows() != y.len() {
        return Err(Error::shape(format!("{} regressor rows", y.len()), u.nrows()));
    }
    if theta.tau.len() != y.len() {
        return Err(Error::shape(format!("{} noise variances", y.len()), theta.tau.len()));
    }
    if u.ncols() == 0 {
        return Err(Error::Parameter("regressor has no columns".into()));
    }
    Ok(())
}

/// `P = (UᵀΣ_v⁻¹U + (λK_β)⁻¹)⁻¹` and `ĝ = P UᵀΣ_v⁻¹ y`.
pub fn compute_posterior(u: &DMatrix<f64>, y: &[f64], theta: &Hyperparameters) -> Result<Posterior> {
    theta.validate()?;
    check_dims(u, y, theta)?;
    let n = u.ncols();
    let lambda = theta.lambda;
    let l = kernel::whitening_factor(theta.beta, n);
    let b = u * &l;

    // Bᵀ Ω B and Bᵀ Ω y
    let omega: Vec<f64> = theta.tau.iter().map(|t| 1.0 / t).collect();
    let mut wb = b.clone();
    for (mut row, w) in wb.row_iter_mut().zip(&omega) {
        row *= *w;
    }
    let mut m = b.transpose() * &wb * lambda;
    for i in 0..n {
        m[(i, i)] += 1.0;
    }
    let y_vec = DVector::from_column_slice(y);
    let bt_omega_y = wb.transpose() * &y_vec;

    let (chol, _) = cholesky_with_jitter(&m).ok_or(Error::Conditioning {
        lambda,
        beta: theta.beta,
        min_tau: theta.min_tau(),
    })?;
    let r = chol.l();
    let g_fac = r
        .solve_lower_triangular(&l.transpose())
        .ok_or(Error::Conditioning { lambda, beta: theta.beta, min_tau: theta.min_tau() })?;
    let c = r
        .solve_lower_triangular(&bt_omega_y)
        .ok_or(Error::Conditioning { lambda, beta: theta.beta, min_tau: theta.min_tau() })?;

    let g_hat = g_fac.transpose() * &c * lambda;
    let mut p = g_fac.transpose() * &g_fac * lambda;
    p = (&p + p.transpose()) * 0.5;

    let log_det_m = 2.0 * r.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let log_det_sigma_y = theta.tau.iter().map(|t| t.ln()).sum::<f64>() + log_det_m;
    let y_omega_y: f64 = y.iter().zip(&omega).map(|(v, w)| v * v * w).sum();
    let quad_form = y_omega_y - lambda * c.norm_squared();

    Ok(Posterior { g_hat, p, log_det_sigma_y, quad_form })
}

/// `row_t(U) P row_t(U)ᵀ` for each requested row.
pub fn row_quadratic_forms(u: &DMatrix<f64>, p: &DMatrix<f64>, rows: &[usize]) -> Result<Vec<f64>> {
    if p.nrows() != u.ncols() || p.ncols() != u.ncols() {
        return Err(Error::shape(format!("{0}x{0} covariance", u.ncols()), format!("{}x{}", p.nrows(), p.ncols())));
    }
    rows.iter()
        .map(|&t| {
            if t >= u.nrows() {
                return Err(Error::shape(format!("row < {}", u.nrows()), t));
            }
            let row = u.row(t);
            Ok((row * p).dot(&row))
        })
        .collect()
}

/// `ŷ = U ĝ` and the diagonal of `Ŝ = U P Uᵀ`.
pub fn predictor_stats(
    u: &DMatrix<f64>,
    g_hat: &DVector<f64>,
    p: &DMatrix<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if g_hat.len() != u.ncols() {
        return Err(Error::shape(u.ncols(), g_hat.len()));
    }
    let y_hat = (u * g_hat).as_slice().to_vec();
    let up = u * p;
    let s_diag = up
        .row_iter()
        .zip(u.row_iter())
        .map(|(a, b)| a.dot(&b).max(0.0))
        .collect();
    Ok((y_hat, s_diag))
}

/// `ε_t = (y_t - ŷ_t)² + s_tt`.
pub fn residual_energies(y: &[f64], y_hat: &[f64], s_diag: &[f64]) -> Result<Vec<f64>> {
    if y.len() != y_hat.len() || y.len() != s_diag.len() {
        return Err(Error::shape(y.len(), format!("{} / {}", y_hat.len(), s_diag.len())));
    }
    Ok(y.iter()
        .zip(y_hat)
        .zip(s_diag)
        .map(|((a, b), s)| (a - b).powi(2) + s)
        .collect())
}

/// Discrete derivative of the estimate and its posterior energies.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferentialEnergies {
    /// `Δ ĝ`
    pub dg_hat: DVector<f64>,
    /// diagonal of `Δ P Δᵀ`
    pub h_diag: DVector<f64>,
    /// `d_i = (Δĝ)_i² + h_ii`
    pub d: DVector<f64>,
}

pub fn differential_energies(g_hat: &DVector<f64>, p: &DMatrix<f64>) -> Result<DifferentialEnergies> {
    let n = g_hat.len();
    if p.nrows() != n || p.ncols() != n {
        return Err(Error::shape(format!("{n}x{n}"), format!("{}x{}", p.nrows(), p.ncols())));
    }
    let dg_hat = kernel::apply_delta(g_hat);
    let h_diag = DVector::from_fn(n, |i, _| {
        let h = if i + 1 < n {
            p[(i, i)] - 2.0 * p[(i, i + 1)] + p[(i + 1, i + 1)]
        } else {
            p[(i, i)]
        };
        h.max(0.0)
    });
    let d = DVector::from_fn(n, |i, _| dg_hat[i] * dg_hat[i] + h_diag[i]);
    Ok(DifferentialEnergies { dg_hat, h_diag, d })
}

/// Everything one E-step needs, computed at a fixed `θ`.
#[derive(Debug, Clone)]
pub struct PosteriorState {
    pub g_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    pub y_hat: Vec<f64>,
    pub s_diag: Vec<f64>,
    pub dg_hat: DVector<f64>,
    pub h_diag: DVector<f64>,
    pub eps: Vec<f64>,
    pub d: DVector<f64>,
    /// `log p(y | θ)`
    pub log_marginal: f64,
}

impl PosteriorState {
    pub fn compute(u: &DMatrix<f64>, y: &[f64], theta: &Hyperparameters) -> Result<Self> {
        let post = compute_posterior(u, y, theta)?;
        let (y_hat, s_diag) = predictor_stats(u, &post.g_hat, &post.p)?;
        let eps = residual_energies(y, &y_hat, &s_diag)?;
        let diff = differential_energies(&post.g_hat, &post.p)?;
        let log_marginal = post.log_marginal(y.len());
        Ok(PosteriorState {
            g_hat: post.g_hat,
            p: post.p,
            y_hat,
            s_diag,
            dg_hat: diff.dg_hat,
            h_diag: diff.h_diag,
            eps,
            d: diff.d,
            log_marginal,
        })
    }

    pub fn residuals(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.y_hat).map(|(a, b)| a - b).collect()
    }
}

/// Sum of `log p(τ)` over the free noise variances.
pub fn log_prior_noise(theta: &Hyperparameters, sigma2: f64, kind: &NoiseKind) -> Result<f64> {
    theta
        .noise_params()
        .iter()
        .map(|&t| log_prior_tau(t, sigma2, kind))
        .sum()
}

/// `log p(y | θ) + log p(θ)`, with flat priors on `λ` and `β`.
pub fn map_objective(
    theta: &Hyperparameters,
    u: &DMatrix<f64>,
    y: &[f64],
    sigma2: f64,
    kind: &NoiseKind,
) -> Result<f64> {
    let post = compute_posterior(u, y, theta)?;
    Ok(post.log_marginal(y.len()) + log_prior_noise(theta, sigma2, kind)?)
}

/// Two-sided pointwise bounds `ĝ_i ± z·sqrt(P_ii)`.
pub fn credibility_bounds(
    g_hat: &DVector<f64>,
    p: &DMatrix<f64>,
    level: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Parameter(format!("credibility level must be in (0,1), got {level}")));
    }
    if p.nrows() != g_hat.len() {
        return Err(Error::shape(g_hat.len(), p.nrows()));
    }
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let half: Vec<f64> = (0..g_hat.len()).map(|i| z * p[(i, i)].max(0.0).sqrt()).collect();
    Ok((
        g_hat.iter().zip(&half).map(|(g, h)| g - h).collect(),
        g_hat.iter().zip(&half).map(|(g, h)| g + h).collect(),
    ))
}
