//! Non-robust stable-spline estimator with marginal-likelihood tuning, and
//! the long-FIR noise variance estimate.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::em::{EmTrace, Estimate, StopReason, TraceEntry};
use crate::error::{Error, Result};
use crate::kernel::{self, check_beta, BETA_MAX, BETA_MIN};
use crate::par;
use crate::posterior::{compute_posterior, credibility_bounds, Hyperparameters};
use crate::signals::{toeplitz_regressor, Dataset};

/// `min(2n, ⌊N/2⌋)`.
pub fn default_fir_order(n: usize, samples: usize) -> usize {
    (2 * n).min(samples / 2).max(1)
}

/// Residual variance of a least-squares FIR fit of order `fir_order`.
pub fn estimate_noise_variance(dataset: &Dataset, fir_order: usize) -> Result<f64> {
    let samples = dataset.len();
    if fir_order == 0 || fir_order >= samples {
        return Err(Error::Parameter(format!(
            "FIR order must satisfy 1 <= order < N = {samples}, got {fir_order}"
        )));
    }
    let u = toeplitz_regressor(dataset.u(), fir_order, samples)?;
    let y = DVector::from_column_slice(dataset.y());
    let qr = u.clone().qr();
    let r = qr.r();
    let diag_max = r.diagonal().amax();
    if !(diag_max > 0.0) || r.diagonal().iter().any(|d| d.abs() <= 1e-10 * diag_max) {
        return Err(Error::Data("FIR regressor is rank deficient".into()));
    }
    let qty = qr.q().transpose() * &y;
    let theta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Data("FIR regressor is rank deficient".into()))?;
    let resid = y - u * theta;
    Ok(resid.norm_squared() / (samples - fir_order) as f64)
}

/// `log det Σ_y + yᵀ Σ_y⁻¹ y` with `Σ_y = λ U K_β Uᵀ + σ² I`.
pub fn marginal_likelihood_objective(
    lambda: f64,
    beta: f64,
    sigma2: f64,
    u: &DMatrix<f64>,
    y: &[f64],
) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::Parameter(format!("sigma2 must be positive, got {sigma2}")));
    }
    let theta = Hyperparameters::new(lambda, beta, vec![sigma2; y.len()])?;
    let post = compute_posterior(u, y, &theta)?;
    Ok(post.log_det_sigma_y + post.quad_form)
}

/// The marginal-likelihood objective at fixed `β` as a cheap function of `λ`,
/// through the eigendecomposition of `Lᵀ Uᵀ U L`.
struct LambdaProfile {
    mu: Vec<f64>,
    c2: Vec<f64>,
    yty: f64,
    samples: f64,
    sigma2: f64,
}

impl LambdaProfile {
    fn new(beta: f64, gram: &DMatrix<f64>, uty: &DVector<f64>, yty: f64, samples: usize, sigma2: f64) -> Self {
        let l = kernel::whitening_factor(beta, gram.nrows());
        let g = l.transpose() * gram * &l;
        let b = l.transpose() * uty;
        let eig = SymmetricEigen::new((&g + g.transpose()) * 0.5);
        let c = eig.eigenvectors.transpose() * b;
        LambdaProfile {
            mu: eig.eigenvalues.iter().map(|m| m.max(0.0)).collect(),
            c2: c.iter().map(|v| v * v).collect(),
            yty,
            samples: samples as f64,
            sigma2,
        }
    }

    fn objective(&self, lambda: f64) -> f64 {
        let s2 = self.sigma2;
        let mut log_det = self.samples * s2.ln();
        let mut proj = 0.0;
        for (m, c2) in self.mu.iter().zip(&self.c2) {
            let e = 1.0 + lambda * m / s2;
            log_det += e.ln();
            proj += c2 / e;
        }
        log_det + (self.yty - lambda / s2 * proj) / s2
    }
}

/// Hyperparameters maximizing the Gaussian marginal likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlFit {
    pub lambda: f64,
    pub beta: f64,
    /// minimized `log det Σ_y + yᵀ Σ_y⁻¹ y`
    pub objective: f64,
}

const GRID: usize = 50;
const LAMBDA_DECADES: f64 = 6.0;
const ROUNDS: usize = 3;

struct MlProblem {
    gram: DMatrix<f64>,
    uty: DVector<f64>,
    yty: f64,
    samples: usize,
    sigma2: f64,
}

impl MlProblem {
    fn profile(&self, beta: f64) -> LambdaProfile {
        LambdaProfile::new(beta, &self.gram, &self.uty, self.yty, self.samples, self.sigma2)
    }
}

fn golden_section<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, iters: usize) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Reference scale for the λ search: output variance over mean input power.
fn lambda_reference(u: &DMatrix<f64>, y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var_y = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let power = u.norm_squared() / (u.nrows() * u.ncols()) as f64;
    let r = var_y / power;
    if r > 0.0 && r.is_finite() {
        r
    } else {
        1.0
    }
}

/// The coarse `log λ × β` grid that `ml_hyperparameters` starts from.
pub fn ml_search_grid(u: &DMatrix<f64>, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let center = lambda_reference(u, y).log10();
    let log_lambdas = (0..GRID)
        .map(|i| center - LAMBDA_DECADES + 2.0 * LAMBDA_DECADES * i as f64 / (GRID - 1) as f64)
        .collect();
    let betas = (0..GRID)
        .map(|i| BETA_MIN + (BETA_MAX - BETA_MIN) * i as f64 / (GRID - 1) as f64)
        .collect();
    (log_lambdas, betas)
}

/// Grid search over `(log λ, β)` followed by coordinate refinement.
pub fn ml_hyperparameters(u: &DMatrix<f64>, y: &[f64], sigma2: f64) -> Result<MlFit> {
    if u.nrows() != y.len() {
        return Err(Error::shape(y.len(), u.nrows()));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::Parameter(format!("sigma2 must be positive, got {sigma2}")));
    }
    let yv = DVector::from_column_slice(y);
    let problem = MlProblem {
        gram: u.transpose() * u,
        uty: u.transpose() * &yv,
        yty: yv.norm_squared(),
        samples: y.len(),
        sigma2,
    };
    let (log_lambdas, betas) = ml_search_grid(u, y);

    let rows = par::map_indexed(betas.len(), |j| {
        let prof = problem.profile(betas[j]);
        log_lambdas
            .iter()
            .enumerate()
            .map(|(i, ll)| (prof.objective(10f64.powf(*ll)), i))
            .fold((f64::INFINITY, 0), |best, cur| if cur.0 < best.0 { cur } else { best })
    });
    let (mut best_obj, mut best_i, mut best_j) = (f64::INFINITY, 0, 0);
    for (j, (obj, i)) in rows.into_iter().enumerate() {
        if obj < best_obj {
            (best_obj, best_i, best_j) = (obj, i, j);
        }
    }
    if !best_obj.is_finite() {
        return Err(Error::Conditioning { lambda: 10f64.powf(log_lambdas[best_i]), beta: betas[best_j], min_tau: sigma2 });
    }

    let mut log_lambda = log_lambdas[best_i];
    let mut beta = betas[best_j];
    let mut h_ll = log_lambdas[1] - log_lambdas[0];
    let mut h_b = betas[1] - betas[0];
    for _ in 0..ROUNDS {
        let prof = problem.profile(beta);
        let (ll, obj) = golden_section(|x| prof.objective(10f64.powf(x)), log_lambda - h_ll, log_lambda + h_ll, 60);
        if obj < best_obj {
            (log_lambda, best_obj) = (ll, obj);
        }
        let lambda = 10f64.powf(log_lambda);
        let lo = (beta - h_b).max(BETA_MIN);
        let hi = (beta + h_b).min(BETA_MAX);
        let (b, obj) = golden_section(|x| problem.profile(x).objective(lambda), lo, hi, 40);
        if obj < best_obj {
            (beta, best_obj) = (b, obj);
        }
        h_ll /= 2.0;
        h_b /= 2.0;
    }
    check_beta(beta)?;
    Ok(MlFit { lambda: 10f64.powf(log_lambda), beta, objective: best_obj })
}

/// Posterior mean at the marginal-likelihood hyperparameters with `τ ≡ σ²`.
pub fn fit_ss_ml(dataset: &Dataset, n: usize, sigma2: f64) -> Result<Estimate> {
    let u = dataset.regressor(n)?;
    let y = dataset.y();
    let ml = ml_hyperparameters(&u, y, sigma2)?;
    let theta = Hyperparameters::new(ml.lambda, ml.beta, vec![sigma2; y.len()])?;
    let post = compute_posterior(&u, y, &theta)?;
    let (lower99, upper99) = credibility_bounds(&post.g_hat, &post.p, 0.99)?;
    let objective = post.log_marginal(y.len());
    Ok(Estimate {
        g_hat: post.g_hat.as_slice().to_vec(),
        lower99,
        upper99,
        sigma2,
        nu: None,
        trace: EmTrace {
            iterations: vec![TraceEntry { theta: vec![ml.lambda, ml.beta], nu: None, objective: Some(objective) }],
            converged: true,
            stop_reason: StopReason::Tolerance,
        },
        theta,
    })
}
