//! First-order stable spline (TC) kernel.
//!
//! `K[i,j] = β^max(i,j)` (1-based) factors as `K = Δ⁻¹ W Δ⁻ᵀ`, where `Δ` is
//! the upper-bidiagonal differencing matrix and `W` is diagonal with
//! `W_i = (1-β)β^i` for `i < n` and `W_n = β^n`. Every inverse or
//! determinant of the kernel goes through that factorization.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Smallest admissible decay rate.
pub const BETA_MIN: f64 = 1e-4;
/// Largest admissible decay rate.
pub const BETA_MAX: f64 = 0.9999;

/// Scale, decay rate and length of the prior `λ K_β`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub lambda: f64,
    pub beta: f64,
    pub n: usize,
}

impl KernelParams {
    pub fn new(lambda: f64, beta: f64, n: usize) -> Result<Self> {
        let params = KernelParams { lambda, beta, n };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Parameter(format!(
                "lambda must be positive and finite, got {}",
                self.lambda
            )));
        }
        check_beta(self.beta)?;
        if self.n == 0 {
            return Err(Error::Parameter("impulse response length must be >= 1".into()));
        }
        Ok(())
    }
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if !(BETA_MIN..=BETA_MAX).contains(&beta) {
        return Err(Error::Parameter(format!(
            "beta must lie in [{BETA_MIN}, {BETA_MAX}], got {beta}"
        )));
    }
    Ok(())
}

#[inline]
fn pow(beta: f64, k: f64) -> f64 {
    (k * beta.ln()).exp()
}

/// The unscaled kernel `K_β`.
pub fn build_kernel(params: &KernelParams) -> Result<DMatrix<f64>> {
    params.validate()?;
    let n = params.n;
    Ok(DMatrix::from_fn(n, n, |i, j| pow(params.beta, (i.max(j) + 1) as f64)))
}

/// `Δ` and the diagonal of `W_β`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFactors {
    pub w_diag: DVector<f64>,
}

impl KernelFactors {
    pub fn n(&self) -> usize {
        self.w_diag.len()
    }

    /// Upper-bidiagonal differencing matrix: 1 on the diagonal, -1 above it.
    pub fn delta(&self) -> DMatrix<f64> {
        delta_matrix(self.n())
    }

    /// `Δ⁻¹ diag(w) Δ⁻ᵀ`, computed by suffix sums.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut suffix = vec![0.0; n + 1];
        for i in (0..n).rev() {
            suffix[i] = suffix[i + 1] + self.w_diag[i];
        }
        DMatrix::from_fn(n, n, |i, j| suffix[i.max(j)])
    }
}

pub fn delta_matrix(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else if j == i + 1 {
            -1.0
        } else {
            0.0
        }
    })
}

/// `Δ x`: `x_i - x_{i+1}`, with the last entry kept as is.
pub fn apply_delta(x: &DVector<f64>) -> DVector<f64> {
    let n = x.len();
    DVector::from_fn(n, |i, _| if i + 1 < n { x[i] - x[i + 1] } else { x[i] })
}

pub fn kernel_factors(params: &KernelParams) -> Result<KernelFactors> {
    params.validate()?;
    Ok(KernelFactors {
        w_diag: DVector::from_iterator(
            params.n,
            log_w_diag(params.beta, params.n).into_iter().map(f64::exp),
        ),
    })
}

/// `log W_i`, exact in the log domain for any `n`.
pub fn log_w_diag(beta: f64, n: usize) -> Vec<f64> {
    let lb = beta.ln();
    let l1b = (-beta).ln_1p();
    (1..=n)
        .map(|i| {
            let base = i as f64 * lb;
            if i < n {
                base + l1b
            } else {
                base
            }
        })
        .collect()
}

/// `w_β = 1 / W_β` elementwise: the weights of the closed-form λ update.
pub fn weight_vector(params: &KernelParams) -> Result<DVector<f64>> {
    params.validate()?;
    Ok(DVector::from_iterator(
        params.n,
        log_w_diag(params.beta, params.n).into_iter().map(|l| (-l).exp()),
    ))
}

/// `log det(λ K_β) = n log λ + Σ log W_i` (det Δ = 1).
pub fn log_det_scaled_kernel(params: &KernelParams) -> f64 {
    params.n as f64 * params.lambda.ln() + log_w_diag(params.beta, params.n).iter().sum::<f64>()
}

/// `(λ K_β)⁻¹ X = Δᵀ W⁻¹ Δ X / λ`, column by column.
pub fn apply_kernel_inverse(params: &KernelParams, operand: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    params.validate()?;
    let n = params.n;
    if operand.nrows() != n {
        return Err(Error::shape(format!("{n} rows"), format!("{} rows", operand.nrows())));
    }
    let w = weight_vector(params)?;
    let mut out = DMatrix::zeros(n, operand.ncols());
    for (c, col) in operand.column_iter().enumerate() {
        // y = W⁻¹ Δ x / λ
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let dx = if i + 1 < n { col[i] - col[i + 1] } else { col[i] };
                dx * w[i] / params.lambda
            })
            .collect();
        // Δᵀ y
        for i in 0..n {
            out[(i, c)] = if i == 0 { y[0] } else { y[i] - y[i - 1] };
        }
    }
    Ok(out)
}

pub fn apply_kernel_inverse_vec(params: &KernelParams, v: &DVector<f64>) -> Result<DVector<f64>> {
    let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    let out = apply_kernel_inverse(params, &m)?;
    Ok(DVector::from_column_slice(out.as_slice()))
}

/// Upper-triangular `L = Δ⁻¹ W^{1/2}` with `K_β = L Lᵀ`.
///
/// `L[i,j] = sqrt(W_j)` for `j >= i`. Entries that underflow stay zero, so
/// `L` is usable over the whole β domain where `W⁻¹` would overflow.
pub fn whitening_factor(beta: f64, n: usize) -> DMatrix<f64> {
    let sqrt_w: Vec<f64> = log_w_diag(beta, n).into_iter().map(|l| (0.5 * l).exp()).collect();
    DMatrix::from_fn(n, n, |i, j| if j >= i { sqrt_w[j] } else { 0.0 })
}
