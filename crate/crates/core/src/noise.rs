//! Heavy-tailed noise models written as Gaussian scale mixtures.
//!
//! Each noise sample is `v_t ~ N(0, τ_t)` with a random variance `τ_t`:
//! exponential with mean `σ²` gives Laplacian noise, inverse gamma with
//! shape `ν/2` and scale `(ν-2)σ²/2` gives Student's t with variance `σ²`.
//! This module holds the densities, the closed-form M-step updates for
//! `τ_t` and for grouped variances `Υ_i`, and the selection of `ν`.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, StandardNormal};
use serde::{Serialize, Serializer};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::posterior::row_quadratic_forms;
use crate::rng;

/// Relative floor applied to every variance update: `τ >= 1e-8 σ²`.
pub const TAU_FLOOR_REL: f64 = 1e-8;

pub fn tau_floor(sigma2: f64) -> f64 {
    TAU_FLOOR_REL * sigma2
}

/// Student's t degrees of freedom; `Infinite` is the Gaussian limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dof {
    Finite(f64),
    Infinite,
}

impl Dof {
    /// Grid used for automatic selection.
    pub const DEFAULT_GRID: [Dof; 11] = [
        Dof::Finite(2.01),
        Dof::Finite(2.25),
        Dof::Finite(2.5),
        Dof::Finite(2.75),
        Dof::Finite(3.0),
        Dof::Finite(5.0),
        Dof::Finite(7.5),
        Dof::Finite(10.0),
        Dof::Finite(15.0),
        Dof::Finite(50.0),
        Dof::Infinite,
    ];

    pub fn default_grid() -> Vec<Dof> {
        Dof::DEFAULT_GRID.to_vec()
    }

    pub fn value(self) -> f64 {
        match self {
            Dof::Finite(v) => v,
            Dof::Infinite => f64::INFINITY,
        }
    }

    fn cmp_value(&self, other: &Dof) -> Ordering {
        self.value().total_cmp(&other.value())
    }
}

impl fmt::Display for Dof {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dof::Finite(v) => write!(f, "{v}"),
            Dof::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Dof {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "+inf" => Ok(Dof::Infinite),
            other => other
                .parse::<f64>()
                .map(Dof::Finite)
                .map_err(|_| Error::Parameter(format!("invalid degrees of freedom `{s}`"))),
        }
    }
}

/// Serialized as a number, or the string `"inf"` for the Gaussian limit.
impl Serialize for Dof {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Dof::Finite(v) => s.serialize_f64(*v),
            Dof::Infinite => s.serialize_str("inf"),
        }
    }
}

/// Noise family with its degrees of freedom resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseKind {
    Gaussian,
    Laplacian,
    StudentT(Dof),
}

impl NoiseKind {
    /// Whether the per-sample variances are estimated (not pinned at σ²).
    pub fn has_free_variances(&self) -> bool {
        !matches!(self, NoiseKind::Gaussian | NoiseKind::StudentT(Dof::Infinite))
    }
}

/// A noise model with nominal variance `σ²`. When `nu_grid` is set, `ν` is
/// re-selected from the grid during identification and `kind` holds the
/// current value.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub sigma2: f64,
    pub nu_grid: Option<Vec<Dof>>,
}

impl NoiseModel {
    pub fn gaussian(sigma2: f64) -> Result<Self> {
        Self::build(NoiseKind::Gaussian, sigma2, None)
    }

    pub fn laplacian(sigma2: f64) -> Result<Self> {
        Self::build(NoiseKind::Laplacian, sigma2, None)
    }

    pub fn student(sigma2: f64, nu: Dof) -> Result<Self> {
        Self::build(NoiseKind::StudentT(nu), sigma2, None)
    }

    /// Student's t with `ν` selected from `grid`; starts at the Gaussian limit.
    pub fn student_auto(sigma2: f64, grid: Vec<Dof>) -> Result<Self> {
        Self::build(NoiseKind::StudentT(Dof::Infinite), sigma2, Some(grid))
    }

    fn build(kind: NoiseKind, sigma2: f64, nu_grid: Option<Vec<Dof>>) -> Result<Self> {
        let model = NoiseModel { kind, sigma2, nu_grid };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::Parameter(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        let check = |nu: &Dof| match nu {
            Dof::Finite(v) if !(*v > 2.0 && v.is_finite()) => Err(Error::Parameter(format!(
                "degrees of freedom must exceed 2, got {v}"
            ))),
            _ => Ok(()),
        };
        if let NoiseKind::StudentT(nu) = &self.kind {
            check(nu)?;
        }
        if let Some(grid) = &self.nu_grid {
            if !matches!(self.kind, NoiseKind::StudentT(_)) {
                return Err(Error::Parameter("a nu grid needs a Student model".into()));
            }
            if grid.is_empty() {
                return Err(Error::Parameter("nu grid is empty".into()));
            }
            grid.iter().try_for_each(check)?;
        }
        Ok(())
    }

    pub fn is_auto(&self) -> bool {
        self.nu_grid.is_some()
    }

    /// The same model with `ν` fixed.
    pub fn with_nu(&self, nu: Dof) -> NoiseModel {
        NoiseModel {
            kind: NoiseKind::StudentT(nu),
            sigma2: self.sigma2,
            nu_grid: self.nu_grid.clone(),
        }
    }

    pub fn nu(&self) -> Option<Dof> {
        match self.kind {
            NoiseKind::StudentT(nu) => Some(nu),
            _ => None,
        }
    }
}

/// Laplacian M-step: `τ = (σ²/4)(sqrt(1 + 8ε/σ²) - 1)`, floored.
pub fn tau_update_laplacian(eps: f64, sigma2: f64) -> f64 {
    upsilon_laplacian(eps, sigma2, 1.0)
}

/// Student M-step: `τ = (ε + (ν-2)σ²)/(ν+3)`, or `σ²` in the Gaussian limit.
pub fn tau_update_student(eps: f64, sigma2: f64, nu: Dof) -> f64 {
    upsilon_student(eps, sigma2, 1.0, nu)
}

fn upsilon_laplacian(zeta: f64, sigma2: f64, m: f64) -> f64 {
    // m σ²/4 (sqrt(1 + x) - 1) with x = 8ζ/(m²σ²), written as
    // m σ²/4 · x/(sqrt(1+x)+1) to avoid cancellation for small x.
    let x = 8.0 * zeta / (m * m * sigma2);
    let raw = m * sigma2 / 4.0 * x / ((1.0 + x).sqrt() + 1.0);
    raw.max(tau_floor(sigma2))
}

fn upsilon_student(zeta: f64, sigma2: f64, m: f64, nu: Dof) -> f64 {
    match nu {
        Dof::Infinite => sigma2,
        Dof::Finite(nu) => ((zeta + (nu - 2.0) * sigma2) / (nu + 2.0 + m)).max(tau_floor(sigma2)),
    }
}

/// Grouped M-step for a block of `m` samples sharing one variance.
/// With `m = 1` this is the per-sample update.
pub fn upsilon_update(zeta: f64, sigma2: f64, m: usize, kind: &NoiseKind) -> Result<f64> {
    if m == 0 {
        return Err(Error::Parameter("block size must be >= 1".into()));
    }
    match kind {
        NoiseKind::Gaussian => Err(Error::NotApplicable(
            "Gaussian noise variances are fixed at sigma2".into(),
        )),
        NoiseKind::Laplacian => Ok(upsilon_laplacian(zeta, sigma2, m as f64)),
        NoiseKind::StudentT(nu) => Ok(upsilon_student(zeta, sigma2, m as f64, *nu)),
    }
}

/// Per-sample update dispatched on the noise family.
pub fn tau_update(eps: f64, sigma2: f64, kind: &NoiseKind) -> f64 {
    match kind {
        NoiseKind::Gaussian => sigma2,
        NoiseKind::Laplacian => tau_update_laplacian(eps, sigma2),
        NoiseKind::StudentT(nu) => tau_update_student(eps, sigma2, *nu),
    }
}

/// `log p(τ)` of the mixing density. Zero for the fixed-variance families.
pub fn log_prior_tau(tau: f64, sigma2: f64, kind: &NoiseKind) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("tau must be positive, got {tau}")));
    }
    Ok(match kind {
        NoiseKind::Gaussian | NoiseKind::StudentT(Dof::Infinite) => 0.0,
        NoiseKind::Laplacian => -sigma2.ln() - tau / sigma2,
        NoiseKind::StudentT(Dof::Finite(nu)) => {
            let b = (nu - 2.0) * sigma2 / 2.0;
            nu / 2.0 * b.ln() - ln_gamma(nu / 2.0) - (nu / 2.0 + 1.0) * tau.ln() - b / tau
        }
    })
}

/// Per-sample term of the EM surrogate: `ε/τ + log τ - 2 log p(τ)`.
pub fn q_tau(eps: f64, tau: f64, sigma2: f64, kind: &NoiseKind) -> Result<f64> {
    Ok(eps / tau + tau.ln() - 2.0 * log_prior_tau(tau, sigma2, kind)?)
}

/// Block term: `ζ/Υ + m log Υ - 2 log p(Υ)`.
pub fn q_upsilon(zeta: f64, upsilon: f64, m: usize, sigma2: f64, kind: &NoiseKind) -> Result<f64> {
    Ok(zeta / upsilon + m as f64 * upsilon.ln() - 2.0 * log_prior_tau(upsilon, sigma2, kind)?)
}

/// Partition of the sample indices into `p` blocks of equal size `m`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grouping {
    blocks: Vec<Vec<usize>>,
    len: usize,
}

impl Grouping {
    /// `p` contiguous blocks of `N / p` samples.
    pub fn contiguous(len: usize, p: usize) -> Result<Self> {
        if p == 0 || len == 0 || !len.is_multiple_of(p) {
            return Err(Error::Parameter(format!(
                "{len} samples cannot be split into {p} equal blocks"
            )));
        }
        let m = len / p;
        Ok(Grouping {
            blocks: (0..p).map(|i| (i * m..(i + 1) * m).collect()).collect(),
            len,
        })
    }

    /// Arbitrary equal-size blocks that partition `0..N`.
    pub fn from_blocks(blocks: Vec<Vec<usize>>) -> Result<Self> {
        let len: usize = blocks.iter().map(Vec::len).sum();
        let m = blocks.first().map(Vec::len).unwrap_or(0);
        if m == 0 || blocks.iter().any(|b| b.len() != m) {
            return Err(Error::Parameter("blocks must be nonempty and of equal size".into()));
        }
        let mut seen = vec![false; len];
        for &i in blocks.iter().flatten() {
            if i >= len || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Parameter(format!("blocks do not partition 0..{len}")));
            }
        }
        Ok(Grouping { blocks, len })
    }

    pub fn groups(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_size(&self) -> usize {
        self.len / self.blocks.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.len {
            return Err(Error::Parameter(format!(
                "grouping covers {} samples, data has {n}",
                self.len
            )));
        }
        Ok(())
    }

    /// Sum of `values` over each block.
    pub fn block_sums(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.check_len(values.len())?;
        Ok(self.blocks.iter().map(|b| b.iter().map(|&i| values[i]).sum()).collect())
    }

    /// Per-sample vector with every sample carrying its block's value.
    pub fn expand(&self, per_block: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for (b, v) in self.blocks.iter().zip(per_block) {
            for &i in b {
                out[i] = *v;
            }
        }
        out
    }
}

/// `ζ_i = ‖Y_i - Ŷ_i‖² + Tr Ŝ_ii` per block; `Ŝ = U P Uᵀ` is only formed
/// one diagonal block entry at a time.
pub fn group_residuals(
    y: &[f64],
    y_hat: &[f64],
    u: &DMatrix<f64>,
    p: &DMatrix<f64>,
    grouping: &Grouping,
) -> Result<Vec<f64>> {
    grouping.check_len(y.len())?;
    if y_hat.len() != y.len() || u.nrows() != y.len() {
        return Err(Error::shape(y.len(), format!("{} / {}", y_hat.len(), u.nrows())));
    }
    grouping
        .blocks()
        .iter()
        .map(|block| {
            let trace: f64 = row_quadratic_forms(u, p, block)?.iter().sum();
            let resid: f64 = block.iter().map(|&t| (y[t] - y_hat[t]).powi(2)).sum();
            Ok(resid + trace)
        })
        .collect()
}

/// `log Π_t p(v̂_t | ν)` for the unit-variance-scaled Student density, or the
/// `N(0, σ²)` log-likelihood in the Gaussian limit.
pub fn student_log_likelihood(residuals: &[f64], sigma2: f64, nu: Dof) -> f64 {
    // sorted so the result does not depend on sample order
    let mut sq: Vec<f64> = residuals.iter().map(|v| v * v).collect();
    sq.sort_by(f64::total_cmp);
    let n = sq.len() as f64;
    match nu {
        Dof::Infinite => {
            -0.5 * n * (2.0 * std::f64::consts::PI * sigma2).ln()
                - sq.iter().map(|s| s / (2.0 * sigma2)).sum::<f64>()
        }
        Dof::Finite(nu) => {
            let scale = sigma2 * (nu - 2.0);
            let log_norm = ln_gamma((nu + 1.0) / 2.0)
                - ln_gamma(nu / 2.0)
                - 0.5 * (std::f64::consts::PI * scale).ln();
            n * log_norm - (nu + 1.0) / 2.0 * sq.iter().map(|s| (s / scale).ln_1p()).sum::<f64>()
        }
    }
}

/// Grid value of `ν` maximizing the residual log-likelihood; ties go to the
/// smaller `ν`.
pub fn select_nu(residuals: &[f64], sigma2: f64, grid: &[Dof]) -> Result<Dof> {
    if grid.is_empty() {
        return Err(Error::Parameter("nu grid is empty".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(Dof::cmp_value);
    let mut best = (sorted[0], f64::NEG_INFINITY);
    for nu in sorted {
        let ll = student_log_likelihood(residuals, sigma2, nu);
        if ll > best.1 {
            best = (nu, ll);
        }
    }
    Ok(best.0)
}

/// Draws `len` noise samples through the two-step mixture construction.
pub fn sample_noise(model: &NoiseModel, len: usize, seed: u64) -> Result<Vec<f64>> {
    sample_noise_with(model, len, &mut rng::stream(seed, rng::tag::NOISE))
}

pub fn sample_noise_with<R: Rng + ?Sized>(model: &NoiseModel, len: usize, rng: &mut R) -> Result<Vec<f64>> {
    model.validate()?;
    if model.is_auto() {
        return Err(Error::Parameter("cannot sample with an unresolved nu".into()));
    }
    let sigma2 = model.sigma2;
    let draw = |tau: f64, rng: &mut R| tau.sqrt() * rng.sample::<f64, _>(StandardNormal);
    Ok(match model.kind {
        NoiseKind::Gaussian | NoiseKind::StudentT(Dof::Infinite) => {
            (0..len).map(|_| draw(sigma2, rng)).collect()
        }
        NoiseKind::Laplacian => {
            let mix = Exp::new(1.0 / sigma2).map_err(|e| Error::Parameter(e.to_string()))?;
            (0..len)
                .map(|_| {
                    let tau = mix.sample(rng);
                    draw(tau, rng)
                })
                .collect()
        }
        NoiseKind::StudentT(Dof::Finite(nu)) => {
            // τ = 1/G with G ~ Gamma(ν/2, scale 2/((ν-2)σ²))
            let mix = Gamma::new(nu / 2.0, 2.0 / ((nu - 2.0) * sigma2))
                .map_err(|e| Error::Parameter(e.to_string()))?;
            (0..len)
                .map(|_| {
                    let tau = 1.0 / mix.sample(rng);
                    draw(tau, rng)
                })
                .collect()
        }
    })
}
