//! Datasets, Toeplitz regressors, system simulation and random test systems.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Complex, DMatrix};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Input samples `u_0..u_{N-1}` paired with outputs `y_1..y_N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    u: Vec<f64>,
    y: Vec<f64>,
}

impl Dataset {
    pub fn new(u: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if u.len() != y.len() {
            return Err(Error::shape(format!("{} outputs", u.len()), format!("{} outputs", y.len())));
        }
        if u.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if u.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite sample".into()));
        }
        if u.iter().all(|&v| v == 0.0) {
            return Err(Error::Data("input is identically zero".into()));
        }
        Ok(Dataset { u, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn regressor(&self, n: usize) -> Result<DMatrix<f64>> {
        toeplitz_regressor(&self.u, n, self.len())
    }

    /// Reads the `u,y` CSV format: row `k` holds `u_{k-1}` and `y_k`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Data(format!("csv header: {e}")))?
            .clone();
        if headers.len() != 2 || &headers[0] != "u" || &headers[1] != "y" {
            return Err(Error::Data(format!(
                "expected header `u,y`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let (mut u, mut y) = (Vec::new(), Vec::new());
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("csv row {}: {e}", k + 1)))?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| Error::Data(format!("csv row {}: missing value", k + 1)))?
                    .parse::<f64>()
                    .map_err(|e| Error::Data(format!("csv row {}: {e}", k + 1)))
            };
            u.push(parse(0)?);
            y.push(parse(1)?);
        }
        Dataset::new(u, y)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::Data(format!("csv write: {e}"));
        wtr.write_record(["u", "y"]).map_err(io)?;
        for (u, y) in self.u.iter().zip(&self.y) {
            wtr.write_record([u.to_string(), y.to_string()]).map_err(io)?;
        }
        wtr.flush().map_err(|e| Error::Data(format!("csv write: {e}")))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Dataset::read_csv(file)
    }
}

/// Impulse response coefficients `g_1..g_n` (`g_0 = 0` is implicit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImpulseResponse(pub Vec<f64>);

impl ImpulseResponse {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn truncated(&self, n: usize) -> ImpulseResponse {
        let mut g = self.0.clone();
        g.resize(n, 0.0);
        ImpulseResponse(g)
    }
}

/// `rows × n` matrix with `U[t, i] = u_{t-i}` (1-based), zero before time 0.
pub fn toeplitz_regressor(u: &[f64], n: usize, rows: usize) -> Result<DMatrix<f64>> {
    if n == 0 || rows == 0 {
        return Err(Error::Parameter(format!(
            "regressor needs n >= 1 and N >= 1, got n={n}, N={rows}"
        )));
    }
    if rows > u.len() {
        return Err(Error::shape(format!("at least {rows} inputs"), u.len()));
    }
    Ok(DMatrix::from_fn(rows, n, |r, c| if r >= c { u[r - c] } else { 0.0 }))
}

/// `y = U g + v` for a system at rest before `t = 0`.
pub fn simulate_system(g: &ImpulseResponse, u: &[f64], noise: &[f64]) -> Result<Dataset> {
    if noise.len() != u.len() {
        return Err(Error::shape(format!("{} noise samples", u.len()), noise.len()));
    }
    let y = convolve(g.as_slice(), u)
        .into_iter()
        .zip(noise)
        .map(|(a, b)| a + b)
        .collect();
    Dataset::new(u.to_vec(), y)
}

/// Noiseless output `y_t = Σ_i g_i u_{t-i}`, `t = 1..len(u)`.
pub fn convolve(g: &[f64], u: &[f64]) -> Vec<f64> {
    (0..u.len())
        .map(|r| {
            g.iter()
                .enumerate()
                .take(r + 1)
                .map(|(c, gi)| gi * u[r - c])
                .sum()
        })
        .collect()
}

/// A stable, strictly causal rational transfer function given by its
/// poles, zeros and gain.
#[derive(Debug, Clone, PartialEq)]
pub struct RationalSystem {
    pub poles: Vec<Complex<f64>>,
    pub zeros: Vec<Complex<f64>>,
    pub gain: f64,
}

const POLE_MAG: (f64, f64) = (0.4, 0.95);
const ZERO_MAG_MAX: f64 = 0.95;
const PAIR_PROB: f64 = 0.8;
const NORMALIZATION_HORIZON: usize = 2000;

impl RationalSystem {
    /// Real poles and zeros only.
    pub fn from_real(poles: &[f64], zeros: &[f64], gain: f64) -> Result<Self> {
        let c = |v: &[f64]| v.iter().map(|&x| Complex::new(x, 0.0)).collect();
        RationalSystem::new(c(poles), c(zeros), gain)
    }

    pub fn new(poles: Vec<Complex<f64>>, zeros: Vec<Complex<f64>>, gain: f64) -> Result<Self> {
        if poles.is_empty() {
            return Err(Error::Parameter("system order must be >= 1".into()));
        }
        if zeros.len() >= poles.len() {
            return Err(Error::Parameter("strict causality needs fewer zeros than poles".into()));
        }
        if poles.iter().any(|p| p.norm() >= 1.0) {
            return Err(Error::Parameter("unstable pole".into()));
        }
        Ok(RationalSystem { poles, zeros, gain })
    }

    /// Random stable system with the configured pole/zero distribution,
    /// scaled to unit peak impulse-response magnitude.
    pub fn random<R: Rng + ?Sized>(order: usize, rng: &mut R) -> Result<Self> {
        if order == 0 {
            return Err(Error::Parameter("system order must be >= 1".into()));
        }
        let poles = sample_roots(order, POLE_MAG.0, POLE_MAG.1, rng);
        let zeros = sample_roots(order - 1, 0.0, ZERO_MAG_MAX, rng);
        let mut sys = RationalSystem::new(poles, zeros, 1.0)?;
        let peak = sys
            .impulse_response(NORMALIZATION_HORIZON)
            .0
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        if peak > 0.0 && peak.is_finite() {
            sys.gain /= peak;
        }
        Ok(sys)
    }

    pub fn order(&self) -> usize {
        self.poles.len()
    }

    pub fn max_pole_magnitude(&self) -> f64 {
        self.poles.iter().fold(0.0, |m, p| m.max(p.norm()))
    }

    /// `g_1..g_len` of `gain · Π(z - z_k) / Π(z - p_k)`.
    pub fn impulse_response(&self, len: usize) -> ImpulseResponse {
        let a = real_poly(&self.poles); // 1, a_1, .., a_n in powers of z^-1
        let b = real_poly(&self.zeros);
        let delay = self.poles.len() - self.zeros.len();
        let mut g = vec![0.0; len + 1];
        for t in 1..=len {
            let mut acc = 0.0;
            if t >= delay {
                let k = t - delay;
                if k < b.len() {
                    acc += self.gain * b[k];
                }
            }
            for (k, ak) in a.iter().enumerate().skip(1) {
                if k > t {
                    break;
                }
                acc -= ak * g[t - k];
            }
            g[t] = acc;
        }
        ImpulseResponse(g.split_off(1))
    }
}

/// Coefficients of `Π(1 - r z^-1)`; imaginary parts cancel for conjugate sets.
fn real_poly(roots: &[Complex<f64>]) -> Vec<f64> {
    let mut c = vec![Complex::new(1.0, 0.0)];
    for r in roots {
        let mut next = vec![Complex::new(0.0, 0.0); c.len() + 1];
        for (k, ck) in c.iter().enumerate() {
            next[k] += ck;
            next[k + 1] -= ck * r;
        }
        c = next;
    }
    c.into_iter().map(|z| z.re).collect()
}

fn sample_roots<R: Rng + ?Sized>(count: usize, lo: f64, hi: f64, rng: &mut R) -> Vec<Complex<f64>> {
    let mut roots = Vec::with_capacity(count);
    while roots.len() < count {
        let mag = rng.random_range(lo..=hi);
        if count - roots.len() >= 2 && rng.random_bool(PAIR_PROB) {
            let phase = rng.random_range(0.0..std::f64::consts::PI);
            let r = Complex::from_polar(mag, phase);
            roots.push(r);
            roots.push(r.conj());
        } else {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            roots.push(Complex::new(sign * mag, 0.0));
        }
    }
    roots
}

/// Length-`n` impulse response of a random stable system, deterministic per seed.
pub fn random_system(order: usize, n: usize, seed: u64) -> Result<ImpulseResponse> {
    let mut rng = rng::stream(seed, rng::tag::SYSTEM);
    Ok(RationalSystem::random(order, &mut rng)?.impulse_response(n))
}

/// White Gaussian input of unit variance.
pub fn white_input<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Two-component Gaussian mixture `(1-c) N(0, σ²) + c N(0, 100 σ²)`.
pub fn sample_outlier_noise(sigma2: f64, c: f64, len: usize, seed: u64) -> Result<Vec<f64>> {
    sample_outlier_noise_with(sigma2, c, len, &mut rng::stream(seed, rng::tag::MIXTURE))
}

pub fn sample_outlier_noise_with<R: Rng + ?Sized>(
    sigma2: f64,
    c: f64,
    len: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::Parameter(format!("sigma2 must be positive, got {sigma2}")));
    }
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::Parameter(format!("contamination must lie in [0,1], got {c}")));
    }
    let nominal = Normal::new(0.0, sigma2.sqrt()).expect("positive std");
    let outlier = Normal::new(0.0, (100.0 * sigma2).sqrt()).expect("positive std");
    Ok((0..len)
        .map(|_| {
            if rng.random_bool(c) {
                outlier.sample(rng)
            } else {
                nominal.sample(rng)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn variance(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    }

    #[test]
    fn toeplitz_examples() {
        let u = toeplitz_regressor(&[1.0, 0.0, 0.0], 2, 3).unwrap();
        assert_eq!(u, DMatrix::from_row_slice(3, 2, &[1., 0., 0., 1., 0., 0.]));
        let u = toeplitz_regressor(&[0.0, 0.0, 0.0], 1, 3).unwrap();
        assert_eq!(u, DMatrix::zeros(3, 1));
        let u = toeplitz_regressor(&[1.0, 2.0, 3.0], 2, 3).unwrap();
        assert_eq!(u, DMatrix::from_row_slice(3, 2, &[1., 0., 2., 1., 3., 2.]));
        assert!(toeplitz_regressor(&[1.0], 0, 1).is_err());
        assert!(toeplitz_regressor(&[1.0], 1, 0).is_err());
        assert!(toeplitz_regressor(&[1.0], 1, 2).is_err());
    }

    #[test]
    fn simulate_examples() {
        let ds = simulate_system(&ImpulseResponse(vec![1.0, 0.0]), &[1.0, 0.0, 0.0], &[0.0; 3]).unwrap();
        assert_eq!(ds.y(), &[1.0, 0.0, 0.0]);
        let ds = simulate_system(&ImpulseResponse(vec![0.5, 0.25]), &[1.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(ds.y(), &[0.5, 0.75, 0.75]);
        let ds = simulate_system(&ImpulseResponse(vec![1.0]), &[1.0, 1.0], &[0.1, -0.1]).unwrap();
        assert_abs_diff_eq!(ds.y()[0], 1.1, epsilon = 1e-15);
        assert_abs_diff_eq!(ds.y()[1], 0.9, epsilon = 1e-15);
        assert!(simulate_system(&ImpulseResponse(vec![1.0]), &[1.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn simulation_matches_regressor_product() {
        let mut rng = rng::stream(3, 0);
        let u = white_input(40, &mut rng);
        let g = ImpulseResponse((0..7).map(|i| 0.8_f64.powi(i)).collect());
        let ds = simulate_system(&g, &u, &[0.0; 40]).unwrap();
        let expected = toeplitz_regressor(&u, 7, 40).unwrap() * nalgebra::DVector::from_vec(g.0.clone());
        assert_eq!(ds.y(), expected.as_slice());
    }

    #[test]
    fn dataset_invariants() {
        assert!(matches!(Dataset::new(vec![0.0; 3], vec![1.0; 3]), Err(Error::Data(_))));
        assert!(Dataset::new(vec![1.0; 3], vec![1.0; 2]).is_err());
        assert!(Dataset::new(vec![], vec![]).is_err());
        assert!(Dataset::new(vec![1.0, f64::NAN], vec![1.0; 2]).is_err());
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let ds = Dataset::new(vec![1.0, -0.1, 3.25e-7], vec![0.0, 1.0 / 3.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("u,y\n"));
        assert_eq!(Dataset::read_csv(buf.as_slice()).unwrap(), ds);

        assert!(Dataset::read_csv("a,b\n1,2\n".as_bytes()).is_err());
        assert!(Dataset::read_csv("u,y\n1,\n".as_bytes()).is_err());
        assert!(Dataset::read_csv("u,y\n1,x\n".as_bytes()).is_err());
    }

    #[test]
    fn first_order_system() {
        let sys = RationalSystem::from_real(&[0.5], &[], 1.0).unwrap();
        let g = sys.impulse_response(6);
        for (t, gt) in g.0.iter().enumerate() {
            assert_abs_diff_eq!(*gt, 0.5_f64.powi(t as i32), epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_shifts_response() {
        // z - 0.2 over (z - 0.5)(z - 0.4): compare against partial fractions
        let sys = RationalSystem::from_real(&[0.5, 0.4], &[0.2], 2.0).unwrap();
        let g = sys.impulse_response(10);
        // residues: (p - 0.2)/(p - q) at p=0.5: 0.3/0.1 = 3, at 0.4: 0.2/(-0.1) = -2
        for (k, gt) in g.0.iter().enumerate() {
            let t = k as i32;
            let expected = 2.0 * (3.0 * 0.5_f64.powi(t) - 2.0 * 0.4_f64.powi(t));
            assert_abs_diff_eq!(*gt, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn random_system_properties() {
        let a = random_system(30, 50, 11).unwrap();
        let b = random_system(30, 50, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, random_system(30, 50, 12).unwrap());
        assert!(random_system(0, 50, 1).is_err());

        for seed in 0..20 {
            let mut rng = rng::stream(seed, rng::tag::SYSTEM);
            let sys = RationalSystem::random(30, &mut rng).unwrap();
            assert_eq!(sys.order(), 30);
            assert!(sys.max_pole_magnitude() <= 0.95 + 1e-12);
            assert!(sys.poles.iter().all(|p| p.norm() >= 0.4 - 1e-12));
            let horizon = (5.0 * 30.0 / (1.0 - sys.max_pole_magnitude())).ceil() as usize;
            let g = sys.impulse_response(horizon + 200);
            let peak = g.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            assert_abs_diff_eq!(peak, 1.0, epsilon = 1e-9);
            let l1: f64 = g.0.iter().map(|v| v.abs()).sum();
            assert!(l1.is_finite());
            assert!(g.0[horizon..].iter().all(|v| v.abs() < 1e-6 * peak), "seed {seed}");
        }
    }

    #[test]
    fn outlier_noise_statistics() {
        let v = sample_outlier_noise(1.0, 0.0, 10_000, 5).unwrap();
        let s = variance(&v);
        assert!((0.95..=1.05).contains(&s), "{s}");
        let v = sample_outlier_noise(1.0, 1.0, 10_000, 5).unwrap();
        let s = variance(&v);
        assert!((95.0..=105.0).contains(&s), "{s}");
        assert_eq!(
            sample_outlier_noise(2.0, 0.3, 100, 9).unwrap(),
            sample_outlier_noise(2.0, 0.3, 100, 9).unwrap()
        );
        assert!(sample_outlier_noise(0.0, 0.1, 10, 1).is_err());
        assert!(sample_outlier_noise(1.0, 1.5, 10, 1).is_err());
    }

    #[test]
    fn outlier_tail_mass_matches_mixture() {
        use statrs::distribution::{ContinuousCDF, Normal as SNormal};
        let c = 0.1;
        let v = sample_outlier_noise(1.0, c, 100_000, 17).unwrap();
        let empirical = v.iter().filter(|x| x.abs() > 3.0).count() as f64 / v.len() as f64;
        let std = SNormal::new(0.0, 1.0).unwrap();
        let tail = |s: f64| 2.0 * (1.0 - std.cdf(3.0 / s));
        let predicted = (1.0 - c) * tail(1.0) + c * tail(10.0);
        assert!((empirical / predicted - 1.0).abs() < 0.2, "{empirical} vs {predicted}");
    }
}
