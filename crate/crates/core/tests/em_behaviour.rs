use approx::assert_relative_eq;
use proptest::prelude::*;

use robust_sysid::baseline::fit_ss_ml;
use robust_sysid::bench::{generate_trial, BenchConfig};
use robust_sysid::em::{q_beta, q_components, run_em, update_lambda, EmOptions};
use robust_sysid::posterior::{map_objective, PosteriorState};
use robust_sysid::{Dataset, Dof, Error, Grouping, Hyperparameters, NoiseKind, NoiseModel};

fn problem(seed: u64, samples: usize, c: f64) -> (Dataset, f64) {
    let config = BenchConfig { samples, n: 20, order: 8, outlier_prob: c, seed, ..BenchConfig::default() };
    let t = generate_trial(&config, 0).unwrap();
    (t.dataset, t.sigma2)
}

#[test]
fn q_beta_is_profiled_surrogate() {
    let (ds, sigma2) = problem(1, 80, 0.1);
    let u = ds.regressor(20).unwrap();
    let theta = Hyperparameters::new(0.5, 0.7, vec![sigma2; 80]).unwrap();
    let state = PosteriorState::compute(&u, ds.y(), &theta).unwrap();
    let d = state.d.as_slice();
    let n = d.len() as f64;
    for beta in [0.3, 0.6, 0.85, 0.97] {
        let lambda = update_lambda(d, beta).unwrap();
        let at = Hyperparameters::new(lambda, beta, vec![sigma2; 80]).unwrap();
        let (q0, _) = q_components(&at, &state, sigma2, &NoiseKind::Gaussian).unwrap();
        assert_relative_eq!(q_beta(beta, d).unwrap(), q0 - n + n * n.ln(), max_relative = 1e-9);
        // λ* minimizes Q₀ along λ
        for f in [0.9, 1.1] {
            let off = Hyperparameters::new(lambda * f, beta, vec![sigma2; 80]).unwrap();
            assert!(q_components(&off, &state, sigma2, &NoiseKind::Gaussian).unwrap().0 > q0);
        }
    }
}

#[test]
fn frozen_gaussian_em_reproduces_ss_ml() {
    let (ds, sigma2) = problem(2, 100, 0.0);
    let ml = fit_ss_ml(&ds, 20, sigma2).unwrap();
    let options = EmOptions { freeze_kernel: true, ..EmOptions::default() };
    let em = run_em(&ds, 20, &NoiseModel::gaussian(sigma2).unwrap(), &options).unwrap();
    assert!(em.trace.converged);
    assert_eq!(em.iterations(), 1);
    for (a, b) in em.g_hat.iter().zip(&ml.g_hat) {
        assert_relative_eq!(a, b, epsilon = 1e-12, max_relative = 1e-10);
    }
}

#[test]
fn gaussian_kind_keeps_tau_at_sigma2() {
    let (ds, sigma2) = problem(3, 100, 0.1);
    let em = run_em(&ds, 20, &NoiseModel::gaussian(sigma2).unwrap(), &EmOptions::default()).unwrap();
    for entry in &em.trace.iterations {
        assert!(entry.theta[2..].iter().all(|t| *t == sigma2));
    }
}

#[test]
fn grouped_em_is_monotone() {
    let (ds, sigma2) = problem(4, 120, 0.1);
    let grouping = Grouping::contiguous(120, 6).unwrap();
    let options = EmOptions { grouping: Some(grouping.clone()), ..EmOptions::default() };
    let em = run_em(&ds, 20, &NoiseModel::laplacian(sigma2).unwrap(), &options).unwrap();
    let u = ds.regressor(20).unwrap();
    let mut prev = f64::NEG_INFINITY;
    for entry in &em.trace.iterations {
        assert_eq!(entry.theta.len(), 2 + 6);
        let theta = Hyperparameters::grouped(entry.theta[0], entry.theta[1], &entry.theta[2..], grouping.clone()).unwrap();
        let obj = map_objective(&theta, &u, ds.y(), sigma2, &NoiseKind::Laplacian).unwrap();
        assert!(obj >= prev - 1e-6 * obj.abs().max(1.0), "{prev} -> {obj}");
        prev = obj;
    }
    assert_eq!(em.theta.noise_params().len(), 6);
}

#[test]
fn objective_trace_matches_recorded_iterates() {
    let (ds, sigma2) = problem(5, 100, 0.05);
    let em = run_em(&ds, 20, &NoiseModel::student(sigma2, Dof::Finite(4.0)).unwrap(), &EmOptions::default()).unwrap();
    let objs = em.trace.objectives();
    assert_eq!(objs.len(), em.trace.iterations.len());
    assert!(objs.windows(2).all(|w| w[1] >= w[0] - 1e-6 * w[0].abs()));
}

#[test]
fn auto_nu_is_reported_from_grid() {
    let (ds, sigma2) = problem(6, 150, 0.1);
    let em = run_em(&ds, 20, &NoiseModel::student_auto(sigma2, Dof::default_grid()).unwrap(), &EmOptions::default())
        .unwrap();
    let nu = em.nu.expect("student model reports nu");
    assert!(Dof::DEFAULT_GRID.contains(&nu));
    assert!(em.trace.iterations.iter().all(|e| e.nu.is_some()));
}

#[test]
fn max_iter_stops_without_error() {
    let (ds, sigma2) = problem(7, 100, 0.1);
    let options = EmOptions { max_iter: 2, rel_tol: 1e-12, ..EmOptions::default() };
    let em = run_em(&ds, 20, &NoiseModel::laplacian(sigma2).unwrap(), &options).unwrap();
    assert!(!em.trace.converged);
    assert_eq!(em.iterations(), 2);
}

#[test]
fn invalid_inputs_are_rejected() {
    let (ds, sigma2) = problem(8, 60, 0.0);
    let model = NoiseModel::laplacian(sigma2).unwrap();
    let bad = EmOptions { max_iter: 0, ..EmOptions::default() };
    assert!(matches!(run_em(&ds, 20, &model, &bad), Err(Error::Parameter(_))));
    let grouping = EmOptions { grouping: Some(Grouping::contiguous(30, 3).unwrap()), ..EmOptions::default() };
    assert!(run_em(&ds, 20, &model, &grouping).is_err());
    assert!(NoiseModel::student(1.0, Dof::Finite(2.0)).is_err());
}

#[test]
fn runs_are_deterministic() {
    let (ds, sigma2) = problem(9, 100, 0.1);
    let model = NoiseModel::student_auto(sigma2, Dof::default_grid()).unwrap();
    let a = run_em(&ds, 20, &model, &EmOptions::default()).unwrap();
    let b = run_em(&ds, 20, &model, &EmOptions::default()).unwrap();
    assert_eq!(a.g_hat, b.g_hat);
    assert_eq!(a.trace, b.trace);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn em_never_decreases_map_objective(seed in 0u64..10_000, laplace in any::<bool>()) {
        let (ds, sigma2) = problem(seed, 60, 0.1);
        let kind = if laplace { NoiseKind::Laplacian } else { NoiseKind::StudentT(Dof::Finite(5.0)) };
        let model = NoiseModel { kind, sigma2, nu_grid: None };
        let em = run_em(&ds, 20, &model, &EmOptions { max_iter: 30, ..EmOptions::default() }).unwrap();
        let u = ds.regressor(20).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for entry in &em.trace.iterations {
            let theta = Hyperparameters::new(entry.theta[0], entry.theta[1], entry.theta[2..].to_vec()).unwrap();
            let obj = map_objective(&theta, &u, ds.y(), sigma2, &kind).unwrap();
            prop_assert!(obj >= prev - 1e-6 * obj.abs().max(1.0));
            prev = obj;
        }
    }
}
