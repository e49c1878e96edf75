use proptest::prelude::*;

use robust_sysid::bench::{run_monte_carlo, BenchConfig, FitReport, Method, Scenario};
use robust_sysid::signals::{convolve, toeplitz_regressor};
use robust_sysid::{Dataset, Dof};

fn small(jobs: Option<usize>) -> BenchConfig {
    BenchConfig {
        runs: 6,
        samples: 80,
        n: 15,
        order: 6,
        methods: vec![Method::EmS, Method::EmL, Method::SsMl, Method::EmLGrouped(4)],
        seed: 21,
        jobs,
        ..BenchConfig::default()
    }
}

fn without_timing(report: &FitReport) -> Vec<(usize, String, u64, usize)> {
    report.records.iter().map(|r| (r.run, r.method.clone(), r.fit.to_bits(), r.iterations)).collect()
}

#[test]
fn report_is_independent_of_worker_count() {
    let seq = run_monte_carlo(&small(Some(1))).unwrap();
    let par = run_monte_carlo(&small(Some(3))).unwrap();
    let default = run_monte_carlo(&small(None)).unwrap();
    assert_eq!(without_timing(&seq), without_timing(&par));
    assert_eq!(without_timing(&seq), without_timing(&default));
    assert_eq!(seq.summary, par.summary);
}

#[test]
fn report_bookkeeping() {
    let report = run_monte_carlo(&small(Some(2))).unwrap();
    assert_eq!(report.records.len(), 6 * 4);
    for (i, r) in report.records.iter().enumerate() {
        assert_eq!(r.run, i / 4);
        assert!(r.error.is_none(), "{:?}", r.error);
        assert!(r.fit.is_finite() && r.fit <= 1.0);
    }
    assert_eq!(report.summary.pairwise.len(), 6);
    let json = report.summary_json();
    assert!(json["methods"]["em-l-p:4"]["mean"].is_number());
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("run,method,fit,iterations,wall_time_s\n"));
    assert_eq!(text.lines().count(), 25);
}

#[test]
fn single_method_has_no_pairwise_section() {
    let config = BenchConfig { methods: vec![Method::SsMl], ..small(Some(1)) };
    let report = run_monte_carlo(&config).unwrap();
    assert!(report.summary_json().get("pairwise").is_none());
}

#[test]
fn student_scenario_and_oracle_method_run() {
    let config = BenchConfig {
        runs: 2,
        methods: vec![Method::EmSOpt, Method::EmSFixed(Dof::Finite(4.0))],
        scenario: Scenario::Student(Dof::Finite(3.0)),
        ..small(Some(1))
    };
    let report = run_monte_carlo(&config).unwrap();
    assert!(report.method("em-s-opt").unwrap().oracle);
    let opt = report.fits("em-s-opt");
    let fixed = report.fits("em-s-fixed:4");
    // the oracle picks the best grid value, and 4 is on the grid
    assert!(opt.iter().zip(&fixed).all(|(o, f)| o >= f));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_roundtrip_is_exact(pairs in prop::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 1..40)) {
        prop_assume!(pairs.iter().any(|(u, _)| *u != 0.0));
        let (u, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let ds = Dataset::new(u, y).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        prop_assert_eq!(Dataset::read_csv(buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn regressor_product_is_convolution(
        g in prop::collection::vec(-2.0f64..2.0, 1..10),
        u in prop::collection::vec(-2.0f64..2.0, 1..30),
    ) {
        let rows = u.len();
        let phi = toeplitz_regressor(&u, g.len(), rows).unwrap();
        let y = phi * nalgebra::DVector::from_column_slice(&g);
        let direct = convolve(&g, &u);
        for (a, b) in y.iter().zip(&direct) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
