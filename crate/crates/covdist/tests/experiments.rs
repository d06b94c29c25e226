use covdist::clustering::{
    empirical_success, gaussian_law_success, mvn_orthant, success_probability, ClusteringScenario, OrthantOptions,
};
use covdist::estimators::{EstimatorKind, MetricSpec};
use covdist::harness::{run_experiment, ExperimentConfig};
use covdist::spectral::{toeplitz_model, Field};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn orthant_matches_plain_monte_carlo_in_five_dimensions() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let g = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
    let cov = &g * g.transpose() + DMatrix::identity(5, 5) * 0.2;
    let mean = DVector::from_vec(vec![-0.3, 0.2, -0.5, 0.1, -0.2]);
    let est = mvn_orthant(&mean, &cov, &OrthantOptions::default()).unwrap();
    let l = cov.clone().cholesky().unwrap().l();
    let draws = 10_000_000usize;
    let mut hits = 0usize;
    let mut z = DVector::zeros(5);
    for _ in 0..draws {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let x = &mean + &l * &z;
        if x.iter().all(|&v| v < 0.0) {
            hits += 1;
        }
    }
    let p = hits as f64 / draws as f64;
    let se = (p * (1.0 - p) / draws as f64).sqrt();
    assert!((est.probability - p).abs() < 3.0 * (se * se + (est.error / 3.0).powi(2)).sqrt(), "{est:?} vs {p} ± {se}");
    assert!(est.error < 1e-3);
}

#[test]
fn histogram_example_has_small_ks() {
    let cfg = ExperimentConfig::from_json(
        r#"{"kind": "histogram", "rho": [0.8, 0.4], "c": [0.1, 0.5], "M": [40], "metrics": ["eu"], "trials": 2000, "seed": 21}"#,
    )
    .unwrap();
    let out = run_experiment(&cfg).unwrap();
    let ks = out.table.get_f64(0, "ks").unwrap();
    assert!(ks < 0.05, "ks = {ks}");
}

#[test]
fn consistent_mse_decreases_along_the_grid() {
    let grid: Vec<String> = (1..=20).map(|k| (4 * k).to_string()).collect();
    let text = format!(
        r#"{{"kind": "mse", "rho": [0.3, 0.6], "c": [0.333333333333], "M": [{}], "metrics": ["le"], "estimators": ["consistent"], "trials": 400, "seed": 2}}"#,
        grid.join(",")
    );
    let out = run_experiment(&ExperimentConfig::from_json(&text).unwrap()).unwrap();
    let mse: Vec<f64> = (0..out.table.rows.len()).map(|r| out.table.get_f64(r, "mse").unwrap()).collect();
    let inversions = mse.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(inversions <= 2, "{mse:?}");
}

#[test]
fn identical_models_theory_matches_simulation() {
    let m = toeplitz_model(0.5, 8, Field::Real).unwrap();
    let s = ClusteringScenario::new(vec![m; 6], vec![32; 6], vec![0, 0, 1, 1, 2, 2], MetricSpec::euclidean(), Field::Real).unwrap();
    let law = s.law().unwrap();
    let theory = success_probability(&law, &s, &OrthantOptions::default()).unwrap();
    let emp = empirical_success(&s, 3000, EstimatorKind::Consistent, 8).unwrap();
    let se = (theory.probability * (1.0 - theory.probability) / 3000.0).sqrt();
    assert!((theory.probability - emp.probability).abs() < 3.0 * se, "{theory:?} vs {emp:?}");
}

#[test]
fn kl_scenario_theory_agrees_with_gaussian_sampling_and_grows_with_n() {
    let rhos = [0.3, 0.3, 0.6, 0.6, 0.9, 0.9];
    let s = ClusteringScenario::toeplitz(&rhos, &[30; 6], 20, MetricSpec::kullback_leibler(), Field::Real).unwrap();
    let law = s.law().unwrap();
    let p = success_probability(&law, &s, &OrthantOptions::default()).unwrap();
    let (mc, max_events) = gaussian_law_success(&law, &s, 100_000, 4).unwrap();
    let se = (mc * (1.0 - mc) / 1e5).sqrt();
    assert!((p.raw - mc).abs() < 3.0 * se + p.error, "{p:?} vs {mc}");
    assert!(max_events <= 1);
    assert!(p.raw <= 1.0 + 3e-3);
    let big = ClusteringScenario::toeplitz(&rhos, &[120; 6], 20, MetricSpec::kullback_leibler(), Field::Real).unwrap();
    let q = success_probability(&big.law().unwrap(), &big, &OrthantOptions::default()).unwrap();
    assert!(q.probability >= p.probability - 1e-3);
}

#[test]
fn clustering_runner_reports_theory_and_empirical() {
    let cfg = ExperimentConfig::from_json(
        r#"{"kind": "clustering", "rho": [0.3, 0.3, 0.5, 0.5, 0.7, 0.7], "M": [10], "c_profiles": [[0.6667], [0.25, 0.25, 0.3333, 0.3333, 0.5, 0.5]], "metrics": ["le"], "estimators": ["consistent"], "trials": 200, "seed": 4}"#,
    )
    .unwrap();
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.table.rows.len(), 2);
    for r in 0..2 {
        let t = out.table.get_f64(r, "theory").unwrap();
        let e = out.table.get_f64(r, "empirical").unwrap();
        assert!((0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&e));
        assert!(out.table.get_f64(r, "ci_low").unwrap() <= e && e <= out.table.get_f64(r, "ci_high").unwrap());
    }
}

#[test]
fn equal_models_mse_matches_reference_values() {
    let cfg = ExperimentConfig::from_json(
        r#"{"kind": "mse", "rho": [0.6, 0.6], "c": [0.3333333333333333], "M": [80], "metrics": ["le"], "trials": 1000, "seed": 9}"#,
    )
    .unwrap();
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.table.get_f64(0, "N"), Some(240.0));
    let plug = out.table.get_f64(0, "mse").unwrap();
    let cons = out.table.get_f64(1, "mse").unwrap();
    assert!((cons / 4.9e-4 - 1.0).abs() < 0.5, "{cons}");
    assert!((plug / 0.569 - 1.0).abs() < 0.2, "{plug}");
}
