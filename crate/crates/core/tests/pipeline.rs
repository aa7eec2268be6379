use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use drglm::estimators::{
    aipw_from_weighted_fit, fit_bundle, iptw_glm_ate, iptw_glm_from_bundle, standardize,
    EstimatorConfig,
};
use drglm::formula::parse;
use drglm::glm::{fit_formula, Family, GlmOptions, Link};
use drglm::inference::{bootstrap_ci, BootstrapOptions};
use drglm::propensity::weight_diagnostics;
use drglm::simlab::{
    generate, run_replicate, run_scenario, summary_table, Dgp, Estimator, ModelSpec, ScenarioSpec,
};
use drglm::tabular::{read_csv_path, Dataset};
use drglm::Execution;

fn data(dgp: Dgp, n: usize, seed: u64) -> Dataset {
    generate(dgp, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn config(dgp: Dgp) -> EstimatorConfig {
    ScenarioSpec::new(dgp, ModelSpec::Correct, ModelSpec::Misspecified).estimator_config()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ate_invariant_to_weight_scale(seed in 0u64..1000, scale in 0.01f64..100.0) {
        let ds = data(Dgp::Poisson, 300, seed);
        let cfg = config(Dgp::Poisson);
        let b = fit_bundle(&cfg, &ds).unwrap();
        let scaled: Vec<f64> = b.weights.iter().map(|w| w * scale).collect();
        let refit = fit_formula(&cfg.outcome, &ds, Some(&scaled), Family::Poisson, Link::Log, &GlmOptions::default()).unwrap();
        let s0 = standardize(&b.outcome, &ds, "x").unwrap();
        let s1 = standardize(&refit, &ds, "x").unwrap();
        prop_assert!(((s0.mu1 - s0.mu0) - (s1.mu1 - s1.mu0)).abs() < 1e-8);
    }

    #[test]
    fn weights_and_ess_bounds(seed in 0u64..1000) {
        let ds = data(Dgp::Bernoulli, 250, seed);
        let b = fit_bundle(&config(Dgp::Bernoulli), &ds).unwrap();
        let d = weight_diagnostics(&b.weights, &b.scores, ds.binary("x").unwrap());
        prop_assert!(b.weights.iter().all(|w| *w >= 1.0));
        prop_assert!(d.ess <= 250.0 + 1e-9);
        prop_assert!(d.ess_treated + d.ess_control <= 250.0 + 1e-9);
    }

    #[test]
    fn weighted_aipw_collapses_for_canonical_links(seed in 0u64..1000, k in 0usize..4) {
        let dgp = [Dgp::Gaussian, Dgp::Bernoulli, Dgp::Poisson, Dgp::InverseGaussian][k];
        let ds = data(dgp, 400, seed);
        let b = fit_bundle(&config(dgp), &ds).unwrap();
        let a = aipw_from_weighted_fit(&b, &ds, "x").unwrap().ate;
        let g = iptw_glm_from_bundle(&b, &ds, "x").unwrap().ate;
        prop_assert!((a - g).abs() < 1e-9);
    }
}

#[test]
fn bootstrap_schedule_does_not_change_results() {
    let ds = data(Dgp::Gaussian, 300, 4);
    let cfg = config(Dgp::Gaussian);
    let run = |execution| {
        let opts = BootstrapOptions { replicates: 40, seed: 17, execution, ..Default::default() };
        bootstrap_ci(&ds, &opts, |d| Ok(iptw_glm_ate(&cfg, d)?.ate)).unwrap()
    };
    let p = run(Execution::Parallel);
    let s = run(Execution::Sequential);
    assert_eq!(p.estimates, s.estimates);
    assert_eq!(p.ci, s.ci);
    assert!(p.ci.0 < p.ci.1);
}

#[test]
fn replicates_are_pure() {
    let spec = ScenarioSpec {
        n: 300,
        replicates: 4,
        seed: 8,
        bootstrap: Some(10),
        estimators: vec![Estimator::IptwGlm, Estimator::Aipw],
        ..ScenarioSpec::new(Dgp::Bernoulli, ModelSpec::Misspecified, ModelSpec::Correct)
    };
    assert_eq!(run_replicate(&spec, 2).unwrap(), run_replicate(&spec, 2).unwrap());
    let a = run_scenario(&spec, Execution::Parallel).unwrap();
    let b = run_scenario(&spec, Execution::Sequential).unwrap();
    assert_eq!(a, b);
}

#[test]
fn csv_round_trip_preserves_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let ds = data(Dgp::InverseGaussian, 300, 21);
    ds.write_csv_path(&path).unwrap();
    let back = read_csv_path(&path, &Default::default()).unwrap();
    let cfg = config(Dgp::InverseGaussian);
    let a = iptw_glm_ate(&cfg, &ds).unwrap().ate;
    let b = iptw_glm_ate(&cfg, &back).unwrap().ate;
    assert_eq!(a, b);
}

#[test]
fn categorical_confounder_interactions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cat.csv");
    let mut text = String::from("y,x,grp,z\n");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    use rand::Rng;
    for _ in 0..400 {
        let g = ["a", "b", "c"][rng.random_range(0..3)];
        let z: f64 = rng.random_range(-1.0..1.0);
        let shift = match g { "a" => 0.0, "b" => 0.5, _ => -0.5 };
        let x = u8::from(rng.random_bool(0.3 + 0.3 * (shift + 0.5)));
        let y = 1.0 + 2.0 * f64::from(x) + shift + z + rng.random_range(-0.5..0.5);
        text += &format!("{y},{x},{g},{z}\n");
    }
    std::fs::write(&path, text).unwrap();
    let ds = read_csv_path(&path, &Default::default()).unwrap();
    let cfg = EstimatorConfig::new(
        parse("y ~ x * (grp + z)").unwrap(),
        parse("x ~ grp + z").unwrap(),
        Family::Gaussian,
    );
    let est = iptw_glm_ate(&cfg, &ds).unwrap();
    assert!((est.ate - 2.0).abs() < 0.2, "{}", est.ate);
    assert_eq!(est.n, 400);
}

#[test]
fn summaries_serialize() {
    let spec = ScenarioSpec { n: 200, replicates: 3, ..ScenarioSpec::new(Dgp::Gaussian, ModelSpec::Correct, ModelSpec::Correct) };
    let s = run_scenario(&spec, Execution::Sequential).unwrap();
    let v = serde_json::to_value(&s).unwrap();
    assert_eq!(v["dgp"], "gaussian");
    assert_eq!(v["estimators"][0]["estimator"], "iptw_glm");
    let t = summary_table(&[s]);
    assert_eq!(t.rows.len(), 1);
    assert!(t.to_text().contains("right both"));
}
