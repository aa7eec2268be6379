use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use drglm::estimators::{fit_bundle, iptw_glm_from_bundle};
use drglm::inference::{bootstrap_ci, BootstrapOptions};
use drglm::simlab::{generate, run_scenario, Dgp, ModelSpec, ScenarioSpec};
use drglm::Execution;

const MODES: [(&str, Execution); 2] = [
    ("parallel", Execution::Parallel),
    ("sequential", Execution::Sequential),
];

fn monte_carlo(c: &mut Criterion) {
    let mut g = c.benchmark_group("monte_carlo_replicates");
    g.sample_size(10);
    for dgp in [Dgp::Gaussian, Dgp::Bernoulli] {
        let spec = ScenarioSpec {
            n: 1000,
            replicates: 64,
            seed: 5,
            ..ScenarioSpec::new(dgp, ModelSpec::Correct, ModelSpec::Misspecified)
        };
        for (name, exec) in MODES {
            g.bench_with_input(BenchmarkId::new(name, dgp.label()), &spec, |b, spec| {
                b.iter(|| black_box(run_scenario(spec, exec).unwrap()))
            });
        }
    }
    g.finish();
}

fn bootstrap(c: &mut Criterion) {
    let mut g = c.benchmark_group("bootstrap");
    g.sample_size(10);
    let ds = generate(Dgp::Bernoulli, 2000, &mut ChaCha8Rng::seed_from_u64(3));
    let cfg = ScenarioSpec::new(Dgp::Bernoulli, ModelSpec::Correct, ModelSpec::Correct).estimator_config();
    for (name, exec) in MODES {
        let opts = BootstrapOptions {
            replicates: 100,
            seed: 9,
            execution: exec,
            ..Default::default()
        };
        g.bench_function(BenchmarkId::new(name, "logit_n2000_b100"), |b| {
            b.iter(|| {
                black_box(
                    bootstrap_ci(&ds, &opts, |d| {
                        let bundle = fit_bundle(&cfg, d)?;
                        Ok(iptw_glm_from_bundle(&bundle, d, "x")?.ate)
                    })
                    .unwrap(),
                )
            })
        });
    }
    g.finish();
}

criterion_group!(benches, monte_carlo, bootstrap);
criterion_main!(benches);
