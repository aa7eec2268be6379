//! Monte Carlo laboratory: data-generating processes, scenario runs and the
//! summary tables built from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, InverseGaussian, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{aipw_ate, fit_bundle, iptw_glm_from_bundle, AipwMode, EstimatorConfig};
use crate::exec::Execution;
use crate::formula::{parse, FormulaAst};
use crate::glm::{expit, Family, Link};
use crate::inference::{bootstrap_ci, influence_se, resample_rng, BootstrapOptions, InfluenceMode};
use crate::tabular::{Column, Dataset};

/// Data-generating processes of the simulation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dgp {
    Gaussian,
    InverseGaussian,
    Poisson,
    Bernoulli,
    /// Bernoulli outcome analysed with a log link.
    LogBinomial,
    /// Confounding through a covariate missing from both working models.
    ResidualConfounding,
}

impl Dgp {
    pub const ALL: [Dgp; 6] = [
        Dgp::Gaussian,
        Dgp::InverseGaussian,
        Dgp::Poisson,
        Dgp::Bernoulli,
        Dgp::LogBinomial,
        Dgp::ResidualConfounding,
    ];

    /// (γ₀, β, γ₁, γ₂, γ₃) of η = γ₀ + βX + γ₁Z₁ + γ₂Z₁² + γ₃Z₂.
    pub fn coefficients(self) -> Option<[f64; 5]> {
        match self {
            Dgp::Gaussian => Some([-2.0, 2.0, 1.0, 0.4, 1.5]),
            Dgp::InverseGaussian => Some([50.0, 200.0, 4.0, 10.0, 5.0]),
            Dgp::Poisson => Some([0.0, 2.0, 0.1, 0.05, 0.4]),
            Dgp::Bernoulli => Some([-2.0, 2.0, 1.0, 1.0, 4.0]),
            Dgp::LogBinomial => Some([-3.0, 8.7, -10.0, 1.0, -1.0]),
            Dgp::ResidualConfounding => None,
        }
    }

    /// Family and link used to analyse data from this process.
    pub fn analysis_model(self) -> (Family, Link) {
        match self {
            Dgp::Gaussian | Dgp::ResidualConfounding => (Family::Gaussian, Link::Identity),
            Dgp::InverseGaussian => (Family::InverseGaussian, Link::InverseSquared),
            Dgp::Poisson => (Family::Poisson, Link::Log),
            Dgp::Bernoulli => (Family::Binomial, Link::Logit),
            Dgp::LogBinomial => (Family::Binomial, Link::Log),
        }
    }

    /// Mean of Y given the linear predictor.
    fn mean(self, eta: f64) -> f64 {
        match self {
            Dgp::Gaussian | Dgp::ResidualConfounding => eta,
            Dgp::InverseGaussian => 1.0 / eta.sqrt(),
            Dgp::Poisson => eta.exp(),
            Dgp::Bernoulli | Dgp::LogBinomial => expit(eta),
        }
    }

    /// The average causal effect, from 120-point Gauss–Hermite quadrature
    /// over (Z₁, Z₂); exact for the additive processes.
    pub fn true_ate(self) -> f64 {
        match self {
            Dgp::Gaussian | Dgp::ResidualConfounding => 2.0,
            Dgp::InverseGaussian => -0.06458625722152539,
            Dgp::Poisson => 10.94433921054681,
            Dgp::Bernoulli => 0.12126610374119441,
            Dgp::LogBinomial => 0.3331562148045476,
        }
    }

    /// Row label used in tables.
    pub fn label(self) -> &'static str {
        match self {
            Dgp::Gaussian => "linear",
            Dgp::InverseGaussian => "inverse_gaussian",
            Dgp::Poisson => "log_poisson",
            Dgp::Bernoulli => "logit_binomial",
            Dgp::LogBinomial => "log_binomial",
            Dgp::ResidualConfounding => "residual_confounding",
        }
    }
}

fn exposure_probability(z1: f64, z2: f64) -> f64 {
    expit(-0.4 + 0.4 * z1 + 0.28 * z1 * z1 + 0.4 * z2)
}

/// Draw `n` rows. Columns are `y, x, z1, z2` (or `y, x, c, v` for the
/// residual-confounding process).
pub fn generate<R: Rng + ?Sized>(dgp: Dgp, n: usize, rng: &mut R) -> Dataset {
    let mut y = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let Some(g) = dgp.coefficients() else {
        let bern = Bernoulli::new(0.35).expect("valid probability");
        for _ in 0..n {
            let v = bern.sample(rng) as u8 as f64;
            let c: f64 = rng.sample(StandardNormal);
            let p = expit(-0.4 + 4.0 * c + 0.28 * c * c + 0.4 * v);
            let xi = rng.random_bool(p) as u8 as f64;
            y.push(-2.0 + 2.0 * xi + c + 4.5 * v + rng.sample::<f64, _>(StandardNormal));
            x.push(xi);
            a.push(c);
            b.push(v);
        }
        return Dataset::from_columns([
            ("y", Column::Numeric(y)),
            ("x", Column::Numeric(x)),
            ("c", Column::Numeric(a)),
            ("v", Column::Numeric(b)),
        ])
        .expect("generated columns are consistent");
    };
    let mut rejected = 0usize;
    while y.len() < n {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = 1.0 + rng.sample::<f64, _>(StandardNormal);
        let xi = rng.random_bool(exposure_probability(z1, z2)) as u8 as f64;
        let eta = g[0] + g[1] * xi + g[2] * z1 + g[3] * z1 * z1 + g[4] * z2;
        let yi = match dgp {
            Dgp::Gaussian => eta + rng.sample::<f64, _>(StandardNormal),
            Dgp::InverseGaussian => {
                if eta <= 0.0 {
                    rejected += 1;
                    continue;
                }
                InverseGaussian::new(dgp.mean(eta), 2.0)
                    .expect("positive mean and shape")
                    .sample(rng)
            }
            Dgp::Poisson => Poisson::new(dgp.mean(eta)).expect("positive rate").sample(rng),
            Dgp::Bernoulli | Dgp::LogBinomial => rng.random_bool(dgp.mean(eta)) as u8 as f64,
            Dgp::ResidualConfounding => unreachable!(),
        };
        y.push(yi);
        x.push(xi);
        a.push(z1);
        b.push(z2);
    }
    if rejected > 0 {
        log::warn!("{}: redrew {rejected} rows with non-positive linear predictor", dgp.label());
    }
    Dataset::from_columns([
        ("y", Column::Numeric(y)),
        ("x", Column::Numeric(x)),
        ("z1", Column::Numeric(a)),
        ("z2", Column::Numeric(b)),
    ])
    .expect("generated columns are consistent")
}

/// Monte Carlo estimate of the average causal effect from `reps` covariate
/// draws: (mean, standard error).
pub fn monte_carlo_ate<R: Rng + ?Sized>(dgp: Dgp, reps: usize, rng: &mut R) -> (f64, f64) {
    let Some(g) = dgp.coefficients() else {
        return (2.0, 0.0);
    };
    let normal = Normal::new(1.0, 1.0).expect("valid normal");
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..reps {
        let z1: f64 = rng.sample(StandardNormal);
        let z2 = normal.sample(rng);
        let base = g[0] + g[2] * z1 + g[3] * z1 * z1 + g[4] * z2;
        let d = dgp.mean(base + g[1]) - dgp.mean(base);
        s += d;
        s2 += d * d;
    }
    let r = reps as f64;
    let mean = s / r;
    (mean, ((s2 / r - mean * mean) / (r - 1.0)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    Correct,
    Misspecified,
}

/// Row label of a misspecification cell.
pub fn cell_label(ps: ModelSpec, outcome: ModelSpec) -> &'static str {
    match (outcome, ps) {
        (ModelSpec::Misspecified, ModelSpec::Correct) => "wrong outcome right weights",
        (ModelSpec::Correct, ModelSpec::Misspecified) => "right outcome wrong weights",
        (ModelSpec::Misspecified, ModelSpec::Misspecified) => "both wrong",
        (ModelSpec::Correct, ModelSpec::Correct) => "right both",
    }
}

/// Working formulas (outcome, propensity) for a process and cell.
pub fn working_formulas(dgp: Dgp, ps: ModelSpec, outcome: ModelSpec) -> (FormulaAst, FormulaAst) {
    let (o, p) = if dgp == Dgp::ResidualConfounding {
        ("y ~ x + c", "x ~ v")
    } else {
        (
            match outcome {
                ModelSpec::Correct => "y ~ x + z1 + I(z1^2) + z2",
                ModelSpec::Misspecified => "y ~ x + z1",
            },
            match ps {
                ModelSpec::Correct => "x ~ z1 + I(z1^2) + z2",
                ModelSpec::Misspecified => "x ~ z1",
            },
        )
    };
    (parse(o).expect("valid formula"), parse(p).expect("valid formula"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    IptwGlm,
    Aipw,
}

/// One cell of a simulation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub dgp: Dgp,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Analysis family and link; default to the process's own.
    #[serde(default)]
    pub family: Option<Family>,
    #[serde(default)]
    pub link: Option<Link>,
    #[serde(default = "correct")]
    pub ps: ModelSpec,
    #[serde(default = "correct")]
    pub outcome: ModelSpec,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    /// Bootstrap replicates per simulated dataset; no bootstrap when absent.
    #[serde(default)]
    pub bootstrap: Option<usize>,
    /// Influence-function standard errors for the IPTW GLM estimate.
    #[serde(default)]
    pub influence: Option<InfluenceMode>,
    #[serde(default)]
    pub aipw_mode: AipwMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_n() -> usize {
    2000
}
fn default_replicates() -> usize {
    500
}
fn correct() -> ModelSpec {
    ModelSpec::Correct
}
fn default_estimators() -> Vec<Estimator> {
    vec![Estimator::IptwGlm]
}

impl ScenarioSpec {
    pub fn new(dgp: Dgp, ps: ModelSpec, outcome: ModelSpec) -> Self {
        ScenarioSpec {
            name: None,
            dgp,
            n: default_n(),
            replicates: default_replicates(),
            family: None,
            link: None,
            ps,
            outcome,
            estimators: default_estimators(),
            bootstrap: None,
            influence: None,
            aipw_mode: AipwMode::default(),
            seed: 0,
        }
    }

    pub fn label(&self) -> String {
        match &self.name {
            Some(n) => n.clone(),
            None if self.dgp == Dgp::ResidualConfounding => "residual confounding".into(),
            None => cell_label(self.ps, self.outcome).into(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.replicates < 1 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.n < 10 {
            return Err(Error::Config(format!("n must be at least 10, got {}", self.n)));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("at least one estimator is required".into()));
        }
        if matches!(self.bootstrap, Some(b) if b < 2) {
            return Err(Error::Config("bootstrap needs at least 2 replicates".into()));
        }
        Ok(())
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        let (fam, link) = self.dgp.analysis_model();
        let family = self.family.unwrap_or(fam);
        let link = self.link.unwrap_or(if self.family.is_some() {
            family.canonical_link()
        } else {
            link
        });
        let (o, p) = working_formulas(self.dgp, self.ps, self.outcome);
        let mut cfg = EstimatorConfig::new(o, p, family).with_link(link);
        cfg.aipw_mode = self.aipw_mode;
        cfg
    }
}

/// Results of one estimator on one simulated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReplicateEstimate {
    pub estimator: Estimator,
    pub estimate: f64,
    pub boot_ci: Option<(f64, f64)>,
    pub boot_se: Option<f64>,
    pub if_ci: Option<(f64, f64)>,
    pub if_se: Option<f64>,
    pub eif_only_se: Option<f64>,
}

/// Seed of the bootstrap inside replicate `r`, distinct from the data stream.
fn bootstrap_seed(seed: u64, r: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0xD1B5_4A32_D192_ED03)
        .rotate_left(17)
        ^ (r as u64)
}

/// Run replicate `r` of a scenario. A pure function of `(spec, r)`.
pub fn run_replicate(spec: &ScenarioSpec, r: usize) -> Result<Vec<ReplicateEstimate>> {
    let mut rng = resample_rng(spec.seed, r);
    let ds = generate(spec.dgp, spec.n, &mut rng);
    let cfg = spec.estimator_config();
    let mut out = Vec::with_capacity(spec.estimators.len());
    for &est in &spec.estimators {
        let mut rec = ReplicateEstimate {
            estimator: est,
            estimate: f64::NAN,
            boot_ci: None,
            boot_se: None,
            if_ci: None,
            if_se: None,
            eif_only_se: None,
        };
        let statistic = |d: &Dataset| -> Result<f64> {
            match est {
                Estimator::IptwGlm => {
                    let bundle = fit_bundle(&cfg, d)?;
                    Ok(iptw_glm_from_bundle(&bundle, d, cfg.exposure())?.ate)
                }
                Estimator::Aipw => Ok(aipw_ate(&cfg, d)?.ate),
            }
        };
        match est {
            Estimator::IptwGlm => {
                let bundle = fit_bundle(&cfg, &ds)?;
                rec.estimate = iptw_glm_from_bundle(&bundle, &ds, cfg.exposure())?.ate;
                if let Some(mode) = spec.influence {
                    let d = influence_se(&cfg, &bundle, &ds, mode)?;
                    rec.if_ci = Some(d.ci(1.96));
                    rec.if_se = Some(d.se);
                    rec.eif_only_se = Some(d.eif_only_se);
                }
            }
            Estimator::Aipw => rec.estimate = aipw_ate(&cfg, &ds)?.ate,
        }
        if let Some(b) = spec.bootstrap {
            let opts = BootstrapOptions {
                replicates: b,
                seed: bootstrap_seed(spec.seed, r),
                execution: Execution::Sequential,
                ..Default::default()
            };
            let res = bootstrap_ci(&ds, &opts, statistic)?;
            rec.boot_ci = Some(res.ci);
            rec.boot_se = Some(res.se);
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub mean: f64,
    pub bias: f64,
    /// 100 · bias / |true ATE|.
    pub percent_bias: f64,
    pub sd: f64,
    pub coverage_boot: Option<f64>,
    pub coverage_if: Option<f64>,
    pub mean_boot_se: Option<f64>,
    pub mean_if_se: Option<f64>,
    pub mean_eif_only_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimSummary {
    pub label: String,
    pub dgp: Dgp,
    pub n: usize,
    pub replicates: usize,
    pub failed: usize,
    pub true_ate: f64,
    pub seed: u64,
    pub estimators: Vec<EstimatorSummary>,
}

impl SimSummary {
    pub fn estimator(&self, e: Estimator) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.estimator == e)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

fn coverage(cis: &[(f64, f64)], truth: f64) -> f64 {
    100.0 * cis.iter().filter(|(l, u)| *l <= truth && truth <= *u).count() as f64 / cis.len() as f64
}

/// Run every replicate and summarize. Fails if more than 1% of replicates
/// hit a numerical fit failure.
pub fn run_scenario(spec: &ScenarioSpec, exec: Execution) -> Result<SimSummary> {
    spec.validate()?;
    let results = exec.map(spec.replicates, |r| run_replicate(spec, r));
    let mut ok = Vec::with_capacity(results.len());
    let mut failed = 0;
    for res in results {
        match res {
            Ok(v) => ok.push(v),
            Err(e) if e.is_fit_failure() || matches!(e, Error::BootstrapFailures { .. }) => {
                log::debug!("replicate failed: {e}");
                failed += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if failed * 100 > spec.replicates || ok.is_empty() {
        return Err(Error::ScenarioFailures {
            scenario: spec.label(),
            failed,
            replicates: spec.replicates,
        });
    }
    let truth = spec.dgp.true_ate();
    let estimators = spec
        .estimators
        .iter()
        .enumerate()
        .map(|(k, &est)| {
            let recs: Vec<&ReplicateEstimate> = ok.iter().map(|v| &v[k]).collect();
            let est_v: Vec<f64> = recs.iter().map(|r| r.estimate).collect();
            let opt = |f: fn(&ReplicateEstimate) -> Option<f64>| -> Option<f64> {
                let v: Option<Vec<f64>> = recs.iter().map(|r| f(r)).collect();
                v.map(|v| mean(&v))
            };
            let cov = |f: fn(&ReplicateEstimate) -> Option<(f64, f64)>| -> Option<f64> {
                let v: Option<Vec<(f64, f64)>> = recs.iter().map(|r| f(r)).collect();
                v.map(|v| coverage(&v, truth))
            };
            let m = mean(&est_v);
            EstimatorSummary {
                estimator: est,
                mean: m,
                bias: m - truth,
                percent_bias: 100.0 * (m - truth) / truth.abs(),
                sd: if est_v.len() > 1 { sd(&est_v) } else { f64::NAN },
                coverage_boot: cov(|r| r.boot_ci),
                coverage_if: cov(|r| r.if_ci),
                mean_boot_se: opt(|r| r.boot_se),
                mean_if_se: opt(|r| r.if_se),
                mean_eif_only_se: opt(|r| r.eif_only_se),
            }
        })
        .collect();
    Ok(SimSummary {
        label: spec.label(),
        dgp: spec.dgp,
        n: spec.n,
        replicates: spec.replicates,
        failed,
        true_ate: truth,
        seed: spec.seed,
        estimators,
    })
}

/// The three misspecification cells compared in the efficiency table.
pub const EFFICIENCY_CELLS: [(ModelSpec, ModelSpec); 3] = [
    (ModelSpec::Misspecified, ModelSpec::Correct),
    (ModelSpec::Misspecified, ModelSpec::Misspecified),
    (ModelSpec::Correct, ModelSpec::Misspecified),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyRow {
    pub n: usize,
    pub dgp: Dgp,
    pub cell: String,
    pub sd_iptw_glm: f64,
    pub sd_aipw: f64,
}

/// Standard deviations of the IPTW GLM and AIPW estimates over replicates,
/// for each sample size, process and misspecified cell.
pub fn run_efficiency_grid(
    ns: &[usize],
    dgps: &[Dgp],
    replicates: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<EfficiencyRow>> {
    let mut rows = Vec::new();
    for &n in ns {
        for &dgp in dgps {
            for (ps, outcome) in EFFICIENCY_CELLS {
                let spec = ScenarioSpec {
                    n,
                    replicates,
                    seed,
                    estimators: vec![Estimator::IptwGlm, Estimator::Aipw],
                    ..ScenarioSpec::new(dgp, ps, outcome)
                };
                let s = run_scenario(&spec, exec)?;
                rows.push(EfficiencyRow {
                    n,
                    dgp,
                    cell: cell_label(ps, outcome).into(),
                    sd_iptw_glm: s.estimator(Estimator::IptwGlm).expect("requested").sd,
                    sd_aipw: s.estimator(Estimator::Aipw).expect("requested").sd,
                });
            }
        }
    }
    Ok(rows)
}

/// All four cells in table order.
pub const ALL_CELLS: [(ModelSpec, ModelSpec); 4] = [
    (ModelSpec::Correct, ModelSpec::Misspecified),
    (ModelSpec::Misspecified, ModelSpec::Correct),
    (ModelSpec::Misspecified, ModelSpec::Misspecified),
    (ModelSpec::Correct, ModelSpec::Correct),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeComparisonRow {
    pub dgp: Dgp,
    pub cell: String,
    pub emp_se: f64,
    pub eif_se: f64,
    pub infl_se: f64,
}

/// Empirical SD of the IPTW GLM estimate against the mean EIF-only and full
/// influence-function standard errors.
pub fn run_se_comparison(
    dgps: &[Dgp],
    cells: &[(ModelSpec, ModelSpec)],
    n: usize,
    replicates: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<SeComparisonRow>> {
    let mut rows = Vec::new();
    for &dgp in dgps {
        for &(ps, outcome) in cells {
            let spec = ScenarioSpec {
                n,
                replicates,
                seed,
                influence: Some(InfluenceMode::SupplementCompatible),
                ..ScenarioSpec::new(dgp, ps, outcome)
            };
            let s = run_scenario(&spec, exec)?;
            let e = s.estimator(Estimator::IptwGlm).expect("requested");
            rows.push(SeComparisonRow {
                dgp,
                cell: cell_label(ps, outcome).into(),
                emp_se: e.sd,
                eif_se: e.mean_eif_only_se.expect("influence requested"),
                infl_se: e.mean_if_se.expect("influence requested"),
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfficiencyConfig {
    #[serde(default = "default_efficiency_ns")]
    pub ns: Vec<usize>,
    #[serde(default = "default_efficiency_dgps")]
    pub dgps: Vec<Dgp>,
    #[serde(default)]
    pub replicates: Option<usize>,
}

fn default_efficiency_ns() -> Vec<usize> {
    vec![100, 500, 1000, 2000]
}
fn default_efficiency_dgps() -> Vec<Dgp> {
    vec![Dgp::Gaussian, Dgp::Bernoulli]
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeComparisonConfig {
    #[serde(default = "default_se_dgps")]
    pub dgps: Vec<Dgp>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub replicates: Option<usize>,
}

fn default_se_dgps() -> Vec<Dgp> {
    vec![Dgp::Gaussian, Dgp::Poisson, Dgp::Bernoulli, Dgp::InverseGaussian]
}

/// A simulation study read from TOML: a list of `[[scenario]]` tables plus
/// optional `[efficiency]` and `[se_comparison]` grids.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub replicates: Option<usize>,
    #[serde(default, rename = "scenario")]
    pub scenarios: Vec<ScenarioSpec>,
    #[serde(default)]
    pub efficiency: Option<EfficiencyConfig>,
    #[serde(default)]
    pub se_comparison: Option<SeComparisonConfig>,
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Apply the top-level `seed`/`replicates` and command-line overrides
    /// (which win) to every scenario and grid.
    pub fn resolve(mut self, replicates: Option<usize>, seed: Option<u64>) -> Self {
        let reps = replicates.or(self.replicates);
        let seed = seed.or(self.seed);
        for s in &mut self.scenarios {
            if let Some(r) = reps {
                s.replicates = r;
            }
            if let Some(seed) = seed {
                s.seed = seed;
            }
        }
        if let Some(e) = &mut self.efficiency {
            e.replicates = reps.or(e.replicates);
        }
        if let Some(e) = &mut self.se_comparison {
            e.replicates = reps.or(e.replicates);
        }
        self.seed = seed;
        self.replicates = reps;
        self
    }
}

/// Everything a simulation config produces.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SimReport {
    pub scenarios: Vec<SimSummary>,
    pub efficiency: Vec<EfficiencyRow>,
    pub se_comparison: Vec<SeComparisonRow>,
}

pub fn run_config(cfg: &SimConfig, exec: Execution) -> Result<SimReport> {
    let seed = cfg.seed.unwrap_or(0);
    let reps = cfg.replicates.unwrap_or_else(default_replicates);
    let mut report = SimReport::default();
    for s in &cfg.scenarios {
        report.scenarios.push(run_scenario(s, exec)?);
    }
    if let Some(e) = &cfg.efficiency {
        report.efficiency = run_efficiency_grid(&e.ns, &e.dgps, e.replicates.unwrap_or(reps), seed, exec)?;
    }
    if let Some(e) = &cfg.se_comparison {
        report.se_comparison =
            run_se_comparison(&e.dgps, &ALL_CELLS, e.n, e.replicates.unwrap_or(reps), seed, exec)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

/// A rectangular table of formatted cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }

    /// Space-aligned text: first column left-aligned, the rest right-aligned.
    pub fn to_text(&self) -> String {
        let ncol = self.headers.len();
        let mut width = vec![0; ncol];
        for r in std::iter::once(&self.headers).chain(&self.rows) {
            for (j, c) in r.iter().enumerate() {
                width[j] = width[j].max(c.chars().count());
            }
        }
        let mut out = String::new();
        for r in std::iter::once(&self.headers).chain(&self.rows) {
            let mut line = String::new();
            for (j, c) in r.iter().enumerate() {
                if j > 0 {
                    line.push_str("  ");
                }
                if j == 0 {
                    let _ = write!(line, "{c:<w$}", w = width[j]);
                } else {
                    let _ = write!(line, "{c:>w$}", w = width[j]);
                }
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "NA".into(), |v| format!("{v:.digits$}"))
}

fn fmt_sd(v: f64) -> String {
    if v < 0.01 {
        "<0.01".into()
    } else {
        format!("{v:.2}")
    }
}

/// Bias/coverage table: one row per scenario and estimator.
pub fn summary_table(summaries: &[SimSummary]) -> Table {
    let headers = [
        "setting", "type", "estimator", "n", "true value", "percent bias (SD)", "coverage boot",
        "coverage IF", "failed",
    ];
    let mut rows = Vec::new();
    for s in summaries {
        for e in &s.estimators {
            rows.push(vec![
                s.dgp.label().to_owned(),
                s.label.clone(),
                match e.estimator {
                    Estimator::IptwGlm => "iptw_glm",
                    Estimator::Aipw => "aipw",
                }
                .to_owned(),
                s.n.to_string(),
                format!("{:.2}", s.true_ate),
                format!("{:.1} ({})", e.percent_bias, fmt_sd(e.sd)),
                fmt_opt(e.coverage_boot, 1),
                fmt_opt(e.coverage_if, 1),
                s.failed.to_string(),
            ]);
        }
    }
    Table {
        headers: headers.iter().map(|h| h.to_string()).collect(),
        rows,
    }
}

/// Standard deviations laid out as in the efficiency table: one row per
/// (n, cell), one column pair per process.
pub fn efficiency_table(rows: &[EfficiencyRow]) -> Table {
    let mut dgps: Vec<Dgp> = rows.iter().map(|r| r.dgp).collect();
    dgps.sort();
    dgps.dedup();
    let mut headers = vec!["n".to_owned(), "type".to_owned()];
    for d in &dgps {
        headers.push(format!("GLM {}", d.label()));
        headers.push(format!("AIPW {}", d.label()));
    }
    let mut grouped: BTreeMap<(usize, usize), Vec<String>> = BTreeMap::new();
    let cell_order = |c: &str| EFFICIENCY_CELLS.iter().position(|(p, o)| cell_label(*p, *o) == c).unwrap_or(9);
    for r in rows {
        let entry = grouped.entry((r.n, cell_order(&r.cell))).or_insert_with(|| {
            let mut v = vec![r.n.to_string(), r.cell.clone()];
            v.resize(2 + 2 * dgps.len(), "NA".into());
            v
        });
        let j = dgps.iter().position(|d| *d == r.dgp).expect("collected above");
        entry[2 + 2 * j] = format!("{:.3}", r.sd_iptw_glm);
        entry[3 + 2 * j] = format!("{:.3}", r.sd_aipw);
    }
    Table {
        headers,
        rows: grouped.into_values().collect(),
    }
}

pub fn se_comparison_table(rows: &[SeComparisonRow]) -> Table {
    Table {
        headers: ["setting", "type", "emp.se", "eif.se", "infl.se"].iter().map(|h| h.to_string()).collect(),
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    r.dgp.label().to_owned(),
                    r.cell.clone(),
                    format!("{:.3}", r.emp_se),
                    format!("{:.3}", r.eif_se),
                    format!("{:.3}", r.infl_se),
                ]
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dgp in Dgp::ALL {
            let ds = generate(dgp, 50, &mut rng);
            assert_eq!(ds.n_rows(), 50);
            assert!(ds.binary("x").is_ok());
            let y = ds.numeric("y").unwrap();
            assert!(y.iter().all(|v| v.is_finite()));
            match dgp {
                Dgp::Bernoulli | Dgp::LogBinomial => assert!(ds.binary("y").is_ok()),
                Dgp::InverseGaussian => assert!(y.iter().all(|&v| v > 0.0)),
                Dgp::Poisson => assert!(y.iter().all(|&v| v >= 0.0 && v.fract() == 0.0)),
                _ => {}
            }
        }
    }

    #[test]
    fn quadrature_truths_agree_with_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for dgp in Dgp::ALL {
            let (m, se) = monte_carlo_ate(dgp, 1_000_000, &mut rng);
            assert!((m - dgp.true_ate()).abs() <= 4.0 * se + 1e-12, "{dgp:?}: {m} ± {se}");
        }
        // the reported truths, to the precision they are given
        assert!((Dgp::Poisson.true_ate() - 10.94).abs() < 0.005);
        assert!((Dgp::Bernoulli.true_ate() - 0.12).abs() < 0.005);
        assert!((Dgp::InverseGaussian.true_ate() + 0.06).abs() < 0.005);
        assert!((Dgp::LogBinomial.true_ate() - 0.33).abs() < 0.005);
    }

    #[test]
    fn exposure_model_recovered_at_large_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = generate(Dgp::Gaussian, 20_000, &mut rng);
        let m = crate::propensity::fit_propensity(
            &parse("x ~ z1 + I(z1^2) + z2").unwrap(),
            &ds,
            &Default::default(),
        )
        .unwrap();
        let truth = [-0.4, 0.4, 0.28, 0.4];
        for (b, t) in m.fit.coefficients.iter().zip(truth) {
            assert!((b - t).abs() < 0.08, "{b} vs {t}");
        }
    }

    #[test]
    fn replicates_are_reproducible_in_isolation() {
        let spec = ScenarioSpec {
            n: 200,
            replicates: 4,
            seed: 5,
            bootstrap: Some(20),
            influence: Some(InfluenceMode::SupplementCompatible),
            estimators: vec![Estimator::IptwGlm, Estimator::Aipw],
            ..ScenarioSpec::new(Dgp::Gaussian, ModelSpec::Correct, ModelSpec::Misspecified)
        };
        let a = run_replicate(&spec, 2).unwrap();
        let b = run_replicate(&spec, 2).unwrap();
        assert_eq!(a, b);
        let par = run_scenario(&spec, Execution::Parallel).unwrap();
        let seq = run_scenario(&spec, Execution::Sequential).unwrap();
        assert_eq!(par, seq);
    }

    #[test]
    fn config_parsing_and_overrides() {
        let cfg = SimConfig::from_toml(
            r#"
            seed = 3
            replicates = 100
            [[scenario]]
            dgp = "bernoulli"
            ps = "misspecified"
            outcome = "misspecified"
            bootstrap = 50
            "#,
        )
        .unwrap()
        .resolve(Some(10), None);
        assert_eq!(cfg.scenarios[0].replicates, 10);
        assert_eq!(cfg.scenarios[0].seed, 3);
        assert_eq!(cfg.scenarios[0].label(), "both wrong");
        let err = SimConfig::from_toml("[[scenario]]\ndgp = \"gaussian\"\nbogus_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn tables_render() {
        let t = Table {
            headers: vec!["a".into(), "bb".into()],
            rows: vec![vec!["long, name".into(), "1".into()]],
        };
        assert_eq!(t.to_csv(), "a,bb\n\"long, name\",1\n");
        assert_eq!(t.to_text(), "a           bb\nlong, name   1\n");
    }
}
