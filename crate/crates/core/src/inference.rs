//! Whole-procedure bootstrap and influence-function standard errors.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{standardize, EstimatorConfig, FitBundle};
use crate::exec::Execution;
use crate::glm::{fit_formula, GlmFit, Link};
use crate::tabular::Dataset;

/// Sample quantile with linear interpolation between order statistics
/// (Hyndman–Fan type 7). `sorted` must be ascending and non-empty.
pub fn quantile_type7(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub seed: u64,
    /// Two-sided confidence level of the percentile interval.
    pub level: f64,
    /// Largest tolerated fraction of failed refits.
    pub max_failure_rate: f64,
    pub execution: Execution,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            replicates: 1000,
            seed: 1,
            level: 0.95,
            max_failure_rate: 0.05,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapResult {
    pub estimates: Vec<f64>,
    pub ci: (f64, f64),
    /// Standard deviation of the resampled estimates.
    pub se: f64,
    #[serde(rename = "B")]
    pub b: usize,
    pub seed: u64,
    /// Resamples that failed to fit and were redrawn.
    pub failures: usize,
}

/// The RNG for resample `index`: the seed selects the generator and the index
/// selects an independent stream, so any schedule gives the same draws.
pub fn resample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Nonparametric bootstrap of `statistic` with percentile interval. The
/// statistic sees a full resampled dataset, so every model in it is refit.
/// Resamples whose fit fails numerically are redrawn from the same stream.
pub fn bootstrap_ci<F>(ds: &Dataset, opts: &BootstrapOptions, statistic: F) -> Result<BootstrapResult>
where
    F: Fn(&Dataset) -> Result<f64> + Sync + Send,
{
    if opts.replicates < 2 {
        return Err(Error::Config("bootstrap needs at least 2 replicates".into()));
    }
    let n = ds.n_rows();
    let limit = (opts.max_failure_rate * opts.replicates as f64).floor() as usize;
    let draws = opts.execution.map(opts.replicates, |b| -> Result<(f64, usize)> {
        let mut rng = resample_rng(opts.seed, b);
        let mut failed = 0;
        loop {
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            match statistic(&ds.take_rows(&rows)) {
                Ok(v) if v.is_finite() => return Ok((v, failed)),
                Ok(_) => failed += 1,
                Err(e) if e.is_fit_failure() => failed += 1,
                Err(e) => return Err(e),
            }
            if failed > limit {
                return Ok((f64::NAN, failed));
            }
        }
    });
    let mut estimates = Vec::with_capacity(opts.replicates);
    let mut failures = 0;
    for d in draws {
        let (v, f) = d?;
        failures += f;
        estimates.push(v);
    }
    if failures > limit {
        return Err(Error::BootstrapFailures {
            failed: failures,
            attempted: opts.replicates + failures,
            limit,
        });
    }
    if failures > 0 {
        log::info!("bootstrap redrew {failures} resamples after failed fits");
    }
    let mut sorted = estimates.clone();
    sorted.sort_by(f64::total_cmp);
    let alpha = (1.0 - opts.level) / 2.0;
    let ci = (quantile_type7(&sorted, alpha), quantile_type7(&sorted, 1.0 - alpha));
    let b = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / b;
    let se = (estimates.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1.0)).sqrt();
    Ok(BootstrapResult {
        estimates,
        ci,
        se,
        b: opts.replicates,
        seed: opts.seed,
        failures,
    })
}

/// Per-row coefficient influence: score contributions times the model-based
/// covariance, in the convention of R's `sandwich::estfun` and `vcov`.
pub fn parameter_influence(fit: &GlmFit) -> DMatrix<f64> {
    fit.coefficient_influence()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfluenceMode {
    /// Outcome predictions and scores in the correction terms come from an
    /// unweighted refit, combined with the weighted fit's covariance.
    #[default]
    SupplementCompatible,
    /// Every outcome-model quantity comes from the weighted fit.
    WeightedConsistent,
}

#[derive(Debug, Clone)]
pub struct InfluenceDecomposition {
    pub mode: InfluenceMode,
    pub ate: f64,
    pub eif_terms_1: DVector<f64>,
    pub eif_terms_0: DVector<f64>,
    pub k1: DVector<f64>,
    pub k0: DVector<f64>,
    pub l1: DVector<f64>,
    pub l0: DVector<f64>,
    pub param_influence_alpha: DMatrix<f64>,
    pub param_influence_theta: DMatrix<f64>,
    pub phi1: DVector<f64>,
    pub phi0: DVector<f64>,
    pub se: f64,
    pub eif_only_se: f64,
}

impl InfluenceDecomposition {
    /// Wald interval `ate ± z·se`.
    pub fn ci(&self, z: f64) -> (f64, f64) {
        (self.ate - z * self.se, self.ate + z * self.se)
    }
}

fn is_canonical(fit: &GlmFit) -> bool {
    fit.link == fit.family.canonical_link()
}

/// Influence-function standard error of the IPTW GLM estimate.
pub fn influence_se(
    cfg: &EstimatorConfig,
    bundle: &FitBundle,
    ds: &Dataset,
    mode: InfluenceMode,
) -> Result<InfluenceDecomposition> {
    let wfit = &bundle.outcome;
    if !is_canonical(wfit) {
        return Err(Error::UnsupportedModel(format!(
            "influence-function SE needs a canonical link; got {} with {}",
            wfit.family, wfit.link
        )));
    }
    let exposure = cfg.exposure();
    let n = ds.n_rows();
    let nf = n as f64;
    let x = ds.binary(exposure)?;
    let y = ds.numeric(&cfg.outcome.response)?;
    let p = &bundle.scores;
    let data1 = ds.override_exposure(exposure, 1)?;
    let data0 = ds.override_exposure(exposure, 0)?;

    let centering = standardize(wfit, ds, exposure)?;
    let (est1f, est0f) = (centering.mu1, centering.mu0);

    // Outcome model used inside the correction terms, and its design under
    // each exposure.
    let (r1, r0, eta1, eta0, xo1, xo0, theta_infl) = match mode {
        InfluenceMode::SupplementCompatible => {
            let unw = fit_formula(&cfg.outcome, ds, None, cfg.family, cfg.link, &cfg.glm)?;
            let eta1 = unw.predict_link(&data1)?;
            let eta0 = unw.predict_link(&data0)?;
            // Only the exposure's own column is overwritten; interaction
            // columns keep their observed values.
            let j = unw.builder.column_index(exposure).ok_or_else(|| {
                Error::UnsupportedModel(format!(
                    "outcome design has no main-effect column for `{exposure}`"
                ))
            })?;
            let mut xo1 = unw.x.clone();
            let mut xo0 = unw.x.clone();
            xo1.column_mut(j).fill(1.0);
            xo0.column_mut(j).fill(0.0);
            let theta = unw.estfun() * wfit.vcov();
            let r1 = eta1.map(|e| unw.link.linkinv(e));
            let r0 = eta0.map(|e| unw.link.linkinv(e));
            (r1, r0, eta1, eta0, xo1, xo0, theta)
        }
        InfluenceMode::WeightedConsistent => {
            let xo1 = wfit.builder.rebuild(&data1)?;
            let xo0 = wfit.builder.rebuild(&data0)?;
            let eta1 = wfit.predict_link_matrix(&xo1);
            let eta0 = wfit.predict_link_matrix(&xo0);
            (
                centering.pred1.clone(),
                centering.pred0.clone(),
                eta1,
                eta0,
                xo1,
                xo0,
                wfit.coefficient_influence(),
            )
        }
    };
    let link: Link = wfit.link;
    let psfit = &bundle.propensity.fit;
    let xw = &psfit.x;
    let hdot = psfit.linear_predictor.map(|e| Link::Logit.mu_eta(e));

    let mut eif1 = DVector::zeros(n);
    let mut eif0 = DVector::zeros(n);
    let mut a1 = DVector::zeros(n);
    let mut a0 = DVector::zeros(n);
    let mut b1 = DVector::zeros(n);
    let mut b0 = DVector::zeros(n);
    for i in 0..n {
        eif1[i] = (x[i] / p[i] * (y[i] - r1[i]) + (r1[i] - est1f)) / nf;
        eif0[i] = ((1.0 - x[i]) / (1.0 - p[i]) * (y[i] - r0[i]) + (r0[i] - est0f)) / nf;
        a1[i] = -(x[i] * hdot[i] / (p[i] * p[i])) * (y[i] - r1[i]) / nf;
        a0[i] = ((1.0 - x[i]) * hdot[i] / ((1.0 - p[i]) * (1.0 - p[i]))) * (y[i] - r0[i]) / nf;
        b1[i] = link.mu_eta(eta1[i]) * (1.0 - x[i] / p[i]) / nf;
        b0[i] = link.mu_eta(eta0[i]) * ((1.0 - x[i]) / (1.0 - p[i]) - 1.0) / nf;
    }
    let k1 = xw.tr_mul(&a1);
    let k0 = xw.tr_mul(&a0);
    let l1 = xo1.tr_mul(&b1);
    let l0 = xo0.tr_mul(&b0);
    let alpha_infl = psfit.coefficient_influence();

    let phi1 = &eif1 + &alpha_infl * &k1 + &theta_infl * &l1;
    let phi0 = &eif0 + &alpha_infl * &k0 + &theta_infl * &l0;
    let se = (&phi1 - &phi0).norm();
    let eif_only_se = (&eif1 - &eif0).norm();
    Ok(InfluenceDecomposition {
        mode,
        ate: est1f - est0f,
        eif_terms_1: eif1,
        eif_terms_0: eif0,
        k1,
        k0,
        l1,
        l0,
        param_influence_alpha: alpha_infl,
        param_influence_theta: theta_infl,
        phi1,
        phi0,
        se,
        eif_only_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::fit_bundle;
    use crate::formula::parse;
    use crate::glm::{irls, Family, GlmOptions};
    use crate::tabular::Column;

    #[test]
    fn type7_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_type7(&v, 0.5), 3.0);
        assert_eq!(quantile_type7(&v, 0.0), 1.0);
        assert_eq!(quantile_type7(&v, 1.0), 5.0);
        // R: quantile(1:5, 0.1) = 1.4
        assert!((quantile_type7(&v, 0.1) - 1.4).abs() < 1e-12);
        assert!((quantile_type7(&[1.0, 2.0, 4.0, 10.0], 0.975) - 9.55).abs() < 1e-12);
    }

    fn toy(n: usize) -> Dataset {
        let z: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let x: Vec<f64> = (0..n).map(|i| ((i * 7919) % 5 < 2) as u8 as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| 1.0 + x[i] + z[i] + (i as f64 * 1.3).cos()).collect();
        Dataset::from_columns([
            ("y", Column::Numeric(y)),
            ("x", Column::Numeric(x)),
            ("z", Column::Numeric(z)),
        ])
        .unwrap()
    }

    #[test]
    fn constant_statistic_gives_degenerate_interval() {
        let ds = toy(30);
        let r = bootstrap_ci(&ds, &BootstrapOptions { replicates: 50, ..Default::default() }, |_| Ok(3.0))
            .unwrap();
        assert_eq!(r.ci, (3.0, 3.0));
        assert_eq!(r.estimates.len(), 50);
    }

    #[test]
    fn bootstrap_is_reproducible_across_schedules() {
        let ds = toy(40);
        let stat = |d: &Dataset| Ok(d.numeric("y")?.iter().sum::<f64>() / d.n_rows() as f64);
        let par = BootstrapOptions { replicates: 64, seed: 9, ..Default::default() };
        let seq = BootstrapOptions { execution: Execution::Sequential, ..par };
        let a = bootstrap_ci(&ds, &par, stat).unwrap();
        let b = bootstrap_ci(&ds, &seq, stat).unwrap();
        assert_eq!(a, b);
        let c = bootstrap_ci(&ds, &BootstrapOptions { seed: 10, ..par }, stat).unwrap();
        assert_ne!(a.estimates, c.estimates);
        assert!(a.ci.0 <= a.ci.1);
    }

    #[test]
    fn persistent_failures_are_reported() {
        let ds = toy(20);
        let r = bootstrap_ci(&ds, &BootstrapOptions { replicates: 20, ..Default::default() }, |_| {
            Err(Error::StepHalvingExhausted)
        });
        assert!(matches!(r, Err(Error::BootstrapFailures { .. })));
        // non-numerical errors propagate immediately
        let r = bootstrap_ci(&ds, &BootstrapOptions { replicates: 20, ..Default::default() }, |_| {
            Err(Error::UnknownColumn("q".into()))
        });
        assert!(matches!(r, Err(Error::UnknownColumn(_))));
    }

    #[test]
    fn occasional_failures_are_redrawn() {
        let ds = toy(25);
        // fails whenever row 0 is absent from the resample, which happens
        // with probability (24/25)^25 ≈ 0.36, far above 5%. Use row
        // multiplicity instead: fail only if row 0 appears 4+ times.
        let r = bootstrap_ci(&ds, &BootstrapOptions { replicates: 200, ..Default::default() }, |d| {
            let z0 = ds.numeric("z").unwrap()[0];
            let hits = d.numeric("z")?.iter().filter(|&&v| v == z0).count();
            if hits >= 4 {
                Err(Error::StepHalvingExhausted)
            } else {
                Ok(hits as f64)
            }
        })
        .unwrap();
        assert_eq!(r.estimates.len(), 200);
        assert!(r.estimates.iter().all(|&v| v < 4.0));
    }

    #[test]
    fn intercept_only_gaussian_influence() {
        let y = [2.0, 5.0, 3.0, 7.0, 8.0];
        let x = DMatrix::from_element(5, 1, 1.0);
        let fit = irls(&x, &y, None, Family::Gaussian, Link::Identity, &GlmOptions::default()).unwrap();
        let infl = parameter_influence(&fit);
        // estfun divides by Σr²/n and vcov multiplies by Σr²/(n-1)
        for i in 0..5 {
            assert!((infl[(i, 0)] - (y[i] - 5.0) / 4.0).abs() < 1e-12);
        }
        assert!(infl.column(0).sum().abs() < 1e-12);
    }

    #[test]
    fn influence_se_decomposition_is_consistent() {
        let ds = toy(200);
        let cfg = EstimatorConfig::new(parse("y ~ x + z").unwrap(), parse("x ~ z").unwrap(), Family::Gaussian);
        let bundle = fit_bundle(&cfg, &ds).unwrap();
        for mode in [InfluenceMode::SupplementCompatible, InfluenceMode::WeightedConsistent] {
            let d = influence_se(&cfg, &bundle, &ds, mode).unwrap();
            let rebuilt = &d.eif_terms_1 + &d.param_influence_alpha * &d.k1 + &d.param_influence_theta * &d.l1;
            assert!((rebuilt - &d.phi1).amax() < 1e-15);
            assert!(d.se > 0.0 && d.eif_only_se > 0.0);
            // the EIF terms average to zero for the weighted fit only when
            // the outcome predictions come from it
            if mode == InfluenceMode::WeightedConsistent {
                assert!((d.eif_terms_1.sum() - d.eif_terms_0.sum()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn influence_se_is_permutation_invariant() {
        let ds = toy(120);
        let cfg = EstimatorConfig::new(parse("y ~ x * z").unwrap(), parse("x ~ z").unwrap(), Family::Gaussian);
        let rows: Vec<usize> = (0..120).rev().collect();
        let perm = ds.take_rows(&rows);
        let a = influence_se(&cfg, &fit_bundle(&cfg, &ds).unwrap(), &ds, InfluenceMode::default()).unwrap();
        let b = influence_se(&cfg, &fit_bundle(&cfg, &perm).unwrap(), &perm, InfluenceMode::default()).unwrap();
        assert!((a.se - b.se).abs() < 1e-10 * a.se);
    }

    #[test]
    fn non_canonical_outcome_is_rejected() {
        let ds = toy(60);
        let yb: Vec<f64> = ds.numeric("y").unwrap().iter().map(|v| (*v > 1.5) as u8 as f64).collect();
        let ds = ds.with_column("y", Column::Numeric(yb)).unwrap();
        let cfg = EstimatorConfig::new(parse("y ~ x").unwrap(), parse("x ~ z").unwrap(), Family::Binomial)
            .with_link(Link::Log);
        let bundle = fit_bundle(&cfg, &ds).unwrap();
        assert!(matches!(
            influence_se(&cfg, &bundle, &ds, InfluenceMode::default()),
            Err(Error::UnsupportedModel(_))
        ));
    }
}
