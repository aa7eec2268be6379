//! Point estimators of the average causal effect E[Y¹] − E[Y⁰].

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::FormulaAst;
use crate::glm::{fit_formula, Family, GlmFit, GlmOptions, Link};
use crate::propensity::{clamp_scores, fit_propensity, make_weights, Clamp, PropensityModel};
use crate::tabular::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Standardized predictions from an IPT-weighted outcome GLM.
    IptwGlmStandardized,
    /// AIPW with one unweighted outcome fit on all rows.
    AipwShared,
    /// AIPW with one unweighted outcome fit per exposure arm.
    AipwStratified,
    /// Standardized predictions from an unweighted outcome GLM.
    UnweightedStandardized,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::IptwGlmStandardized => "iptw_glm_standardized",
            Method::AipwShared => "aipw_shared",
            Method::AipwStratified => "aipw_stratified",
            Method::UnweightedStandardized => "unweighted_standardized",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceKind {
    Bootstrap,
    InfluenceFunction,
}

/// How AIPW builds its outcome predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AipwMode {
    /// Separate unweighted fits in each exposure arm, with every term
    /// involving the exposure dropped from the formula.
    #[default]
    Stratified,
    /// One unweighted fit of the full outcome formula on all rows.
    Shared,
}

/// Everything needed to compute an estimate from a dataset.
#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub outcome: FormulaAst,
    pub propensity: FormulaAst,
    pub family: Family,
    pub link: Link,
    pub clamp: Option<Clamp>,
    pub aipw_mode: AipwMode,
    pub glm: GlmOptions,
}

impl EstimatorConfig {
    /// Canonical link, no clamping, stratified AIPW.
    pub fn new(outcome: FormulaAst, propensity: FormulaAst, family: Family) -> Self {
        EstimatorConfig {
            outcome,
            propensity,
            family,
            link: family.canonical_link(),
            clamp: None,
            aipw_mode: AipwMode::default(),
            glm: GlmOptions::default(),
        }
    }

    pub fn with_link(mut self, link: Link) -> Self {
        self.link = link;
        self
    }

    /// The exposure is the response of the propensity formula.
    pub fn exposure(&self) -> &str {
        &self.propensity.response
    }

    fn check(&self) -> Result<()> {
        let x = self.exposure();
        if self.outcome.response == x {
            return Err(Error::InvalidInput(format!(
                "exposure `{x}` cannot also be the outcome"
            )));
        }
        if !self.outcome.involves(x) {
            return Err(Error::InvalidInput(format!(
                "outcome formula `{}` does not involve the exposure `{x}`",
                self.outcome
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AteEstimate {
    pub method: Method,
    pub psi1: f64,
    pub psi0: f64,
    pub ate: f64,
    pub n: usize,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub inference: Option<InferenceKind>,
}

impl AteEstimate {
    pub fn new(method: Method, psi1: f64, psi0: f64, n: usize) -> Self {
        AteEstimate {
            method,
            psi1,
            psi0,
            ate: psi1 - psi0,
            n,
            se: None,
            ci: None,
            inference: None,
        }
    }

    pub fn with_inference(mut self, kind: InferenceKind, se: f64, ci: (f64, f64)) -> Self {
        self.inference = Some(kind);
        self.se = Some(se);
        self.ci = Some(ci);
        self
    }
}

/// The propensity model, the weights it implies and the weighted outcome fit.
#[derive(Debug, Clone)]
pub struct FitBundle {
    pub propensity: PropensityModel,
    /// Scores after optional clamping; these are the ones the weights use.
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub outcome: GlmFit,
}

pub fn fit_propensity_and_weights(
    cfg: &EstimatorConfig,
    ds: &Dataset,
) -> Result<(PropensityModel, Vec<f64>, Vec<f64>)> {
    let ps = fit_propensity(&cfg.propensity, ds, &cfg.glm)?;
    let x = ds.binary(cfg.exposure())?;
    let weights = make_weights(&ps.scores, x, cfg.clamp)?;
    let scores = clamp_scores(&ps.scores, cfg.clamp);
    Ok((ps, scores, weights))
}

pub fn fit_bundle(cfg: &EstimatorConfig, ds: &Dataset) -> Result<FitBundle> {
    cfg.check()?;
    let (propensity, scores, weights) = fit_propensity_and_weights(cfg, ds)?;
    let outcome = fit_formula(&cfg.outcome, ds, Some(&weights), cfg.family, cfg.link, &cfg.glm)?;
    Ok(FitBundle {
        propensity,
        scores,
        weights,
        outcome,
    })
}

/// Predictions of a fit with the exposure set to 1 and to 0 for every row.
#[derive(Debug, Clone)]
pub struct Standardized {
    pub pred1: DVector<f64>,
    pub pred0: DVector<f64>,
    pub mu1: f64,
    pub mu0: f64,
}

/// Average the fit's predicted means over the sample under each exposure.
pub fn standardize(fit: &GlmFit, ds: &Dataset, exposure: &str) -> Result<Standardized> {
    let pred1 = fit.predict(&ds.override_exposure(exposure, 1)?)?;
    let pred0 = fit.predict(&ds.override_exposure(exposure, 0)?)?;
    Ok(Standardized {
        mu1: pred1.mean(),
        mu0: pred0.mean(),
        pred1,
        pred0,
    })
}

pub fn iptw_glm_from_bundle(bundle: &FitBundle, ds: &Dataset, exposure: &str) -> Result<AteEstimate> {
    let s = standardize(&bundle.outcome, ds, exposure)?;
    Ok(AteEstimate::new(Method::IptwGlmStandardized, s.mu1, s.mu0, ds.n_rows()))
}

/// IPTW GLM: fit the outcome model with inverse probability of treatment
/// weights, then standardize its predictions.
pub fn iptw_glm_ate(cfg: &EstimatorConfig, ds: &Dataset) -> Result<AteEstimate> {
    let bundle = fit_bundle(cfg, ds)?;
    iptw_glm_from_bundle(&bundle, ds, cfg.exposure())
}

/// Unweighted regression standardization (g-computation).
pub fn unweighted_standardized(cfg: &EstimatorConfig, ds: &Dataset) -> Result<AteEstimate> {
    cfg.check()?;
    let fit = fit_formula(&cfg.outcome, ds, None, cfg.family, cfg.link, &cfg.glm)?;
    let s = standardize(&fit, ds, cfg.exposure())?;
    Ok(AteEstimate::new(Method::UnweightedStandardized, s.mu1, s.mu0, ds.n_rows()))
}

/// The AIPW means from observed outcomes, exposures, propensity scores and
/// outcome predictions under each exposure.
pub fn aipw_means(y: &[f64], x: &[f64], p: &[f64], pred1: &[f64], pred0: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mut s1 = 0.0;
    let mut s0 = 0.0;
    for i in 0..y.len() {
        s1 += y[i] * x[i] / p[i] - pred1[i] * (x[i] - p[i]) / p[i];
        s0 += y[i] * (1.0 - x[i]) / (1.0 - p[i]) + pred0[i] * (x[i] - p[i]) / (1.0 - p[i]);
    }
    (s1 / n, s0 / n)
}

/// Predictions under exposure 1 and 0 from unweighted outcome models.
pub fn aipw_outcome_predictions(
    cfg: &EstimatorConfig,
    ds: &Dataset,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let exposure = cfg.exposure();
    match cfg.aipw_mode {
        AipwMode::Shared => {
            let fit = fit_formula(&cfg.outcome, ds, None, cfg.family, cfg.link, &cfg.glm)?;
            let s = standardize(&fit, ds, exposure)?;
            Ok((s.pred1, s.pred0))
        }
        AipwMode::Stratified => {
            let reduced = cfg.outcome.without_variable(exposure);
            let x = ds.binary(exposure)?;
            let mut preds = Vec::with_capacity(2);
            for arm in [1.0, 0.0] {
                let sub = ds.filter_rows(|i| x[i] == arm);
                if sub.n_rows() == 0 {
                    return Err(Error::InvalidInput(format!(
                        "no rows with {exposure} = {arm}"
                    )));
                }
                let fit = fit_formula(&reduced, &sub, None, cfg.family, cfg.link, &cfg.glm)?;
                preds.push(fit.predict(ds)?);
            }
            let pred0 = preds.pop().expect("two arms");
            let pred1 = preds.pop().expect("two arms");
            Ok((pred1, pred0))
        }
    }
}

/// Augmented IPW with propensity scores from the weight model and outcome
/// predictions from unweighted fits.
pub fn aipw_ate(cfg: &EstimatorConfig, ds: &Dataset) -> Result<AteEstimate> {
    cfg.check()?;
    let (_, scores, _) = fit_propensity_and_weights(cfg, ds)?;
    let (pred1, pred0) = aipw_outcome_predictions(cfg, ds)?;
    let y = ds.numeric(&cfg.outcome.response)?;
    let x = ds.binary(cfg.exposure())?;
    let (mu1, mu0) = aipw_means(y, x, &scores, pred1.as_slice(), pred0.as_slice());
    let method = match cfg.aipw_mode {
        AipwMode::Shared => Method::AipwShared,
        AipwMode::Stratified => Method::AipwStratified,
    };
    Ok(AteEstimate::new(method, mu1, mu0, ds.n_rows()))
}

/// AIPW using the weighted outcome fit for its predictions. For canonical
/// links the augmentation terms vanish and this equals the IPTW GLM estimate.
pub fn aipw_from_weighted_fit(bundle: &FitBundle, ds: &Dataset, exposure: &str) -> Result<AteEstimate> {
    let s = standardize(&bundle.outcome, ds, exposure)?;
    let y = bundle.outcome.y.as_slice();
    let x = ds.binary(exposure)?;
    let (mu1, mu0) = aipw_means(y, x, &bundle.scores, s.pred1.as_slice(), s.pred0.as_slice());
    Ok(AteEstimate::new(Method::AipwShared, mu1, mu0, ds.n_rows()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::parse;
    use crate::tabular::Column;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// 8 strata of a binary covariate pair, exposure and outcome. With the
    /// propensity saturated in (a, b) and the outcome saturated in
    /// (x, a, b), every estimator reduces to the standardized cell means.
    fn cells(seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 400;
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let ai = (i % 2) as f64;
            let bi = ((i / 2) % 2) as f64;
            let xi = ((i / 4) % 2) as f64;
            a.push(ai);
            b.push(bi);
            x.push(if rng.random_bool(0.3 + 0.2 * ai) { 1.0 - xi } else { xi });
            y.push(1.0 + 2.0 * x[i] + ai - bi + rng.random_range(-1.0..1.0));
        }
        Dataset::from_columns([
            ("y", Column::Numeric(y)),
            ("x", Column::Numeric(x)),
            ("a", Column::Numeric(a)),
            ("b", Column::Numeric(b)),
        ])
        .unwrap()
    }

    fn cell_oracle(ds: &Dataset) -> f64 {
        let (y, x, a, b) = (
            ds.numeric("y").unwrap(),
            ds.numeric("x").unwrap(),
            ds.numeric("a").unwrap(),
            ds.numeric("b").unwrap(),
        );
        let n = y.len() as f64;
        let mut ate = 0.0;
        for ca in [0.0, 1.0] {
            for cb in [0.0, 1.0] {
                let in_cell = |i: usize| a[i] == ca && b[i] == cb;
                let mean = |arm: f64| {
                    let v: Vec<f64> = (0..y.len()).filter(|&i| in_cell(i) && x[i] == arm).map(|i| y[i]).collect();
                    v.iter().sum::<f64>() / v.len() as f64
                };
                let share = (0..y.len()).filter(|&i| in_cell(i)).count() as f64 / n;
                ate += share * (mean(1.0) - mean(0.0));
            }
        }
        ate
    }

    #[test]
    fn saturated_models_agree_with_cell_standardization() {
        let ds = cells(3);
        let cfg = EstimatorConfig::new(
            parse("y ~ x * a * b").unwrap(),
            parse("x ~ a * b").unwrap(),
            Family::Gaussian,
        );
        let oracle = cell_oracle(&ds);
        for est in [
            iptw_glm_ate(&cfg, &ds).unwrap(),
            aipw_ate(&cfg, &ds).unwrap(),
            unweighted_standardized(&cfg, &ds).unwrap(),
        ] {
            assert!((est.ate - oracle).abs() < 1e-9, "{:?} vs {oracle}", est);
        }
    }

    #[test]
    fn aipw_matches_brute_force_on_small_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20;
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..n).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| z[i] + x[i] + rng.random_range(0.0..1.0)).collect();
        let ds = Dataset::from_columns([
            ("y", Column::Numeric(y.clone())),
            ("x", Column::Numeric(x.clone())),
            ("z", Column::Numeric(z.clone())),
        ])
        .unwrap();
        let mut cfg = EstimatorConfig::new(parse("y ~ x + z").unwrap(), parse("x ~ z").unwrap(), Family::Gaussian);
        cfg.aipw_mode = AipwMode::Shared;
        let got = aipw_ate(&cfg, &ds).unwrap();

        let ps = fit_propensity(&cfg.propensity, &ds, &GlmOptions::default()).unwrap();
        let fit = fit_formula(&cfg.outcome, &ds, None, Family::Gaussian, Link::Identity, &GlmOptions::default())
            .unwrap();
        let beta = &fit.coefficients;
        let mut total = 0.0;
        for i in 0..n {
            let p = ps.scores[i];
            let m1 = beta[0] + beta[1] + beta[2] * z[i];
            let m0 = beta[0] + beta[2] * z[i];
            let dr1 = x[i] * y[i] / p - (x[i] - p) / p * m1;
            let dr0 = (1.0 - x[i]) * y[i] / (1.0 - p) + (x[i] - p) / (1.0 - p) * m0;
            total += dr1 - dr0;
        }
        assert!((got.ate - total / n as f64).abs() < 1e-12);
    }

    #[test]
    fn stratified_aipw_requires_both_arms() {
        let ds = Dataset::from_columns([
            ("y", Column::Numeric(vec![1.0, 2.0, 3.0])),
            ("x", Column::Numeric(vec![1.0, 1.0, 1.0])),
            ("z", Column::Numeric(vec![0.0, 1.0, 2.0])),
        ])
        .unwrap();
        let cfg = EstimatorConfig::new(parse("y ~ x + z").unwrap(), parse("x ~ z").unwrap(), Family::Gaussian);
        assert!(aipw_outcome_predictions(&cfg, &ds).is_err());
    }

    #[test]
    fn outcome_formula_must_involve_exposure() {
        let ds = cells(1);
        let cfg = EstimatorConfig::new(parse("y ~ a").unwrap(), parse("x ~ a").unwrap(), Family::Gaussian);
        assert!(matches!(iptw_glm_ate(&cfg, &ds), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn weighted_fit_aipw_identity_for_gaussian() {
        let ds = cells(5);
        let cfg = EstimatorConfig::new(parse("y ~ x + a").unwrap(), parse("x ~ a + b").unwrap(), Family::Gaussian);
        let bundle = fit_bundle(&cfg, &ds).unwrap();
        let g = iptw_glm_from_bundle(&bundle, &ds, "x").unwrap();
        let a = aipw_from_weighted_fit(&bundle, &ds, "x").unwrap();
        assert!((g.ate - a.ate).abs() < 1e-9);
    }
}
