//! Propensity-score models and inverse probability of treatment weights.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::formula::FormulaAst;
use crate::glm::{expit, fit_formula, Family, GlmFit, GlmOptions, Link};
use crate::tabular::Dataset;

/// A fitted logistic propensity model with its scores.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    pub fit: GlmFit,
    /// P(X = 1 | covariates) for every row, before any clamping.
    pub scores: Vec<f64>,
}

/// Logistic regression of the exposure (the formula's response) on the
/// formula's terms. The exposure column must be 0/1.
pub fn fit_propensity(formula: &FormulaAst, ds: &Dataset, opts: &GlmOptions) -> Result<PropensityModel> {
    ds.binary(&formula.response)?;
    let fit = fit_formula(formula, ds, None, Family::Binomial, Link::Logit, opts)?;
    let scores = fit.linear_predictor.iter().map(|&e| expit(e)).collect();
    Ok(PropensityModel { fit, scores })
}

/// Optional truncation of propensity scores to `[lower, upper]` before
/// weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Clamp {
    pub lower: f64,
    pub upper: f64,
}

impl Clamp {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower > 0.0 && lower < upper && upper < 1.0) {
            return Err(Error::Config(format!(
                "clamp bounds must satisfy 0 < lower < upper < 1, got [{lower}, {upper}]"
            )));
        }
        Ok(Clamp { lower, upper })
    }

    /// Symmetric bounds `[eps, 1 - eps]`.
    pub fn symmetric(eps: f64) -> Result<Self> {
        Clamp::new(eps, 1.0 - eps)
    }
}

/// Apply optional clamping to the scores.
pub fn clamp_scores(scores: &[f64], clamp: Option<Clamp>) -> Vec<f64> {
    match clamp {
        Some(c) => scores.iter().map(|p| p.clamp(c.lower, c.upper)).collect(),
        None => scores.to_vec(),
    }
}

/// `x / p + (1 - x) / (1 - p)` per row. Scores of exactly 0 or 1 are a
/// positivity violation.
pub fn make_weights(scores: &[f64], exposure: &[f64], clamp: Option<Clamp>) -> Result<Vec<f64>> {
    if scores.len() != exposure.len() {
        return Err(Error::InvalidInput(format!(
            "{} propensity scores for {} exposures",
            scores.len(),
            exposure.len()
        )));
    }
    let p = clamp_scores(scores, clamp);
    let bad: Vec<usize> = (0..p.len()).filter(|&i| p[i] <= 0.0 || p[i] >= 1.0).collect();
    if !bad.is_empty() {
        return Err(Error::Positivity { rows: bad });
    }
    Ok(p.iter()
        .zip(exposure)
        .map(|(p, x)| x / p + (1.0 - x) / (1.0 - p))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightDiagnostics {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub mean_treated: f64,
    pub mean_control: f64,
    /// Kish effective sample size `(Σw)² / Σw²`.
    pub ess: f64,
    pub ess_treated: f64,
    pub ess_control: f64,
    /// Rows whose score lies outside `[0.01, 0.99]`.
    pub n_extreme_scores: usize,
}

fn mean(w: impl Iterator<Item = f64>) -> f64 {
    let (s, k) = w.fold((0.0, 0usize), |(s, k), w| (s + w, k + 1));
    s / k as f64
}

fn ess(w: impl Iterator<Item = f64>) -> f64 {
    let (s, s2) = w.fold((0.0, 0.0), |(s, s2), w| (s + w, s2 + w * w));
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

pub fn weight_diagnostics(weights: &[f64], scores: &[f64], exposure: &[f64]) -> WeightDiagnostics {
    let n = weights.len() as f64;
    WeightDiagnostics {
        min: weights.iter().copied().fold(f64::INFINITY, f64::min),
        max: weights.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean: weights.iter().sum::<f64>() / n,
        mean_treated: mean((0..weights.len()).filter(|&i| exposure[i] == 1.0).map(|i| weights[i])),
        mean_control: mean((0..weights.len()).filter(|&i| exposure[i] == 0.0).map(|i| weights[i])),
        ess: ess(weights.iter().copied()),
        ess_treated: ess((0..weights.len()).filter(|&i| exposure[i] == 1.0).map(|i| weights[i])),
        ess_control: ess((0..weights.len()).filter(|&i| exposure[i] == 0.0).map(|i| weights[i])),
        n_extreme_scores: scores.iter().filter(|&&p| !(0.01..=0.99).contains(&p)).count(),
    }
}
