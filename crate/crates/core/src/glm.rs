//! Generalized linear models fitted by iteratively reweighted least squares.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::{build_design, DesignBuilder, DesignMatrix, FormulaAst};
use crate::tabular::Dataset;

const BINOMIAL_MU_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Binomial,
    Poisson,
    Gamma,
    InverseGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Logit,
    Log,
    Inverse,
    InverseSquared,
}

impl Link {
    pub const ALL: [Link; 5] = [
        Link::Identity,
        Link::Logit,
        Link::Log,
        Link::Inverse,
        Link::InverseSquared,
    ];

    pub fn link(self, mu: f64) -> f64 {
        match self {
            Link::Identity => mu,
            Link::Logit => (mu / (1.0 - mu)).ln(),
            Link::Log => mu.ln(),
            Link::Inverse => 1.0 / mu,
            Link::InverseSquared => 1.0 / (mu * mu),
        }
    }

    pub fn linkinv(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => expit(eta),
            Link::Log => eta.exp(),
            Link::Inverse => 1.0 / eta,
            Link::InverseSquared => 1.0 / eta.sqrt(),
        }
    }

    /// dμ/dη.
    pub fn mu_eta(self, eta: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Logit => {
                let e = (-eta.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
            Link::Log => eta.exp(),
            Link::Inverse => -1.0 / (eta * eta),
            Link::InverseSquared => -0.5 / (eta * eta.sqrt()),
        }
    }

    /// d²μ/dη².
    fn mu_eta_deriv(self, eta: f64) -> f64 {
        match self {
            Link::Identity => 0.0,
            Link::Logit => {
                let m = expit(eta);
                self.mu_eta(eta) * (1.0 - 2.0 * m)
            }
            Link::Log => eta.exp(),
            Link::Inverse => 2.0 / (eta * eta * eta),
            Link::InverseSquared => 0.75 / (eta * eta * eta.sqrt()),
        }
    }

    fn valid_eta(self, eta: f64) -> bool {
        eta.is_finite()
            && match self {
                Link::Inverse => eta != 0.0,
                Link::InverseSquared => eta > 0.0,
                _ => true,
            }
    }

    pub fn name(self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Logit => "logit",
            Link::Log => "log",
            Link::Inverse => "inverse",
            Link::InverseSquared => "inverse_squared",
        }
    }
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Gaussian,
        Family::Binomial,
        Family::Poisson,
        Family::Gamma,
        Family::InverseGaussian,
    ];

    pub fn canonical_link(self) -> Link {
        match self {
            Family::Gaussian => Link::Identity,
            Family::Binomial => Link::Logit,
            Family::Poisson => Link::Log,
            Family::Gamma => Link::Inverse,
            Family::InverseGaussian => Link::InverseSquared,
        }
    }

    pub fn variance(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Binomial => mu * (1.0 - mu),
            Family::Poisson => mu,
            Family::Gamma => mu * mu,
            Family::InverseGaussian => mu * mu * mu,
        }
    }

    /// dV/dμ.
    fn variance_deriv(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 0.0,
            Family::Binomial => 1.0 - 2.0 * mu,
            Family::Poisson => 1.0,
            Family::Gamma => 2.0 * mu,
            Family::InverseGaussian => 3.0 * mu * mu,
        }
    }

    /// Unit deviance contribution `w·d(y, μ)`.
    pub fn dev_resid(self, y: f64, mu: f64, w: f64) -> f64 {
        match self {
            Family::Gaussian => w * (y - mu) * (y - mu),
            Family::Binomial => {
                2.0 * w * (xlogy(y, y / mu) + xlogy(1.0 - y, (1.0 - y) / (1.0 - mu)))
            }
            Family::Poisson => 2.0 * w * (xlogy(y, y / mu) - (y - mu)),
            Family::Gamma => -2.0 * w * ((y / mu).ln() - (y - mu) / mu),
            Family::InverseGaussian => w * (y - mu) * (y - mu) / (y * mu * mu),
        }
    }

    /// Whether the dispersion is fixed at one.
    pub fn fixed_dispersion(self) -> bool {
        matches!(self, Family::Binomial | Family::Poisson)
    }

    fn valid_mu(self, mu: f64) -> bool {
        mu.is_finite()
            && match self {
                Family::Gaussian => true,
                Family::Binomial => mu > 0.0 && mu < 1.0,
                _ => mu > 0.0,
            }
    }

    fn valid_y(self, y: f64) -> bool {
        y.is_finite()
            && match self {
                Family::Gaussian => true,
                Family::Binomial => (0.0..=1.0).contains(&y),
                Family::Poisson => y >= 0.0,
                Family::Gamma | Family::InverseGaussian => y > 0.0,
            }
    }

    fn start_mu(self, y: f64, w: f64) -> f64 {
        match self {
            Family::Gaussian => y,
            Family::Binomial => (w * y + 0.5) / (w + 1.0),
            Family::Poisson => y + 0.1,
            Family::Gamma | Family::InverseGaussian => y.max(f64::EPSILON),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Binomial => "binomial",
            Family::Poisson => "poisson",
            Family::Gamma => "gamma",
            Family::InverseGaussian => "inverse_gaussian",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s || (s == "inverse.gaussian" && *f == Family::InverseGaussian))
            .ok_or_else(|| Error::Config(format!("unknown family `{s}`")))
    }
}

impl FromStr for Link {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Link::ALL
            .into_iter()
            .find(|l| l.name() == s || (s == "1/mu^2" && *l == Link::InverseSquared))
            .ok_or_else(|| Error::Config(format!("unknown link `{s}`")))
    }
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlmOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub max_halvings: usize,
}

impl Default for GlmOptions {
    fn default() -> Self {
        GlmOptions {
            max_iter: 100,
            tol: 1e-8,
            max_halvings: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GlmFit {
    pub family: Family,
    pub link: Link,
    pub coefficients: DVector<f64>,
    pub column_names: Vec<String>,
    pub builder: DesignBuilder,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub prior_weights: DVector<f64>,
    pub fitted: DVector<f64>,
    pub linear_predictor: DVector<f64>,
    pub working_weights: DVector<f64>,
    /// (XᵀWX)⁻¹ at the solution, not scaled by the dispersion.
    pub cov_unscaled: DMatrix<f64>,
    pub dispersion: f64,
    pub deviance: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Fit `formula` on `ds`. The response column must be numeric.
pub fn fit_formula(
    formula: &FormulaAst,
    ds: &Dataset,
    weights: Option<&[f64]>,
    family: Family,
    link: Link,
    opts: &GlmOptions,
) -> Result<GlmFit> {
    let design = build_design(formula, ds)?;
    let y = ds.numeric(&formula.response)?;
    fit_glm(&design, y, weights, family, link, opts)
}

pub fn fit_glm(
    design: &DesignMatrix,
    y: &[f64],
    weights: Option<&[f64]>,
    family: Family,
    link: Link,
    opts: &GlmOptions,
) -> Result<GlmFit> {
    let mut fit = irls(&design.matrix, y, weights, family, link, opts)?;
    fit.column_names = design.column_names().to_vec();
    fit.builder = design.builder.clone();
    Ok(fit)
}

struct State {
    beta: DVector<f64>,
    eta: DVector<f64>,
    mu: DVector<f64>,
    dev: f64,
}

fn evaluate(
    x: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    beta: DVector<f64>,
    family: Family,
    link: Link,
) -> Option<State> {
    let eta = x * &beta;
    let mut mu = DVector::zeros(eta.len());
    let mut dev = 0.0;
    for i in 0..eta.len() {
        if !link.valid_eta(eta[i]) {
            return None;
        }
        let m = link.linkinv(eta[i]);
        if !family.valid_mu(m) {
            return None;
        }
        let m = clamp_mu(family, m);
        mu[i] = m;
        if w[i] > 0.0 {
            dev += family.dev_resid(y[i], m, w[i]);
        }
    }
    dev.is_finite().then_some(State {
        beta,
        eta,
        mu,
        dev,
    })
}

fn clamp_mu(family: Family, mu: f64) -> f64 {
    if family == Family::Binomial {
        mu.clamp(BINOMIAL_MU_EPS, 1.0 - BINOMIAL_MU_EPS)
    } else {
        mu
    }
}

fn mu_eta_safe(link: Link, eta: f64) -> f64 {
    let d = link.mu_eta(eta);
    match link {
        Link::Logit | Link::Log => d.max(f64::EPSILON),
        _ => d,
    }
}

/// Weighted least squares through the QR of `sqrt(W) X`. Returns the
/// solution and the triangular factor `R`.
fn wls(x: &DMatrix<f64>, z: &[f64], ww: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, p) = x.shape();
    let mut a = DMatrix::zeros(n, p);
    let mut b = DVector::zeros(n);
    for i in 0..n {
        let s = ww[i].sqrt();
        b[i] = s * z[i];
        for j in 0..p {
            a[(i, j)] = s * x[(i, j)];
        }
    }
    let qr = a.qr();
    let r = qr.r();
    let max_diag = (0..p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    let rank = (0..p)
        .filter(|&j| r[(j, j)].abs() > 1e-7 * max_diag.max(f64::MIN_POSITIVE))
        .count();
    if rank < p || max_diag == 0.0 {
        return Err(Error::RankDeficient { rank, p });
    }
    let qtb = qr.q().transpose() * b;
    let beta = r
        .solve_upper_triangular(&qtb)
        .ok_or(Error::RankDeficient { rank, p })?;
    Ok((beta, r))
}

/// Newton step `(X'WX)^-1 X's` for weights `ww` and per-row scores `score`,
/// with `W` factored as in [`wls`].
fn newton_step(x: &DMatrix<f64>, ww: &[f64], score: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let zero = vec![0.0; ww.len()];
    let (_, r) = wls(x, &zero, ww)?;
    let g = x.transpose() * DVector::from_column_slice(score);
    let p = x.ncols();
    let u = r
        .transpose()
        .solve_lower_triangular(&g)
        .ok_or(Error::RankDeficient { rank: p - 1, p })?;
    let d = r
        .solve_upper_triangular(&u)
        .ok_or(Error::RankDeficient { rank: p - 1, p })?;
    Ok((d, r))
}

/// Whether a single linear predictor value maps to an admissible mean.
fn admissible(family: Family, link: Link, eta: f64) -> bool {
    link.valid_eta(eta) && family.valid_mu(link.linkinv(eta))
}

/// Rows held on the boundary of the admissible region during IRLS. Each
/// entry is a row index, the sign of the motion in its linear predictor that
/// would leave the region, and how far outside that motion must reach before
/// the row counts as off the boundary.
type ActiveSet = Vec<(usize, f64, f64)>;

/// The scoring step `d` restricted to directions that keep the linear
/// predictor of every active row fixed: `N (N' H N)^-1 N' H d`, with `N`
/// spanning the null space of the active rows and `H = R'R`. Rows whose
/// multiplier shows the step would move them back inside are released.
fn active_step(x: &DMatrix<f64>, r: &DMatrix<f64>, d: &DVector<f64>, active: &mut ActiveSet) -> DVector<f64> {
    let p = x.ncols();
    let h = r.transpose() * r;
    loop {
        if active.is_empty() {
            return d.clone();
        }
        let a = DMatrix::from_fn(active.len(), p, |k, j| x[(active[k].0, j)]);
        let eig = (a.transpose() * &a).symmetric_eigen();
        let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let free: Vec<usize> = (0..p).filter(|&j| eig.eigenvalues[j] <= 1e-10 * top).collect();
        let step = if free.is_empty() {
            DVector::zeros(p)
        } else {
            let nmat = DMatrix::from_fn(p, free.len(), |i, k| eig.eigenvectors[(i, free[k])]);
            let reduced = nmat.transpose() * &h * &nmat;
            let rhs = nmat.transpose() * (&h * d);
            match reduced.cholesky() {
                Some(c) => nmat * c.solve(&rhs),
                None => DVector::zeros(p),
            }
        };
        // Multipliers from A' c = H (d - step), with lambda_k = c_k * sign_k.
        let resid = &h * (d - &step);
        let Ok(c) = a.transpose().svd(true, true).solve(&resid, 1e-12) else {
            return step;
        };
        let worst = (0..active.len())
            .map(|k| (k, c[k] * active[k].1))
            .filter(|&(_, l)| l < 0.0)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match worst {
            Some((k, _)) => {
                active.swap_remove(k);
            }
            None => return step,
        }
    }
}

/// Largest admissible fraction of `step` from `base`, by halving the
/// bracket. Returns the state at that fraction (if any
/// fraction is admissible) and the final bracket.
fn admissible_fraction(
    x: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    base: &DVector<f64>,
    step: &DVector<f64>,
    model: (Family, Link),
    max_halvings: usize,
) -> (Option<State>, f64, f64) {
    let (family, link) = model;
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut best = None;
    // Halving decides whether any admissible fraction exists; once one is
    // found the bracket is narrowed further so the blocking row ends up on
    // the boundary itself.
    for k in 0..max_halvings + 52 {
        if k >= max_halvings && (best.is_none() || hi - lo <= 1e-15 * hi) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        match evaluate(x, y, w, base + step * mid, family, link) {
            Some(s) => {
                lo = mid;
                best = Some(s);
            }
            None => hi = mid,
        }
    }
    (best, lo, hi)
}

fn validate(x: &DMatrix<f64>, y: &[f64], w: &[f64], family: Family) -> Result<()> {
    let n = x.nrows();
    if y.len() != n || w.len() != n {
        return Err(Error::InvalidInput(format!(
            "design has {n} rows but response has {} and weights {}",
            y.len(),
            w.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("design matrix has non-finite entries".into()));
    }
    if let Some(i) = w.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidInput(format!("invalid prior weight at row {i}")));
    }
    if !w.iter().any(|v| *v > 0.0) {
        return Err(Error::InvalidInput("all prior weights are zero".into()));
    }
    if let Some(i) = (0..n).find(|&i| w[i] > 0.0 && !family.valid_y(y[i])) {
        return Err(Error::InvalidInput(format!(
            "response value {} at row {i} is outside the {family} support",
            y[i]
        )));
    }
    Ok(())
}

fn rel_change(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(a, b)| (a - b).abs() / (a.abs() + 1.0))
        .fold(0.0, f64::max)
}

/// IRLS on a raw design matrix.
pub fn irls(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    family: Family,
    link: Link,
    opts: &GlmOptions,
) -> Result<GlmFit> {
    let (n, p) = x.shape();
    let ones;
    let w = match weights {
        Some(w) => w,
        None => {
            ones = vec![1.0; n];
            &ones
        }
    };
    validate(x, y, w, family)?;

    // Starting means; the intercept-only fit at the weighted mean serves as a
    // valid fallback point for step halving on the first iteration.
    let mut mu: Vec<f64> = (0..n)
        .map(|i| clamp_mu(family, family.start_mu(y[i], w[i])))
        .collect();
    let mut eta: Vec<f64> = mu.iter().map(|&m| link.link(m)).collect();
    let wsum: f64 = w.iter().sum();
    let ybar = (0..n).map(|i| w[i] * family.start_mu(y[i], w[i])).sum::<f64>() / wsum;
    let mut beta0 = DVector::zeros(p);
    beta0[0] = link.link(ybar);
    let mut prev = evaluate(x, y, w, beta0, family, link);

    let mut z = vec![0.0; n];
    let mut ww = vec![0.0; n];
    let mut obs = vec![0.0; n];
    let mut score = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;
    let mut cur: Option<State> = None;
    let mut active = ActiveSet::new();

    for iter in 1..=opts.max_iter {
        iterations = iter;
        for i in 0..n {
            let d = mu_eta_safe(link, eta[i]);
            let v = family.variance(mu[i]);
            z[i] = eta[i] + (y[i] - mu[i]) / d;
            ww[i] = if w[i] > 0.0 { w[i] * d * d / v } else { 0.0 };
        }
        if ww.iter().any(|v| !v.is_finite()) {
            return Err(Error::StepHalvingExhausted);
        }
        let Some(base) = prev.as_ref() else {
            return Err(Error::StepHalvingExhausted);
        };

        // Off the canonical link the expected information can badly
        // understate the curvature near the edge of the mean's range, so the
        // observed information is used whenever it is non-negative.
        let observed = if link == family.canonical_link() {
            None
        } else {
            for i in 0..n {
                let m = mu[i];
                let d = link.mu_eta(eta[i]);
                let v = family.variance(m);
                let dg = link.mu_eta_deriv(eta[i]) / v - d * d * family.variance_deriv(m) / (v * v);
                score[i] = w[i] * (y[i] - m) * d / v;
                let fisher = w[i] * d * d / v;
                let o = fisher - w[i] * (y[i] - m) * dg;
                // cancellation can leave a zero curvature slightly negative
                obs[i] = if o.abs() <= 1e-10 * fisher { 0.0 } else { o };
            }
            if obs.iter().all(|v| v.is_finite() && *v >= 0.0) && score.iter().all(|v| v.is_finite()) {
                newton_step(x, &obs, &score).ok()
            } else {
                None
            }
        };
        let (full, r) = match observed {
            Some(v) => v,
            None => {
                let (beta, r) = wls(x, &z, &ww)?;
                (&beta - &base.beta, r)
            }
        };

        // Steps are confined to the admissible region: a step that would
        // leave it stops at the largest admissible fraction, and the row that
        // blocked it joins the active set so later steps slide along the
        // boundary instead of into it.
        let mut state = None;
        for _ in 0..=p {
            let step = active_step(x, &r, &full, &mut active);
            if let Some(s) = evaluate(x, y, w, &base.beta + &step, family, link) {
                state = Some(s);
                break;
            }
            let (best, lo, hi) = admissible_fraction(x, y, w, &base.beta, &step, (family, link), opts.max_halvings);
            let xs = x * &step;
            let blocker = (0..n)
                .filter(|&i| xs[i] != 0.0 && active.iter().all(|a| a.0 != i))
                .filter(|&i| !admissible(family, link, base.eta[i] + hi * xs[i]))
                .max_by(|&i, &j| xs[i].abs().total_cmp(&xs[j].abs()).then(j.cmp(&i)));
            if let Some(i) = blocker {
                active.push((i, xs[i].signum(), 2.0 * (hi - lo) * xs[i].abs()));
            }
            if best.is_some() || blocker.is_none() {
                state = best;
                break;
            }
        }
        let Some(mut s) = state else {
            return Err(Error::StepHalvingExhausted);
        };

        // Halve toward the previous coefficients while the deviance rises.
        let mut stalled = false;
        if let (true, Some(base)) = (iter > 1, prev.as_ref()) {
            // A rise within rounding noise along an ascent direction of the
            // log-likelihood is not a rise.
            let noise = 64.0 * f64::EPSILON * (base.dev.abs() + 0.1);
            let ascent = |s: &State| {
                let xs = x * (&s.beta - &base.beta);
                (0..n)
                    .map(|i| {
                        let m = base.mu[i];
                        w[i] * (y[i] - m) * link.mu_eta(base.eta[i]) / family.variance(m) * xs[i]
                    })
                    .sum::<f64>()
                    > 0.0
            };
            let rises = |s: &State| s.dev > base.dev && (s.dev - base.dev > noise || !ascent(s));
            let mut k = 0;
            while rises(&s) {
                if k == opts.max_halvings {
                    stalled = true;
                    break;
                }
                k += 1;
                let trial = (&s.beta + &base.beta) * 0.5;
                if let Some(t) = evaluate(x, y, w, trial.clone(), family, link) {
                    s = t;
                } else {
                    s.beta = trial;
                }
            }
        }
        active.retain(|&(i, sign, reach)| !admissible(family, link, s.eta[i] + sign * reach));
        if stalled {
            // No descent along this direction within machine precision: the
            // previous iterate is stationary.
            converged = true;
            break;
        }
        let done = match &prev {
            Some(p) if iter > 1 => {
                let ddev = (s.dev - p.dev).abs() / (s.dev.abs() + 0.1);
                ddev < opts.tol && rel_change(&s.beta, &p.beta) < opts.tol
            }
            _ => false,
        };
        eta.copy_from_slice(s.eta.as_slice());
        mu.copy_from_slice(s.mu.as_slice());
        prev = Some(State {
            beta: s.beta.clone(),
            eta: s.eta.clone(),
            mu: s.mu.clone(),
            dev: s.dev,
        });
        cur = Some(s);
        if done {
            converged = true;
            break;
        }
    }

    let s = match cur {
        Some(s) => s,
        None => prev.expect("stalled after an accepted iterate"),
    };
    if !converged {
        return Err(Error::NotConverged {
            iterations,
            deviance: s.dev,
            coefficients: s.beta.iter().copied().collect(),
        });
    }

    for i in 0..n {
        let d = mu_eta_safe(link, s.eta[i]);
        ww[i] = if w[i] > 0.0 {
            w[i] * d * d / family.variance(s.mu[i])
        } else {
            0.0
        };
    }
    let cov_unscaled = {
        let xw = DMatrix::from_fn(n, p, |i, j| ww[i].sqrt() * x[(i, j)]);
        let info = xw.transpose() * &xw;
        info.cholesky()
            .map(|c| c.inverse())
            .ok_or(Error::RankDeficient { rank: p - 1, p })?
    };
    let n_ok = w.iter().filter(|v| **v > 0.0).count();
    let dispersion = if family.fixed_dispersion() {
        1.0
    } else {
        let pearson: f64 = (0..n)
            .filter(|&i| w[i] > 0.0)
            .map(|i| w[i] * (y[i] - s.mu[i]).powi(2) / family.variance(s.mu[i]))
            .sum();
        if n_ok > p {
            pearson / (n_ok - p) as f64
        } else {
            f64::NAN
        }
    };

    // Report unclamped means.
    let fitted = s.eta.map(|e| link.linkinv(e));
    Ok(GlmFit {
        family,
        link,
        coefficients: s.beta,
        column_names: (0..p).map(|j| format!("x{j}")).collect(),
        builder: DesignBuilder::default(),
        x: x.clone(),
        y: DVector::from_column_slice(y),
        prior_weights: DVector::from_column_slice(w),
        fitted,
        linear_predictor: s.eta,
        working_weights: DVector::from_vec(ww),
        cov_unscaled,
        dispersion,
        deviance: s.dev,
        iterations,
        converged,
    })
}

impl GlmFit {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Estimated covariance of the coefficients.
    pub fn vcov(&self) -> DMatrix<f64> {
        &self.cov_unscaled * self.dispersion
    }

    /// Linear predictor for the rows of `ds`, built with the fit's design.
    pub fn predict_link(&self, ds: &Dataset) -> Result<DVector<f64>> {
        let x = self.builder.rebuild(ds)?;
        Ok(self.predict_link_matrix(&x))
    }

    pub fn predict_link_matrix(&self, x: &DMatrix<f64>) -> DVector<f64> {
        x * &self.coefficients
    }

    /// Predicted means for the rows of `ds`.
    pub fn predict(&self, ds: &Dataset) -> Result<DVector<f64>> {
        Ok(self.predict_link(ds)?.map(|e| self.link.linkinv(e)))
    }

    pub fn predict_matrix(&self, x: &DMatrix<f64>) -> DVector<f64> {
        self.predict_link_matrix(x).map(|e| self.link.linkinv(e))
    }

    /// Per-row score contributions `w (y − μ) μ'(η) / V(μ) · xᵢ`, an n×p matrix
    /// whose column sums vanish at the solution.
    pub fn score_contributions(&self) -> DMatrix<f64> {
        let (n, p) = self.x.shape();
        DMatrix::from_fn(n, p, |i, j| self.working_residual_weight(i) * self.x[(i, j)])
    }

    fn working_residual_weight(&self, i: usize) -> f64 {
        let w = self.prior_weights[i];
        if w == 0.0 {
            return 0.0;
        }
        let mu = self.fitted[i];
        w * (self.y[i] - mu) * mu_eta_safe(self.link, self.linear_predictor[i])
            / self.family.variance(mu)
    }

    /// Estimating-function matrix in the convention of R's `sandwich::estfun`:
    /// score contributions divided by a dispersion estimate that is one for
    /// binomial and Poisson and `Σ wres² / Σ w_work` otherwise.
    pub fn estfun(&self) -> DMatrix<f64> {
        let mut s = self.score_contributions();
        if !self.family.fixed_dispersion() {
            let n = self.n();
            let num: f64 = (0..n).map(|i| self.working_residual_weight(i).powi(2)).sum();
            let den: f64 = self.working_weights.sum();
            s /= num / den;
        }
        s
    }

    /// Per-row coefficient influence `estfun · vcov`.
    pub fn coefficient_influence(&self) -> DMatrix<f64> {
        self.estfun() * self.vcov()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::parse;
    use crate::tabular::Column;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn design(n: usize, p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) })
    }

    #[test]
    fn ols_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = design(50, 3, &mut rng);
        let y: Vec<f64> = (0..50).map(|_| rng.random_range(-3.0..3.0)).collect();
        let fit = irls(&x, &y, None, Family::Gaussian, Link::Identity, &GlmOptions::default())
            .unwrap();
        let yv = DVector::from_vec(y);
        let beta = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &yv;
        assert!((fit.coefficients - beta).amax() < 1e-10);
    }

    #[test]
    fn saturated_logit_reproduces_cell_proportions() {
        // One binary covariate: fitted probabilities equal the cell means.
        let x = DMatrix::from_fn(10, 2, |i, j| if j == 0 { 1.0 } else { (i % 2) as f64 });
        let y = [1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let fit = irls(&x, &y, None, Family::Binomial, Link::Logit, &GlmOptions::default())
            .unwrap();
        // even rows: y = 1,0,0,1,0 -> 0.4 ; odd rows: 1,1,0,1,0 -> 0.6
        assert!((fit.fitted[0] - 0.4).abs() < 1e-10);
        assert!((fit.fitted[1] - 0.6).abs() < 1e-10);
        assert!((fit.coefficients[1] - (1.5f64.ln() - (2.0f64 / 3.0).ln())).abs() < 1e-9);
    }

    #[test]
    fn mu_eta_matches_finite_differences() {
        let cases = [
            (Link::Identity, [-2.0, 0.3, 5.0]),
            (Link::Logit, [-3.0, 0.1, 2.5]),
            (Link::Log, [-1.0, 0.0, 2.0]),
            (Link::Inverse, [0.5, 1.5, -2.0]),
            (Link::InverseSquared, [0.2, 1.0, 4.0]),
        ];
        for (link, etas) in cases {
            for eta in etas {
                let h = 1e-5 * (1.0 + f64::abs(eta));
                let fd = (link.linkinv(eta + h) - link.linkinv(eta - h)) / (2.0 * h);
                let an = link.mu_eta(eta);
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "{link} at {eta}");
                assert!((link.link(link.linkinv(eta)) - eta).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn names_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        for l in Link::ALL {
            assert_eq!(l.name().parse::<Link>().unwrap(), l);
        }
        assert!("probit".parse::<Link>().is_err());
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let x = DMatrix::from_element(3, 1, 1.0);
        let o = GlmOptions::default();
        assert!(irls(&x, &[0.0, 1.0, 2.0], None, Family::Binomial, Link::Logit, &o).is_err());
        assert!(irls(&x, &[1.0, 1.0, 0.0], None, Family::Gamma, Link::Inverse, &o).is_err());
        assert!(irls(&x, &[1.0, 2.0, 3.0], Some(&[0.0; 3]), Family::Gaussian, Link::Identity, &o)
            .is_err());
        assert!(irls(&x, &[1.0, 2.0, 3.0], Some(&[1.0, -1.0, 1.0]), Family::Gaussian, Link::Identity, &o)
            .is_err());
    }

    #[test]
    fn collinear_design_is_rank_deficient() {
        let x = DMatrix::from_fn(6, 3, |i, j| match j {
            0 => 1.0,
            1 => i as f64,
            _ => 2.0 * i as f64,
        });
        let y = [1.0, 2.0, 2.5, 4.0, 5.5, 6.0];
        let r = irls(&x, &y, None, Family::Gaussian, Link::Identity, &GlmOptions::default());
        assert!(matches!(r, Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn poisson_intercept_is_log_mean() {
        let x = DMatrix::from_element(5, 1, 1.0);
        let y = [0.0, 2.0, 3.0, 1.0, 4.0];
        let fit = irls(&x, &y, None, Family::Poisson, Link::Log, &GlmOptions::default()).unwrap();
        assert!((fit.coefficients[0] - 2.0f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn gamma_and_inverse_gaussian_intercepts() {
        let x = DMatrix::from_element(4, 1, 1.0);
        let y = [1.0, 2.0, 4.0, 5.0];
        let g = irls(&x, &y, None, Family::Gamma, Link::Inverse, &GlmOptions::default()).unwrap();
        assert!((g.coefficients[0] - 1.0 / 3.0).abs() < 1e-10);
        let ig = irls(&x, &y, None, Family::InverseGaussian, Link::InverseSquared, &GlmOptions::default())
            .unwrap();
        assert!((ig.coefficients[0] - 1.0 / 9.0).abs() < 1e-10);
    }

    #[test]
    fn gaussian_dispersion_and_estfun() {
        let x = DMatrix::from_element(4, 1, 1.0);
        let y = [1.0, 2.0, 4.0, 5.0];
        let fit = irls(&x, &y, None, Family::Gaussian, Link::Identity, &GlmOptions::default())
            .unwrap();
        // sample variance
        assert!((fit.dispersion - 10.0 / 3.0).abs() < 1e-12);
        let infl = fit.coefficient_influence();
        for i in 0..4 {
            assert!((infl[(i, 0)] - (y[i] - 3.0) / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn formula_fit_and_prediction() {
        let ds = Dataset::from_columns([
            ("y", Column::Numeric(vec![1.0, 3.0, 2.0, 5.0, 4.0, 6.0])),
            ("x", Column::Numeric(vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0])),
        ])
        .unwrap();
        let f = parse("y ~ x").unwrap();
        let fit = fit_formula(&f, &ds, None, Family::Gaussian, Link::Identity, &GlmOptions::default())
            .unwrap();
        assert_eq!(fit.column_names, ["(Intercept)", "x"]);
        let p1 = fit.predict(&ds.override_exposure("x", 1).unwrap()).unwrap();
        assert!(p1.iter().all(|v| (v - 14.0 / 3.0).abs() < 1e-12));
    }
}
