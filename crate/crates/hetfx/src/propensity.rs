//! Parametric propensity score estimation (step 0): logistic and probit
//! regression fit by iteratively reweighted least squares, plus a
//! pass-through for externally supplied scores.
//!
//! Fitted and external scores are clamped to `[1e-6, 1 - 1e-6]`. The working
//! assumption is overlap, but the simulation mechanisms deliberately push
//! scores against the boundary; clamping keeps the weighting baselines
//! finite without materially moving the regression estimator, whose
//! dependence on the score is bounded.

use ndarray::Array2;

use crate::data::{ObservationalDataset, SCORE_CLAMP};
use crate::error::{Error, Result};
use crate::locfit::{wls_solve, WlsProblem};
use crate::numeric;

const MAX_ITERATIONS: usize = 100;
const COEF_TOL: f64 = 1e-8;
const MAX_STEP_HALVINGS: usize = 30;
/// Coefficient sup-norm beyond which a still-improving likelihood is read as
/// separation.
const SEPARATION_NORM: f64 = 1e3;
const MU_CLAMP: f64 = 1e-10;

/// Link function of the score model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Logit,
    Probit,
}

impl Link {
    #[inline]
    fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Logit => 1.0 / (1.0 + (-eta).exp()),
            Link::Probit => numeric::normal_cdf(eta),
        }
    }

    /// Derivative of the inverse link.
    #[inline]
    fn derivative(self, eta: f64, mu: f64) -> f64 {
        match self {
            Link::Logit => mu * (1.0 - mu),
            Link::Probit => numeric::normal_pdf(eta),
        }
    }
}

/// Fitted score model: intercept followed by one coefficient per covariate
/// column. Zero-variance covariate columns are excluded from the solve and
/// their coefficients pinned to zero.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub alpha_hat: Vec<f64>,
    pub link: Link,
    pub converged: bool,
    pub iterations: usize,
    /// Set when the coefficient norm diverged while the likelihood was still
    /// improving; estimates are the last iterate.
    pub separation_warning: bool,
}

/// How per-row scores are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScorePolicy {
    #[default]
    FitLogit,
    FitProbit,
    External,
}

impl std::str::FromStr for ScorePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(ScorePolicy::FitLogit),
            "probit" => Ok(ScorePolicy::FitProbit),
            "external" => Ok(ScorePolicy::External),
            other => Err(Error::invalid(format!("unknown score policy '{other}'"))),
        }
    }
}

fn log_likelihood(d: &[u8], mu: &[f64]) -> f64 {
    let mut acc = numeric::KahanSum::new();
    for (&di, &m) in d.iter().zip(mu) {
        let m = m.clamp(MU_CLAMP, 1.0 - MU_CLAMP);
        acc.add(if di == 1 { m.ln() } else { (1.0 - m).ln() });
    }
    acc.value()
}

pub fn fit_glm(dataset: &ObservationalDataset, link: Link) -> Result<PropensityFit> {
    fit_glm_with_trace(dataset, link).map(|(fit, _)| fit)
}

/// As [`fit_glm`], returning the per-iteration log-likelihood trace.
pub fn fit_glm_with_trace(
    dataset: &ObservationalDataset,
    link: Link,
) -> Result<(PropensityFit, Vec<f64>)> {
    let n = dataset.n();
    let p = dataset.p();
    if n <= p + 1 {
        return Err(Error::InsufficientData(format!(
            "need n > p + 1 to fit the score model, got n={n}, p={p}"
        )));
    }
    let x = dataset.covariates();
    let d = dataset.treatment();

    // Zero-variance columns carry no information and would make the design
    // rank deficient; solve without them, pin their coefficients to zero.
    let active: Vec<usize> = (0..p)
        .filter(|&j| {
            let col = x.column(j);
            let first = col[0];
            col.iter().any(|&v| v != first)
        })
        .collect();
    let k = active.len() + 1;

    let mut design = Array2::zeros((n, k));
    for i in 0..n {
        design[[i, 0]] = 1.0;
        for (c, &j) in active.iter().enumerate() {
            design[[i, c + 1]] = x[[i, j]];
        }
    }

    let mut alpha = vec![0.0; k];
    let mut eta = vec![0.0; n];
    let mut mu: Vec<f64> = eta.iter().map(|&e| link.inverse(e)).collect();
    let mut ll = log_likelihood(d, &mu);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut separation_warning = false;
    let mut iterations = 0;

    for iter in 0..MAX_ITERATIONS {
        iterations = iter + 1;
        let mut weights = Vec::with_capacity(n);
        let mut working = Vec::with_capacity(n);
        for i in 0..n {
            let m = mu[i].clamp(MU_CLAMP, 1.0 - MU_CLAMP);
            let g = link.derivative(eta[i], m).max(MU_CLAMP);
            let w = match link {
                Link::Logit => m * (1.0 - m),
                Link::Probit => g * g / (m * (1.0 - m)),
            };
            weights.push(w);
            working.push(eta[i] + (d[i] as f64 - m) / g);
        }
        let solution = wls_solve(&WlsProblem {
            design: design.clone(),
            weights,
            response: working,
        })?;
        if iter == 0 && solution.regularized {
            return Err(Error::SingularDesign(
                "covariate matrix (with intercept) is rank deficient".to_string(),
            ));
        }
        let proposal = solution.coefficients;

        // Step-halving keeps the likelihood nondecreasing.
        let mut step = 1.0;
        let (mut cand_eta, mut cand_mu, mut cand_ll);
        let mut cand_alpha: Vec<f64>;
        let mut halvings = 0;
        loop {
            cand_alpha = alpha
                .iter()
                .zip(&proposal)
                .map(|(&a, &b)| a + step * (b - a))
                .collect();
            cand_eta = (0..n)
                .map(|i| {
                    let mut e = cand_alpha[0];
                    for (c, _) in active.iter().enumerate() {
                        e += design[[i, c + 1]] * cand_alpha[c + 1];
                    }
                    e
                })
                .collect::<Vec<f64>>();
            cand_mu = cand_eta.iter().map(|&e| link.inverse(e)).collect::<Vec<f64>>();
            cand_ll = log_likelihood(d, &cand_mu);
            if cand_ll >= ll - 1e-12 || halvings >= MAX_STEP_HALVINGS {
                break;
            }
            step *= 0.5;
            halvings += 1;
        }
        if cand_ll < ll - 1e-12 {
            // No improving step; stop at the previous iterate.
            break;
        }

        let delta = alpha
            .iter()
            .zip(&cand_alpha)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let improving = cand_ll > ll;
        alpha = cand_alpha;
        eta = cand_eta;
        mu = cand_mu;
        ll = cand_ll;
        trace.push(ll);

        let norm = alpha.iter().map(|a| a.abs()).fold(0.0f64, f64::max);
        if norm > SEPARATION_NORM && improving {
            separation_warning = true;
            break;
        }
        if delta < COEF_TOL {
            converged = true;
            break;
        }
    }

    let mut alpha_hat = vec![0.0; p + 1];
    alpha_hat[0] = alpha[0];
    for (c, &j) in active.iter().enumerate() {
        alpha_hat[j + 1] = alpha[c + 1];
    }
    Ok((
        PropensityFit {
            alpha_hat,
            link,
            converged,
            iterations,
            separation_warning,
        },
        trace,
    ))
}

/// Scores for a covariate matrix with the same column layout the fit was
/// trained on. Values are clamped to `[1e-6, 1 - 1e-6]`.
pub fn predict_scores(fit: &PropensityFit, x: &Array2<f64>) -> Result<Vec<f64>> {
    if x.ncols() + 1 != fit.alpha_hat.len() {
        return Err(Error::invalid(format!(
            "fit has {} coefficients (incl. intercept) but matrix has {} columns",
            fit.alpha_hat.len(),
            x.ncols()
        )));
    }
    Ok(x.rows()
        .into_iter()
        .map(|row| {
            let mut eta = fit.alpha_hat[0];
            for (j, &v) in row.iter().enumerate() {
                eta += v * fit.alpha_hat[j + 1];
            }
            clamp_score(fit.link.inverse(eta))
        })
        .collect())
}

#[inline]
pub fn clamp_score(e: f64) -> f64 {
    e.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
}

/// Per-row scores under the given policy. `External` requires the dataset to
/// carry a score column.
pub fn resolve_scores(dataset: &ObservationalDataset, policy: ScorePolicy) -> Result<Vec<f64>> {
    resolve_scores_with_fit(dataset, policy).map(|(scores, _)| scores)
}

/// As [`resolve_scores`], also returning the fitted model when one was
/// estimated (for diagnostics).
pub fn resolve_scores_with_fit(
    dataset: &ObservationalDataset,
    policy: ScorePolicy,
) -> Result<(Vec<f64>, Option<PropensityFit>)> {
    match policy {
        ScorePolicy::External => {
            let scores = dataset.external_scores().ok_or_else(|| {
                Error::Configuration(
                    "external score policy requires a score column in the dataset".to_string(),
                )
            })?;
            Ok((scores.iter().map(|&e| clamp_score(e)).collect(), None))
        }
        ScorePolicy::FitLogit | ScorePolicy::FitProbit => {
            let link = if policy == ScorePolicy::FitLogit {
                Link::Logit
            } else {
                Link::Probit
            };
            let fit = fit_glm(dataset, link)?;
            let scores = predict_scores(&fit, dataset.covariates())?;
            Ok((scores, Some(fit)))
        }
    }
}
