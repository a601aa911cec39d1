//! The propensity score regression pipeline: score resolution (step 0), the
//! varying-coefficient regression of the outcome on the covariate of
//! interest and the score (step 1), projection of the fitted treatment
//! coefficient onto the covariate of interest alone (step 2), the plug-in
//! asymptotic variance, and pointwise confidence bands.
//!
//! The estimator depends on the score only through a bounded regression
//! surface, so scores near 0 or 1 do not destabilize it the way inverse
//! weights do. Any one-to-one transform of the score spans the same
//! information; smoothing happens on the probability scale by default with
//! the logit scale behind a switch.

use rayon::prelude::*;

use crate::data::{fmt_g6, fmt_opt_g6, json_opt_g6, EvaluationGrid, ObservationalDataset};
use crate::error::{Error, Result};
use crate::kernel::{kde, silverman_bandwidth, KernelKind};
use crate::locfit::{
    local_linear_with, lscv_bandwidth_blocked, lscv_step1_bandwidths, rot_bandwidth,
    step1_fit_at_samples, BandwidthMethod, Step1Fit, WlsWorkspace,
};
use crate::numeric::normal_quantile;
use crate::propensity::{resolve_scores_with_fit, ScorePolicy};

/// Density floor below which a grid point's variance is reported missing.
const DENSITY_FLOOR: f64 = 1e-10;

/// Estimator identity carried on results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Psr,
    Ipw,
    Aipw,
    MatchPsr,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Psr => "psr",
            Method::Ipw => "ipw",
            Method::Aipw => "aipw",
            Method::MatchPsr => "match_psr",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "psr" => Ok(Method::Psr),
            "ipw" => Ok(Method::Ipw),
            "aipw" => Ok(Method::Aipw),
            "match" | "match_psr" => Ok(Method::MatchPsr),
            other => Err(Error::invalid(format!("unknown method '{other}'"))),
        }
    }
}

/// Smoothing bandwidths actually used by a fit. Step-1 bandwidths are absent
/// for the single-smoother baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidths {
    pub h1: Option<f64>,
    pub h2: Option<f64>,
    pub h3: f64,
}

/// Fit-quality indicators surfaced on every estimate.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Diagnostics {
    /// Fraction of evaluation points whose local solve needed ridge
    /// regularization.
    pub regularized_fraction: f64,
    /// (min, max) of the resolved scores.
    pub score_range: (f64, f64),
    /// More than 20% of step-1 evaluation points were regularized.
    pub sparse_overlap: bool,
    /// The score fit showed signs of separation.
    pub separation_warning: bool,
    /// Grid points where the density estimate underflowed.
    pub density_underflow_points: usize,
    /// Grid points whose variance floored to zero, giving a degenerate band.
    pub degenerate_band_points: usize,
    /// Matching fell back to the Euclidean metric (singular covariance).
    pub euclidean_fallback: bool,
}

/// Effect curve on an evaluation grid, with optional pointwise variance and
/// confidence band. Missing entries mark grid points where the smoother had
/// an empty neighborhood or the variance was unavailable; they are reported
/// missing, never fabricated.
#[derive(Debug, Clone, PartialEq)]
pub struct HTEEstimate {
    pub grid: EvaluationGrid,
    pub tau_hat: Vec<Option<f64>>,
    pub variance: Option<Vec<Option<f64>>>,
    pub ci_lo: Option<Vec<Option<f64>>>,
    pub ci_hi: Option<Vec<Option<f64>>>,
    pub method: Method,
    pub bandwidths: Bandwidths,
    pub diagnostics: Diagnostics,
}

impl crate::data::ResultRecord for HTEEstimate {
    fn to_csv_string(&self) -> String {
        let mut out = String::from("x,tau_hat,variance,ci_lo,ci_hi\n");
        for (j, &x) in self.grid.points().iter().enumerate() {
            let var = self.variance.as_ref().and_then(|v| v[j]);
            let lo = self.ci_lo.as_ref().and_then(|v| v[j]);
            let hi = self.ci_hi.as_ref().and_then(|v| v[j]);
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt_g6(x),
                fmt_opt_g6(self.tau_hat[j]),
                fmt_opt_g6(var),
                fmt_opt_g6(lo),
                fmt_opt_g6(hi),
            ));
        }
        out
    }

    fn to_json_string(&self) -> String {
        let mut out = String::from("{\"points\":[");
        for (j, &x) in self.grid.points().iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let var = self.variance.as_ref().and_then(|v| v[j]);
            let lo = self.ci_lo.as_ref().and_then(|v| v[j]);
            let hi = self.ci_hi.as_ref().and_then(|v| v[j]);
            out.push_str(&format!(
                "{{\"x\":{},\"tau_hat\":{},\"variance\":{},\"ci_lo\":{},\"ci_hi\":{}}}",
                fmt_g6(x),
                json_opt_g6(self.tau_hat[j]),
                json_opt_g6(var),
                json_opt_g6(lo),
                json_opt_g6(hi),
            ));
        }
        out.push_str("]}\n");
        out
    }
}

/// Scale on which step 1 smooths the score. Any one-to-one transform is a
/// valid smoothing coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreScale {
    #[default]
    Probability,
    Logit,
}

impl ScoreScale {
    fn apply(self, e: f64) -> f64 {
        match self {
            ScoreScale::Probability => e,
            ScoreScale::Logit => (e / (1.0 - e)).ln(),
        }
    }
}

/// How the pipeline picks its bandwidths. The step-1 pair and the step-2
/// bandwidth may use different selectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthPolicy {
    Select {
        step1: BandwidthMethod,
        step2: BandwidthMethod,
    },
    /// Caller-supplied bandwidths.
    Fixed { h1: f64, h2: f64, h3: f64 },
}

impl BandwidthPolicy {
    /// Selector method applied to every smoothing target.
    pub fn uniform(method: BandwidthMethod) -> Self {
        BandwidthPolicy::Select {
            step1: method,
            step2: method,
        }
    }
}

impl Default for BandwidthPolicy {
    fn default() -> Self {
        BandwidthPolicy::uniform(BandwidthMethod::Rot)
    }
}

/// Pipeline options.
#[derive(Debug, Clone, Copy, Default)]
pub struct PsrConfig {
    pub kernel: KernelKind,
    pub bandwidths: BandwidthPolicy,
    pub score_scale: ScoreScale,
}

/// Everything the two regression steps produce, kept for the variance step.
#[derive(Debug, Clone)]
pub struct PsrOutput {
    pub estimate: HTEEstimate,
    pub step1: Step1Fit,
    /// Resolved scores on the probability scale.
    pub scores: Vec<f64>,
    /// Scores on the smoothing scale (equal to `scores` unless logit).
    pub smoothed_scores: Vec<f64>,
}

/// Run steps 0-2 and return the effect curve without variance.
pub fn psr_estimate(
    dataset: &ObservationalDataset,
    score_policy: ScorePolicy,
    config: &PsrConfig,
    grid: &EvaluationGrid,
) -> Result<PsrOutput> {
    let (scores, fit) = resolve_scores_with_fit(dataset, score_policy)?;
    let smoothed_scores: Vec<f64> = scores.iter().map(|&e| config.score_scale.apply(e)).collect();
    let xl = dataset.xl().to_vec();

    let (h1, h2) = match config.bandwidths {
        BandwidthPolicy::Fixed { h1, h2, .. } => (h1, h2),
        BandwidthPolicy::Select {
            step1: BandwidthMethod::Rot,
            ..
        } => (rot_bandwidth(&xl)?, rot_bandwidth(&smoothed_scores)?),
        BandwidthPolicy::Select {
            step1: BandwidthMethod::Lscv,
            ..
        } => lscv_step1_bandwidths(dataset, &smoothed_scores, config.kernel)?,
    };
    let step1 = step1_fit_at_samples(dataset, &smoothed_scores, h1, h2, config.kernel)?;
    let h3 = match config.bandwidths {
        BandwidthPolicy::Fixed { h3, .. } => h3,
        BandwidthPolicy::Select {
            step2: BandwidthMethod::Rot,
            ..
        } => rot_bandwidth(&xl)?,
        BandwidthPolicy::Select {
            step2: BandwidthMethod::Lscv,
            ..
        } => {
            // The step-1 surface carries noise correlated over an h1-wide
            // kernel window; block that window out of the CV folds.
            lscv_bandwidth_blocked(&xl, &step1.beta_at_sample, config.kernel, 2.0 * h1)?
        }
    };

    let tau_hat = smooth_on_grid(&xl, &step1.beta_at_sample, h3, grid, config.kernel);
    let score_range = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &e| {
            (lo.min(e), hi.max(e))
        });
    let estimate = HTEEstimate {
        grid: grid.clone(),
        tau_hat,
        variance: None,
        ci_lo: None,
        ci_hi: None,
        method: Method::Psr,
        bandwidths: Bandwidths {
            h1: Some(h1),
            h2: Some(h2),
            h3,
        },
        diagnostics: Diagnostics {
            regularized_fraction: step1.regularized_fraction,
            score_range,
            sparse_overlap: step1.sparse_overlap,
            separation_warning: fit.as_ref().map(|f| f.separation_warning).unwrap_or(false),
            ..Diagnostics::default()
        },
    };
    Ok(PsrOutput {
        estimate,
        step1,
        scores,
        smoothed_scores,
    })
}

/// Local linear fit of `values` on `x` at each grid point; empty
/// neighborhoods yield missing entries.
pub fn smooth_on_grid(
    x: &[f64],
    values: &[f64],
    h: f64,
    grid: &EvaluationGrid,
    kind: KernelKind,
) -> Vec<Option<f64>> {
    grid.points()
        .par_iter()
        .map_init(WlsWorkspace::new, |ws, &x0| {
            local_linear_with(ws, x, values, h, x0, kind, None)
                .ok()
                .map(|fit| fit.value)
        })
        .collect()
}

/// The step-2 smoother evaluated at every sample point; the variance uses
/// these to center the fitted treatment coefficients.
pub fn tau_at_sample_points(
    x: &[f64],
    beta: &[f64],
    h3: f64,
    kind: KernelKind,
) -> Vec<Option<f64>> {
    x.par_iter()
        .map_init(WlsWorkspace::new, |ws, &x0| {
            local_linear_with(ws, x, beta, h3, x0, kind, None)
                .ok()
                .map(|fit| fit.value)
        })
        .collect()
}

/// Per-grid-point pieces of the plug-in variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceComponents {
    /// Local-linear fit of the squared centered treatment coefficient
    /// (floored at zero).
    pub beta_variance: f64,
    /// Local-linear fit of the transformed squared residuals (floored at
    /// zero).
    pub residual_moment: f64,
    /// Kernel density estimate of the covariate of interest.
    pub density: f64,
}

#[derive(Debug, Clone)]
pub struct VarianceOutput {
    pub variance: Vec<Option<f64>>,
    pub components: Vec<Option<VarianceComponents>>,
    pub density_underflow_points: usize,
}

/// Plug-in asymptotic variance on the grid:
/// `(nu * V(beta | x) + kbar2 * E[(d-e)^2 xi^2 / (e^2 (1-e)^2) | x])
///  / (n h3 f(x))`,
/// with both conditional moments fit by local linear regression at
/// bandwidth `h3`, the density by KDE at the Silverman bandwidth, and the
/// kernel constants at ratio `h1/h3`. Negative fitted moments floor to
/// zero; a point where both floor is reported missing.
pub fn psr_variance(
    dataset: &ObservationalDataset,
    scores: &[f64],
    step1: &Step1Fit,
    tau_at_samples: &[Option<f64>],
    h3: f64,
    grid: &EvaluationGrid,
    kind: KernelKind,
) -> Result<VarianceOutput> {
    let n = dataset.n();
    if scores.len() != n || step1.beta_at_sample.len() != n || tau_at_samples.len() != n {
        return Err(Error::ShapeMismatch(
            "scores, step-1 fit, and sample-point effects must all have length n".to_string(),
        ));
    }
    if !(h3 > 0.0) {
        return Err(Error::invalid(format!("h3 must be positive, got {h3}")));
    }
    let xl = dataset.xl().to_vec();
    let constants = kind.constants(step1.h1, h3)?;

    // Squared centered treatment coefficient, at rows where the centering
    // smoother produced a value.
    let mut centered_x = Vec::with_capacity(n);
    let mut centered_sq = Vec::with_capacity(n);
    for i in 0..n {
        if let Some(tau_i) = tau_at_samples[i] {
            let c = step1.beta_at_sample[i] - tau_i;
            centered_x.push(xl[i]);
            centered_sq.push(c * c);
        }
    }

    // Transformed squared residuals on the probability scale. The squared
    // residual is divided by (1 - leverage) to undo the shrinkage each
    // sample's own local fit applies to its residual; without it the moment
    // is biased down wherever neighborhoods are sparse.
    let d = dataset.treatment();
    let residual_target: Vec<f64> = (0..n)
        .map(|i| {
            let e = scores[i];
            let dd = d[i] as f64 - e;
            let xi2 = step1.residuals[i] * step1.residuals[i]
                / (1.0 - step1.leverage[i].min(0.99));
            dd * dd * xi2 / (e * e * (1.0 - e) * (1.0 - e))
        })
        .collect();

    let kde_h = silverman_bandwidth(&xl)?;
    let nh3 = n as f64 * h3;

    let per_point: Vec<(Option<f64>, Option<VarianceComponents>, bool)> = grid
        .points()
        .par_iter()
        .map_init(WlsWorkspace::new, |ws, &x0| {
            let beta_variance = if centered_x.len() >= 2 {
                local_linear_with(ws, &centered_x, &centered_sq, h3, x0, kind, None)
                    .map(|f| f.value.max(0.0))
                    .unwrap_or(0.0)
            } else {
                0.0
            };
            let residual_moment =
                match local_linear_with(ws, &xl, &residual_target, h3, x0, kind, None) {
                    Ok(f) => f.value.max(0.0),
                    Err(_) => 0.0,
                };
            let density = kde(&xl, kde_h, x0, kind).unwrap_or(0.0);
            let comps = VarianceComponents {
                beta_variance,
                residual_moment,
                density,
            };
            if density < DENSITY_FLOOR {
                return (None, Some(comps), true);
            }
            if beta_variance == 0.0 && residual_moment == 0.0 {
                return (None, Some(comps), false);
            }
            let v = (constants.nu * beta_variance + constants.kbar_sq_integral * residual_moment)
                / (nh3 * density);
            (Some(v), Some(comps), false)
        })
        .collect();

    let density_underflow_points = per_point.iter().filter(|t| t.2).count();
    Ok(VarianceOutput {
        variance: per_point.iter().map(|t| t.0).collect(),
        components: per_point.iter().map(|t| t.1).collect(),
        density_underflow_points,
    })
}

/// Attach a pointwise two-sided confidence band at `level`. Points with
/// missing variance get a missing band; a floored-to-zero variance yields a
/// degenerate band equal to the point estimate and is counted in the
/// diagnostics.
pub fn confidence_band(estimate: &mut HTEEstimate, level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level must be in (0,1), got {level}")));
    }
    let variance = estimate
        .variance
        .as_ref()
        .ok_or_else(|| Error::Configuration("confidence band requires a variance".to_string()))?;
    let z = normal_quantile((1.0 + level) / 2.0);
    let mut lo = Vec::with_capacity(variance.len());
    let mut hi = Vec::with_capacity(variance.len());
    let mut degenerate = 0usize;
    for (tau, var) in estimate.tau_hat.iter().zip(variance) {
        match (tau, var) {
            (Some(t), Some(v)) => {
                if *v == 0.0 {
                    degenerate += 1;
                }
                let half = z * v.sqrt();
                lo.push(Some(t - half));
                hi.push(Some(t + half));
            }
            _ => {
                lo.push(None);
                hi.push(None);
            }
        }
    }
    estimate.ci_lo = Some(lo);
    estimate.ci_hi = Some(hi);
    estimate.diagnostics.degenerate_band_points = degenerate;
    Ok(())
}

/// Full pipeline: estimate, plug-in variance, and band at `level`.
pub fn psr_with_bands(
    dataset: &ObservationalDataset,
    score_policy: ScorePolicy,
    config: &PsrConfig,
    grid: &EvaluationGrid,
    level: f64,
) -> Result<HTEEstimate> {
    let output = psr_estimate(dataset, score_policy, config, grid)?;
    let xl = dataset.xl().to_vec();
    let h3 = output.estimate.bandwidths.h3;
    let tau_samples = tau_at_sample_points(&xl, &output.step1.beta_at_sample, h3, config.kernel);
    let var = psr_variance(
        dataset,
        &output.scores,
        &output.step1,
        &tau_samples,
        h3,
        grid,
        config.kernel,
    )?;
    let mut estimate = output.estimate;
    estimate.diagnostics.density_underflow_points = var.density_underflow_points;
    estimate.variance = Some(var.variance);
    confidence_band(&mut estimate, level)?;
    Ok(estimate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_effect_dataset(n: usize, seed: u64) -> ObservationalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((n, 2));
        let mut d = Vec::with_capacity(n);
        let mut scores = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let e: f64 = rng.gen_range(0.25..0.75);
            let di = u8::from(rng.gen_range(0.0..1.0) < e);
            x[[i, 0]] = rng.gen_range(-0.5..0.5);
            x[[i, 1]] = rng.gen_range(-1.0..1.0);
            scores.push(e);
            d.push(di);
            y.push(3.0 * di as f64);
        }
        ObservationalDataset::new(x, 0, d, y, Some(scores)).unwrap()
    }

    fn interior_grid(lo: f64, hi: f64, m: usize) -> EvaluationGrid {
        EvaluationGrid::new(crate::numeric::linspace(lo, hi, m)).unwrap()
    }

    #[test]
    fn constant_effect_recovered_exactly() {
        let ds = constant_effect_dataset(300, 3);
        let grid = interior_grid(-0.4, 0.4, 9);
        let out = psr_estimate(&ds, ScorePolicy::External, &PsrConfig::default(), &grid).unwrap();
        for t in &out.estimate.tau_hat {
            assert_abs_diff_eq!(t.unwrap(), 3.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn location_shift_leaves_effect_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ds = constant_effect_dataset(250, 4);
        let noisy: Vec<f64> = ds
            .outcome()
            .iter()
            .zip(ds.xl().iter())
            .map(|(&y, &x)| y + x * 0.5 + rng.gen_range(-1.0..1.0))
            .collect();
        let ds = ds.with_outcome(noisy).unwrap();
        let grid = interior_grid(-0.4, 0.4, 7);
        let config = PsrConfig::default();
        let base = psr_estimate(&ds, ScorePolicy::External, &config, &grid).unwrap();
        let shifted_ds = ds
            .with_outcome(ds.outcome().iter().map(|y| y + 41.0).collect())
            .unwrap();
        let shifted = psr_estimate(&shifted_ds, ScorePolicy::External, &config, &grid).unwrap();
        for (a, b) in base.estimate.tau_hat.iter().zip(&shifted.estimate.tau_hat) {
            assert_abs_diff_eq!(a.unwrap(), b.unwrap(), epsilon = 1e-10);
        }
    }

    #[test]
    fn label_swap_negates_effect() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ds = constant_effect_dataset(250, 5);
        let noisy: Vec<f64> = ds
            .outcome()
            .iter()
            .map(|&y| y + rng.gen_range(-1.0..1.0))
            .collect();
        let ds = ds.with_outcome(noisy).unwrap();
        let grid = interior_grid(-0.4, 0.4, 7);
        let config = PsrConfig::default();
        let base = psr_estimate(&ds, ScorePolicy::External, &config, &grid).unwrap();
        let swapped = psr_estimate(
            &ds.with_swapped_labels().unwrap(),
            ScorePolicy::External,
            &config,
            &grid,
        )
        .unwrap();
        for (a, b) in base.estimate.tau_hat.iter().zip(&swapped.estimate.tau_hat) {
            assert_abs_diff_eq!(a.unwrap(), -b.unwrap(), epsilon = 1e-10);
        }
    }

    #[test]
    fn pipeline_is_deterministic() {
        let ds = constant_effect_dataset(150, 6);
        let grid = interior_grid(-0.3, 0.3, 5);
        let a = psr_with_bands(&ds, ScorePolicy::External, &PsrConfig::default(), &grid, 0.95)
            .unwrap();
        let b = psr_with_bands(&ds, ScorePolicy::External, &PsrConfig::default(), &grid, 0.95)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn band_halfwidth_quantiles() {
        let grid = interior_grid(0.0, 1.0, 2);
        let mut est = HTEEstimate {
            grid,
            tau_hat: vec![Some(1.0), Some(2.0)],
            variance: Some(vec![Some(0.01), Some(0.0)]),
            ci_lo: None,
            ci_hi: None,
            method: Method::Psr,
            bandwidths: Bandwidths {
                h1: None,
                h2: None,
                h3: 0.1,
            },
            diagnostics: Diagnostics::default(),
        };
        confidence_band(&mut est, 0.95).unwrap();
        let lo = est.ci_lo.as_ref().unwrap();
        let hi = est.ci_hi.as_ref().unwrap();
        assert_abs_diff_eq!(hi[0].unwrap() - est.tau_hat[0].unwrap(), 0.195996, epsilon = 1e-5);
        // floored variance: degenerate band flagged
        assert_eq!(lo[1].unwrap(), 2.0);
        assert_eq!(hi[1].unwrap(), 2.0);
        assert_eq!(est.diagnostics.degenerate_band_points, 1);

        confidence_band(&mut est, 0.5).unwrap();
        let hi = est.ci_hi.as_ref().unwrap();
        assert_abs_diff_eq!(
            hi[0].unwrap() - est.tau_hat[0].unwrap(),
            0.674490 * 0.1,
            epsilon = 1e-5
        );
    }

    #[test]
    fn band_requires_variance_and_valid_level() {
        let grid = interior_grid(0.0, 1.0, 2);
        let mut est = HTEEstimate {
            grid,
            tau_hat: vec![Some(1.0), Some(2.0)],
            variance: None,
            ci_lo: None,
            ci_hi: None,
            method: Method::Psr,
            bandwidths: Bandwidths {
                h1: None,
                h2: None,
                h3: 0.1,
            },
            diagnostics: Diagnostics::default(),
        };
        assert!(confidence_band(&mut est, 0.95).is_err());
        est.variance = Some(vec![Some(1.0), None]);
        assert!(confidence_band(&mut est, 1.5).is_err());
        confidence_band(&mut est, 0.9).unwrap();
        assert!(est.ci_lo.as_ref().unwrap()[1].is_none());
    }

    // Independent smoother oracle: closed-form two-column weighted normal
    // equations, coded without the QR machinery.
    fn oracle_local_linear(x: &[f64], y: &[f64], h: f64, x0: f64) -> f64 {
        let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for j in 0..x.len() {
            let u = (x[j] - x0) / h;
            let w = (-0.5 * u * u).exp() / (h * crate::numeric::SQRT_2PI);
            s0 += w;
            s1 += w * u;
            s2 += w * u * u;
            t0 += w * y[j];
            t1 += w * u * y[j];
        }
        (s2 * t0 - s1 * t1) / (s0 * s2 - s1 * s1)
    }

    #[test]
    fn variance_components_match_independent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 200;
        let ds = constant_effect_dataset(n, 7);
        let noisy: Vec<f64> = ds
            .outcome()
            .iter()
            .zip(ds.xl().iter())
            .map(|(&y, &x)| y + x + rng.gen_range(-1.0..1.0))
            .collect();
        let ds = ds.with_outcome(noisy).unwrap();
        let grid = interior_grid(-0.3, 0.3, 5);
        let config = PsrConfig {
            bandwidths: BandwidthPolicy::Fixed {
                h1: 0.2,
                h2: 0.15,
                h3: 0.18,
            },
            ..PsrConfig::default()
        };
        let out = psr_estimate(&ds, ScorePolicy::External, &config, &grid).unwrap();
        let xl = ds.xl().to_vec();
        let tau_s = tau_at_sample_points(&xl, &out.step1.beta_at_sample, 0.18, config.kernel);
        let var = psr_variance(&ds, &out.scores, &out.step1, &tau_s, 0.18, &grid, config.kernel)
            .unwrap();

        let centered_sq: Vec<f64> = (0..n)
            .map(|i| {
                let c = out.step1.beta_at_sample[i] - tau_s[i].unwrap();
                c * c
            })
            .collect();
        let resid_target: Vec<f64> = (0..n)
            .map(|i| {
                let e = out.scores[i];
                let dd = ds.treatment()[i] as f64 - e;
                let xi2 = out.step1.residuals[i] * out.step1.residuals[i]
                    / (1.0 - out.step1.leverage[i].min(0.99));
                dd * dd * xi2 / (e * e * (1.0 - e) * (1.0 - e))
            })
            .collect();
        let kde_h = silverman_bandwidth(&xl).unwrap();
        for (j, &x0) in grid.points().iter().enumerate() {
            let comps = var.components[j].unwrap();
            let want_v1 = oracle_local_linear(&xl, &centered_sq, 0.18, x0).max(0.0);
            let want_v2 = oracle_local_linear(&xl, &resid_target, 0.18, x0).max(0.0);
            let want_f: f64 = xl
                .iter()
                .map(|&s| (-0.5 * ((x0 - s) / kde_h).powi(2)).exp())
                .sum::<f64>()
                / (n as f64 * kde_h * crate::numeric::SQRT_2PI);
            assert!((comps.beta_variance - want_v1).abs() <= 1e-8 * (1.0 + want_v1));
            assert!((comps.residual_moment - want_v2).abs() <= 1e-8 * (1.0 + want_v2));
            assert!((comps.density - want_f).abs() <= 1e-8 * (1.0 + want_f));
        }
    }

    #[test]
    fn constant_effect_variance_is_residual_driven() {
        // With a constant effect the centered-coefficient component should
        // shrink with n while the residual term persists.
        let grid = interior_grid(-0.3, 0.3, 3);
        let mut comp1 = Vec::new();
        for &n in &[400usize, 1600] {
            let ds = constant_effect_dataset(n, 11);
            let noisy: Vec<f64> = {
                let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
                ds.outcome()
                    .iter()
                    .map(|&y| y + rng.gen_range(-1.0..1.0))
                    .collect()
            };
            let ds = ds.with_outcome(noisy).unwrap();
            let config = PsrConfig::default();
            let out = psr_estimate(&ds, ScorePolicy::External, &config, &grid).unwrap();
            let xl = ds.xl().to_vec();
            let h3 = out.estimate.bandwidths.h3;
            let tau_s = tau_at_sample_points(&xl, &out.step1.beta_at_sample, h3, config.kernel);
            let var =
                psr_variance(&ds, &out.scores, &out.step1, &tau_s, h3, &grid, config.kernel)
                    .unwrap();
            let mean_comp1 = var
                .components
                .iter()
                .map(|c| c.unwrap().beta_variance)
                .sum::<f64>()
                / 3.0;
            let mean_comp2 = var
                .components
                .iter()
                .map(|c| c.unwrap().residual_moment)
                .sum::<f64>()
                / 3.0;
            assert!(mean_comp2 > mean_comp1);
            comp1.push(mean_comp1);
        }
        assert!(comp1[1] < comp1[0]);
    }
}
