//! Weighted least squares, univariate local linear regression, the step-1
//! varying-coefficient fit, and bandwidth selection.
//!
//! Every estimator in the crate reduces to one weighted least squares solve
//! per evaluation point. The solver runs a Householder QR on the weighted
//! design. When the weighted Gram matrix is singular to working precision
//! (condition estimate above 1e12) the solve is retried with a small ridge
//! and the solution is flagged as regularized; callers decide what a high
//! flagged fraction means (see `sparse_overlap`).

use ndarray::Array2;
use rayon::prelude::*;

use crate::data::ObservationalDataset;
use crate::error::{Error, Result};
use crate::kernel::{silverman_bandwidth, KernelKind};

/// Condition-estimate threshold beyond which a solve is considered singular
/// to working precision.
const COND_LIMIT: f64 = 1e12;
/// Ridge scale applied on the regularized path: `1e-8 * trace(G'WG)/k`.
const RIDGE_SCALE: f64 = 1e-8;
/// Fraction of regularized evaluation points above which a step-1 fit
/// carries a sparse-overlap warning.
const SPARSE_OVERLAP_LIMIT: f64 = 0.20;

/// A weighted least squares problem: minimize `sum_i w_i (y_i - g_i' c)^2`.
#[derive(Debug, Clone)]
pub struct WlsProblem {
    pub design: Array2<f64>,
    pub weights: Vec<f64>,
    pub response: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct WlsSolution {
    pub coefficients: Vec<f64>,
    /// True when the ridge path was taken.
    pub regularized: bool,
}

/// Reusable scratch for the QR solver; one per worker thread in hot loops.
#[derive(Debug, Default, Clone)]
pub struct WlsWorkspace {
    b: Vec<f64>,
    z: Vec<f64>,
    coef: Vec<f64>,
}

impl WlsWorkspace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Solve from a row producer: `fill` writes row `i`'s design into `row`
    /// and returns `(weight_i, y_i)`. Rows with zero weight are skipped.
    fn solve_rows<F>(&mut self, n: usize, k: usize, mut fill: F) -> Result<(&[f64], bool)>
    where
        F: FnMut(usize, &mut [f64]) -> (f64, f64),
    {
        self.b.clear();
        self.z.clear();
        self.b.reserve((n + k) * k);
        self.z.reserve(n + k);
        let mut row = vec![0.0; k];
        let mut trace = 0.0;
        let mut rows = 0usize;
        for i in 0..n {
            let (w, y) = fill(i, &mut row);
            debug_assert!(w >= 0.0, "negative weight");
            if w == 0.0 {
                continue;
            }
            let sw = w.sqrt();
            for &v in row.iter() {
                let bv = sw * v;
                trace += bv * bv;
                self.b.push(bv);
            }
            self.z.push(sw * y);
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::EmptyNeighborhood {
                at: f64::NAN,
            });
        }

        self.coef.resize(k, 0.0);
        if rows >= k {
            let ok = qr_solve(&mut self.b, &mut self.z, rows, k, &mut self.coef);
            if ok {
                return Ok((&self.coef, false));
            }
        }
        // Ridge path: append sqrt(lambda) * I rows to the weighted design.
        let lambda = RIDGE_SCALE * trace / k as f64;
        if lambda == 0.0 {
            // All-zero design with positive weights; zero minimizes.
            self.coef.iter_mut().for_each(|c| *c = 0.0);
            return Ok((&self.coef, true));
        }
        // Rebuild: qr_solve destroyed b in place, so refill.
        self.b.clear();
        self.z.clear();
        let mut rows = 0usize;
        for i in 0..n {
            let (w, y) = fill(i, &mut row);
            if w == 0.0 {
                continue;
            }
            let sw = w.sqrt();
            for &v in row.iter() {
                self.b.push(sw * v);
            }
            self.z.push(sw * y);
            rows += 1;
        }
        let sl = lambda.sqrt();
        for j in 0..k {
            for jj in 0..k {
                self.b.push(if j == jj { sl } else { 0.0 });
            }
            self.z.push(0.0);
        }
        let ok = qr_solve(&mut self.b, &mut self.z, rows + k, k, &mut self.coef);
        if !ok {
            return Err(Error::SingularDesign(
                "ridge-augmented system still singular".to_string(),
            ));
        }
        Ok((&self.coef, true))
    }

    /// Leverage `w * g' (G'WG)^{-1} g` of a row with regressors `g` and
    /// weight `w`, using the triangular factor left by the last solve. Must
    /// be called immediately after `solve_rows`.
    fn self_leverage(&self, g: &[f64], w: f64) -> f64 {
        let k = g.len();
        // forward-solve R't = g on the stored upper factor
        let mut t = vec![0.0; k];
        for j in 0..k {
            let mut v = g[j];
            for m in 0..j {
                v -= self.b[m * k + j] * t[m];
            }
            let r = self.b[j * k + j];
            if r == 0.0 {
                return 0.0;
            }
            t[j] = v / r;
        }
        w * t.iter().map(|v| v * v).sum::<f64>()
    }
}

/// In-place Householder QR of the `m x k` row-major matrix `b`, applying the
/// reflections to `z` and back-substituting into `coef`. Returns false when
/// the triangular factor is singular to working precision.
fn qr_solve(b: &mut [f64], z: &mut [f64], m: usize, k: usize, coef: &mut [f64]) -> bool {
    debug_assert!(b.len() >= m * k && z.len() >= m);
    let mut rdiag_min = f64::INFINITY;
    let mut rdiag_max: f64 = 0.0;
    for j in 0..k {
        // Column norm below the diagonal.
        let mut norm2 = 0.0;
        for i in j..m {
            let v = b[i * k + j];
            norm2 += v * v;
        }
        let norm = norm2.sqrt();
        if norm == 0.0 {
            return false;
        }
        let ajj = b[j * k + j];
        let alpha = if ajj > 0.0 { -norm } else { norm };
        // Householder vector v: v_j = a_jj - alpha, v_i = a_ij (i > j),
        // stored over the column.
        b[j * k + j] = ajj - alpha;
        let vjj = b[j * k + j];
        let beta = 1.0 / (alpha * vjj); // equals -2/(v'v)
        for c in (j + 1)..k {
            let mut dot = 0.0;
            for i in j..m {
                dot += b[i * k + j] * b[i * k + c];
            }
            let s = beta * dot;
            for i in j..m {
                b[i * k + c] += s * b[i * k + j];
            }
        }
        let mut dot = 0.0;
        for i in j..m {
            dot += b[i * k + j] * z[i];
        }
        let s = beta * dot;
        for i in j..m {
            z[i] += s * b[i * k + j];
        }
        b[j * k + j] = alpha;
        rdiag_min = rdiag_min.min(alpha.abs());
        rdiag_max = rdiag_max.max(alpha.abs());
    }
    if !(rdiag_min > 0.0) || rdiag_max / rdiag_min > COND_LIMIT {
        return false;
    }
    for j in (0..k).rev() {
        let mut v = z[j];
        for c in (j + 1)..k {
            v -= b[j * k + c] * coef[c];
        }
        coef[j] = v / b[j * k + j];
    }
    true
}

/// Solve a weighted least squares problem.
pub fn wls_solve(problem: &WlsProblem) -> Result<WlsSolution> {
    let n = problem.design.nrows();
    let k = problem.design.ncols();
    if k == 0 {
        return Err(Error::invalid("design needs at least one column".to_string()));
    }
    if problem.weights.len() != n || problem.response.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "design {n} rows, {} weights, {} responses",
            problem.weights.len(),
            problem.response.len()
        )));
    }
    let mut ws = WlsWorkspace::new();
    let (coef, regularized) = ws.solve_rows(n, k, |i, row| {
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = problem.design[[i, j]];
        }
        (problem.weights[i], problem.response[i])
    })?;
    Ok(WlsSolution {
        coefficients: coef.to_vec(),
        regularized,
    })
}

/// Intercept and slope of a kernel-weighted linear fit at `x0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFit {
    pub value: f64,
    pub slope: f64,
    pub regularized: bool,
}

/// Local linear regression of `y` on `x` at `x0` with bandwidth `h`: weights
/// `K_h(x_i - x0)`, regressors `(1, (x_i - x0)/h)`. The intercept estimates
/// the regression function at `x0`.
pub fn local_linear(
    x: &[f64],
    y: &[f64],
    h: f64,
    x0: f64,
    kind: KernelKind,
) -> Result<LocalFit> {
    let mut ws = WlsWorkspace::new();
    local_linear_with(&mut ws, x, y, h, x0, kind, None)
}

/// As [`local_linear`], with reusable scratch and an optional row to exclude
/// (leave-one-out evaluation).
pub fn local_linear_with(
    ws: &mut WlsWorkspace,
    x: &[f64],
    y: &[f64],
    h: f64,
    x0: f64,
    kind: KernelKind,
    skip: Option<usize>,
) -> Result<LocalFit> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {h}")));
    }
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} x values vs {} y values",
            x.len(),
            y.len()
        )));
    }
    let (coef, regularized) = ws
        .solve_rows(x.len(), 2, |i, row| {
            if skip == Some(i) {
                row[0] = 0.0;
                row[1] = 0.0;
                return (0.0, 0.0);
            }
            let u = (x[i] - x0) / h;
            row[0] = 1.0;
            row[1] = u;
            (kind.eval(u) / h, y[i])
        })
        .map_err(|e| match e {
            Error::EmptyNeighborhood { .. } => Error::EmptyNeighborhood { at: x0 },
            other => other,
        })?;
    Ok(LocalFit {
        value: coef[0],
        slope: coef[1] / h,
        regularized,
    })
}

/// Per-point output of the varying-coefficient regression: the treatment
/// coefficient and the intercept surface.
#[derive(Debug, Clone)]
pub struct VcEvaluation {
    pub beta: Vec<f64>,
    pub m0: Vec<f64>,
    pub regularized: Vec<bool>,
    pub regularized_fraction: f64,
    /// Set when more than 20% of evaluation points needed regularization,
    /// which happens when neighborhoods routinely contain only one arm.
    pub sparse_overlap: bool,
}

/// Step-1 fit evaluated at the sample points, with the residuals the
/// plug-in variance needs.
#[derive(Debug, Clone)]
pub struct Step1Fit {
    pub beta_at_sample: Vec<f64>,
    pub m0_at_sample: Vec<f64>,
    /// `y_i - beta_i d_i - m0_i`, exact by construction.
    pub residuals: Vec<f64>,
    /// Self-leverage of each sample in its own local fit, in [0, 1).
    /// Residual-based moment estimates divide the squared residual by
    /// `1 - leverage` to undo local-fit shrinkage.
    pub leverage: Vec<f64>,
    pub h1: f64,
    pub h2: f64,
    pub regularized_fraction: f64,
    pub sparse_overlap: bool,
}

/// Per-point solve output: treatment coefficient, intercept, ridge flag,
/// and optionally the self-leverage of one sample row.
type VcPointFit = (f64, f64, bool, f64);

#[inline]
#[allow(clippy::too_many_arguments)]
fn vc_point_solve(
    ws: &mut WlsWorkspace,
    xl: &[f64],
    scores: &[f64],
    d: &[u8],
    y: &[f64],
    h1: f64,
    h2: f64,
    x0: f64,
    e0: f64,
    kind: KernelKind,
    skip: Option<usize>,
    leverage_for: Option<usize>,
) -> Result<VcPointFit> {
    let n = xl.len();
    let (coef, regularized) = ws
        .solve_rows(n, 6, |i, row| {
            if skip == Some(i) {
                return (0.0, 0.0);
            }
            let u1 = (xl[i] - x0) / h1;
            let u2 = (scores[i] - e0) / h2;
            let di = d[i] as f64;
            row[0] = di;
            row[1] = 1.0;
            row[2] = di * u1;
            row[3] = u1;
            row[4] = di * u2;
            row[5] = u2;
            let w = (kind.eval(u1) / h1) * (kind.eval(u2) / h2);
            (w, y[i])
        })
        .map_err(|e| match e {
            Error::EmptyNeighborhood { .. } => Error::EmptyNeighborhood { at: x0 },
            other => other,
        })?;
    let (beta, m0) = (coef[0], coef[1]);
    let leverage = match leverage_for {
        Some(i) => {
            // the sample's own regressor row at its own evaluation point
            let g = [d[i] as f64, 1.0, 0.0, 0.0, 0.0, 0.0];
            let w = (kind.eval((xl[i] - x0) / h1) / h1) * (kind.eval((scores[i] - e0) / h2) / h2);
            ws.self_leverage(&g, w)
        }
        None => 0.0,
    };
    Ok((beta, m0, regularized, leverage))
}

/// Varying-coefficient local linear fit at arbitrary `(x_l, e)` evaluation
/// points. Regressors per point: `(d, 1, d u1, u1, d u2, u2)` with
/// `u1 = (x_i - x0)/h1`, `u2 = (e_i - e0)/h2`, and product kernel weights.
/// The first coefficient is the treatment effect surface, the second the
/// control-outcome surface.
pub fn step1_vc_fit(
    dataset: &ObservationalDataset,
    scores: &[f64],
    h1: f64,
    h2: f64,
    eval_points: &[(f64, f64)],
    kind: KernelKind,
) -> Result<VcEvaluation> {
    if !(h1 > 0.0) || !(h2 > 0.0) {
        return Err(Error::invalid(format!(
            "bandwidths must be positive, got h1={h1}, h2={h2}"
        )));
    }
    if scores.len() != dataset.n() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} rows",
            scores.len(),
            dataset.n()
        )));
    }
    if eval_points.iter().any(|&(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(Error::invalid("evaluation points must be finite".to_string()));
    }
    let xl = dataset.xl().to_vec();
    let d = dataset.treatment();
    let y = dataset.outcome();

    let solved: Result<Vec<VcPointFit>> = eval_points
        .par_iter()
        .map_init(WlsWorkspace::new, |ws, &(x0, e0)| {
            vc_point_solve(ws, &xl, scores, d, y, h1, h2, x0, e0, kind, None, None)
        })
        .collect();
    let solved = solved?;

    let regularized: Vec<bool> = solved.iter().map(|s| s.2).collect();
    let flagged = regularized.iter().filter(|&&r| r).count();
    let regularized_fraction = flagged as f64 / regularized.len().max(1) as f64;
    Ok(VcEvaluation {
        beta: solved.iter().map(|s| s.0).collect(),
        m0: solved.iter().map(|s| s.1).collect(),
        regularized,
        regularized_fraction,
        sparse_overlap: regularized_fraction > SPARSE_OVERLAP_LIMIT,
    })
}

/// Run the step-1 regression at every sample point `(x_i, e_i)` and compute
/// residuals.
pub fn step1_fit_at_samples(
    dataset: &ObservationalDataset,
    scores: &[f64],
    h1: f64,
    h2: f64,
    kind: KernelKind,
) -> Result<Step1Fit> {
    if !(h1 > 0.0) || !(h2 > 0.0) {
        return Err(Error::invalid(format!(
            "bandwidths must be positive, got h1={h1}, h2={h2}"
        )));
    }
    if scores.len() != dataset.n() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} rows",
            scores.len(),
            dataset.n()
        )));
    }
    let xl = dataset.xl().to_vec();
    let d = dataset.treatment();
    let y = dataset.outcome();
    let scores_vec = scores.to_vec();

    let solved: Result<Vec<VcPointFit>> = (0..dataset.n())
        .into_par_iter()
        .map_init(WlsWorkspace::new, |ws, i| {
            vc_point_solve(
                ws,
                &xl,
                &scores_vec,
                d,
                y,
                h1,
                h2,
                xl[i],
                scores_vec[i],
                kind,
                None,
                Some(i),
            )
        })
        .collect();
    let solved = solved?;

    let flagged = solved.iter().filter(|s| s.2).count();
    let regularized_fraction = flagged as f64 / solved.len().max(1) as f64;
    let residuals: Vec<f64> = (0..dataset.n())
        .map(|i| y[i] - solved[i].0 * d[i] as f64 - solved[i].1)
        .collect();
    Ok(Step1Fit {
        beta_at_sample: solved.iter().map(|s| s.0).collect(),
        m0_at_sample: solved.iter().map(|s| s.1).collect(),
        residuals,
        leverage: solved.iter().map(|s| s.3.clamp(0.0, 1.0)).collect(),
        h1,
        h2,
        regularized_fraction,
        sparse_overlap: regularized_fraction > SPARSE_OVERLAP_LIMIT,
    })
}

// ---------------------------------------------------------------------------
// Bandwidth selection
// ---------------------------------------------------------------------------

/// Bandwidth selection method. `Rot` is the rule of thumb
/// `1.06 sd n^(-1/5)` per smoothing dimension; `Lscv` minimizes leave-one-out
/// squared prediction error over a 20-point logarithmic grid spanning
/// `[0.1, 3] x rot`, with ties broken toward the larger bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BandwidthMethod {
    #[default]
    Rot,
    Lscv,
}

impl std::str::FromStr for BandwidthMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rot" => Ok(BandwidthMethod::Rot),
            "lscv" => Ok(BandwidthMethod::Lscv),
            other => Err(Error::invalid(format!("unknown bandwidth method '{other}'"))),
        }
    }
}

const LSCV_GRID: usize = 20;
const LSCV_SPAN: (f64, f64) = (0.1, 3.0);
const LSCV_MIN_OBS: usize = 20;
/// Scores within this absolute slack count as tied; ties resolve toward the
/// larger bandwidth.
const LSCV_TIE_TOL: f64 = 1e-10;

/// Rule-of-thumb bandwidth for one smoothing dimension.
pub fn rot_bandwidth(values: &[f64]) -> Result<f64> {
    silverman_bandwidth(values)
}

fn lscv_grid(rot: f64) -> Vec<f64> {
    let (lo, hi) = LSCV_SPAN;
    let llo = (rot * lo).ln();
    let lhi = (rot * hi).ln();
    (0..LSCV_GRID)
        .map(|i| (llo + (lhi - llo) * i as f64 / (LSCV_GRID - 1) as f64).exp())
        .collect()
}

/// Pick the candidate with the smallest score; near-ties go to the larger
/// bandwidth. Candidates must be ascending.
fn pick_candidate(candidates: &[f64], scores: &[f64]) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for (&h, &s) in candidates.iter().zip(scores).rev() {
        if !s.is_finite() {
            continue;
        }
        match best {
            None => best = Some((h, s)),
            Some((_, bs)) => {
                let tol = LSCV_TIE_TOL * (1.0 + bs.abs());
                if s < bs - tol {
                    best = Some((h, s));
                }
            }
        }
    }
    best.map(|(h, _)| h)
        .ok_or_else(|| Error::invalid("no feasible bandwidth candidate".to_string()))
}

/// Leave-one-out cross-validated bandwidth for a univariate local linear
/// smoother of `y` on `x` (step-2 and pseudo-outcome smoothing).
pub fn lscv_bandwidth(x: &[f64], y: &[f64], kind: KernelKind) -> Result<f64> {
    lscv_bandwidth_blocked(x, y, kind, 0.0)
}

/// Cross-validated bandwidth that leaves out every observation within
/// `block_radius` of the prediction point, not just the point itself.
/// Plain leave-one-out CV undersmooths badly when the response carries
/// noise correlated across nearby x (as a pre-smoothed step-1 surface
/// does); blocking out the correlation neighborhood restores the
/// bias-variance trade-off (h-block CV in the dependent-errors literature).
/// `block_radius = 0` is ordinary leave-one-out.
pub fn lscv_bandwidth_blocked(
    x: &[f64],
    y: &[f64],
    kind: KernelKind,
    block_radius: f64,
) -> Result<f64> {
    let n = x.len();
    if n < LSCV_MIN_OBS {
        return Err(Error::invalid(format!(
            "lscv needs at least {LSCV_MIN_OBS} observations, got {n}"
        )));
    }
    if y.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} x values vs {} y values", y.len())));
    }
    if !(block_radius >= 0.0) {
        return Err(Error::invalid(format!("block radius must be >= 0, got {block_radius}")));
    }
    let rot = rot_bandwidth(x)?;
    let candidates = lscv_grid(rot);
    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|&h| {
            let mut total = 0.0;
            let mut counted = 0usize;
            for i in 0..n {
                match blocked_local_linear_at(x, y, h, i, kind, block_radius) {
                    Some(pred) => {
                        let e = y[i] - pred;
                        total += e * e;
                        counted += 1;
                    }
                    None => return f64::INFINITY,
                }
            }
            total / counted as f64
        })
        .collect();
    pick_candidate(&candidates, &scores)
}

/// Closed-form 2x2 local linear prediction at `x[i]` with row `i` (and any
/// row within `block_radius` of it) left out. Returns None when the
/// held-out design is degenerate at this point.
fn blocked_local_linear_at(
    x: &[f64],
    y: &[f64],
    h: f64,
    i: usize,
    kind: KernelKind,
    block_radius: f64,
) -> Option<f64> {
    let x0 = x[i];
    let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for j in 0..x.len() {
        if j == i || (x[j] - x0).abs() <= block_radius {
            continue;
        }
        let u = (x[j] - x0) / h;
        let w = kind.eval(u);
        if w == 0.0 {
            continue;
        }
        s0 += w;
        s1 += w * u;
        s2 += w * u * u;
        t0 += w * y[j];
        t1 += w * u * y[j];
    }
    let det = s0 * s2 - s1 * s1;
    if !(det.abs() > 1e-12 * s0.max(1e-300) * s2.max(1e-300)) {
        if s0 > 0.0 && s2 == 0.0 && s1 == 0.0 {
            // single support point exactly at x0: local constant
            return Some(t0 / s0);
        }
        return None;
    }
    Some((s2 * t0 - s1 * t1) / det)
}

/// Leave-one-out cross-validated step-1 pair `(h1, h2)`. Each bandwidth
/// gets its own 20-point grid around its rule-of-thumb value; the pair is
/// minimized by coordinate descent (sweep h1 with h2 at its rule-of-thumb
/// value, then sweep h2, then re-sweep h1), predicting the held-out outcome
/// under the varying-coefficient model. Cost is O(sweeps * grid * n^2 *
/// k^2): intended for moderate n or select-once designs.
pub fn lscv_step1_bandwidths(
    dataset: &ObservationalDataset,
    scores: &[f64],
    kind: KernelKind,
) -> Result<(f64, f64)> {
    let n = dataset.n();
    if n < LSCV_MIN_OBS {
        return Err(Error::invalid(format!(
            "lscv needs at least {LSCV_MIN_OBS} observations, got {n}"
        )));
    }
    let xl = dataset.xl().to_vec();
    let rot1 = rot_bandwidth(&xl)?;
    let rot2 = rot_bandwidth(scores)?;
    let d = dataset.treatment();
    let y = dataset.outcome();
    let scores_vec = scores.to_vec();

    let sweep = |h1_candidates: &[f64], h2_candidates: &[f64]| -> Vec<f64> {
        debug_assert!(h1_candidates.len() == 1 || h2_candidates.len() == 1);
        let pairs: Vec<(f64, f64)> = h1_candidates
            .iter()
            .flat_map(|&a| h2_candidates.iter().map(move |&b| (a, b)))
            .collect();
        pairs
            .par_iter()
            .map_init(WlsWorkspace::new, |ws, &(h1, h2)| {
                let mut total = 0.0;
                for i in 0..n {
                    let pred = match vc_point_solve(
                        ws,
                        &xl,
                        &scores_vec,
                        d,
                        y,
                        h1,
                        h2,
                        xl[i],
                        scores_vec[i],
                        kind,
                        Some(i),
                        None,
                    ) {
                        Ok((beta, m0, _, _)) => beta * d[i] as f64 + m0,
                        Err(_) => return f64::INFINITY,
                    };
                    let e = y[i] - pred;
                    total += e * e;
                }
                total / n as f64
            })
            .collect()
    };

    let grid1 = lscv_grid(rot1);
    let grid2 = lscv_grid(rot2);
    let mut h1 = rot1;
    let mut h2 = rot2;
    for round in 0..3 {
        if round % 2 == 0 {
            let scores_cv = sweep(&grid1, &[h2]);
            h1 = pick_candidate(&grid1, &scores_cv)?;
        } else {
            let scores_cv = sweep(&[h1], &grid2);
            h2 = pick_candidate(&grid2, &scores_cv)?;
        }
    }
    Ok((h1, h2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Independent dense oracle: form G'WG and G'WY and solve by Gaussian
    // elimination with partial pivoting.
    fn normal_equations_oracle(design: &Array2<f64>, w: &[f64], y: &[f64]) -> Vec<f64> {
        let k = design.ncols();
        let n = design.nrows();
        let mut a = vec![vec![0.0; k + 1]; k];
        for i in 0..n {
            for r in 0..k {
                for c in 0..k {
                    a[r][c] += w[i] * design[[i, r]] * design[[i, c]];
                }
                a[r][k] += w[i] * design[[i, r]] * y[i];
            }
        }
        for col in 0..k {
            let piv = (col..k).max_by(|&r1, &r2| a[r1][col].abs().total_cmp(&a[r2][col].abs())).unwrap();
            a.swap(col, piv);
            let p = a[col][col];
            for r in 0..k {
                if r != col {
                    let f = a[r][col] / p;
                    for c in col..=k {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        (0..k).map(|r| a[r][k] / a[r][r]).collect()
    }

    #[test]
    fn wls_weighted_mean() {
        let problem = WlsProblem {
            design: Array2::from_elem((3, 1), 1.0),
            weights: vec![1.0; 3],
            response: vec![1.0, 2.0, 3.0],
        };
        let sol = wls_solve(&problem).unwrap();
        assert_abs_diff_eq!(sol.coefficients[0], 2.0, epsilon = 1e-12);
        assert!(!sol.regularized);
    }

    #[test]
    fn wls_zero_weights_drop_rows() {
        let problem = WlsProblem {
            design: Array2::from_elem((3, 1), 1.0),
            weights: vec![1.0, 0.0, 0.0],
            response: vec![5.0, 9.0, 9.0],
        };
        let sol = wls_solve(&problem).unwrap();
        assert_abs_diff_eq!(sol.coefficients[0], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn wls_all_zero_weights_is_empty_neighborhood() {
        let problem = WlsProblem {
            design: Array2::from_elem((3, 1), 1.0),
            weights: vec![0.0; 3],
            response: vec![1.0, 2.0, 3.0],
        };
        assert!(matches!(
            wls_solve(&problem),
            Err(Error::EmptyNeighborhood { .. })
        ));
    }

    #[test]
    fn wls_matches_normal_equations_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let n = 50;
            let k = 3;
            let mut design = Array2::zeros((n, k));
            let mut w = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            for i in 0..n {
                design[[i, 0]] = 1.0;
                design[[i, 1]] = rng.gen_range(-2.0..2.0);
                design[[i, 2]] = rng.gen_range(-2.0..2.0);
                w.push(rng.gen_range(0.01..3.0));
                y.push(rng.gen_range(-5.0..5.0));
            }
            let sol = wls_solve(&WlsProblem {
                design: design.clone(),
                weights: w.clone(),
                response: y.clone(),
            })
            .unwrap();
            let oracle = normal_equations_oracle(&design, &w, &y);
            for (a, b) in sol.coefficients.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn wls_collinear_design_takes_ridge_path() {
        let design = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        let sol = wls_solve(&WlsProblem {
            design,
            weights: vec![1.0; 4],
            response: vec![1.0, 2.0, 3.0, 4.0],
        })
        .unwrap();
        assert!(sol.regularized);
        // Fitted value at (1, 2) still reproduces the mean.
        let fit = sol.coefficients[0] + 2.0 * sol.coefficients[1];
        assert_abs_diff_eq!(fit, 2.5, epsilon = 1e-5);
    }

    #[test]
    fn local_linear_exact_on_affine() {
        let x: Vec<f64> = (0..200).map(|i| -1.0 + i as f64 / 100.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        for &x0 in &[-0.5, 0.0, 0.7] {
            for &h in &[0.05, 0.3, 2.0] {
                let fit = local_linear(&x, &y, h, x0, KernelKind::Gaussian).unwrap();
                assert_abs_diff_eq!(fit.value, 2.0 * x0, epsilon = 1e-8);
                assert_abs_diff_eq!(fit.slope, 2.0, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn local_linear_constant() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 / 10.0).collect();
        let y = vec![4.2; 50];
        let fit = local_linear(&x, &y, 0.4, 2.0, KernelKind::Epanechnikov).unwrap();
        assert_abs_diff_eq!(fit.value, 4.2, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.slope, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn local_linear_quadratic_bias_shrinks_as_h2() {
        // For y = x^2 the intercept bias at 0 is h^2 mu2(K) f''/2 = h^2.
        let x: Vec<f64> = (0..=2000).map(|i| -1.0 + i as f64 / 1000.0).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v).collect();
        for &h in &[0.05, 0.1] {
            let fit = local_linear(&x, &y, h, 0.0, KernelKind::Gaussian).unwrap();
            let analytic = h * h;
            assert!(
                (fit.value - analytic).abs() < 0.05 * analytic,
                "h={h}: {} vs {analytic}",
                fit.value
            );
        }
    }

    #[test]
    fn local_linear_empty_neighborhood_errors() {
        let x = vec![0.0, 0.1, 0.2];
        let y = vec![1.0, 2.0, 3.0];
        let err = local_linear(&x, &y, 0.01, 5.0, KernelKind::Epanechnikov);
        assert!(matches!(err, Err(Error::EmptyNeighborhood { .. })));
    }

    #[test]
    fn local_linear_matches_wls_two_column() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..40).map(|i| (i as f64 * 0.11).cos() * 3.0).collect();
        let (h, x0) = (0.5, 0.2);
        let fit = local_linear(&x, &y, h, x0, KernelKind::Gaussian).unwrap();

        let mut design = Array2::zeros((40, 2));
        let mut w = Vec::new();
        for i in 0..40 {
            let u = (x[i] - x0) / h;
            design[[i, 0]] = 1.0;
            design[[i, 1]] = u;
            w.push(KernelKind::Gaussian.eval(u) / h);
        }
        let sol = wls_solve(&WlsProblem {
            design,
            weights: w,
            response: y.clone(),
        })
        .unwrap();
        assert_abs_diff_eq!(fit.value, sol.coefficients[0], epsilon = 1e-12);
        assert_abs_diff_eq!(fit.slope, sol.coefficients[1] / h, epsilon = 1e-12);
    }

    fn toy_dataset(n: usize, seed: u64, effect: impl Fn(f64, f64) -> f64) -> (ObservationalDataset, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((n, 2));
        let mut d = Vec::with_capacity(n);
        let mut scores = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let xl: f64 = rng.gen_range(-0.5..0.5);
            let e: f64 = rng.gen_range(0.2..0.8);
            let di = u8::from(rng.gen_range(0.0..1.0) < e);
            x[[i, 0]] = xl;
            x[[i, 1]] = rng.gen_range(-1.0..1.0);
            d.push(di);
            scores.push(e);
            y.push(effect(xl, e) * di as f64);
        }
        (
            ObservationalDataset::new(x, 0, d, y, None).unwrap(),
            scores,
        )
    }

    #[test]
    fn step1_constant_effect_is_exact() {
        let (ds, scores) = toy_dataset(80, 5, |_, _| 3.0);
        let eval = step1_vc_fit(
            &ds,
            &scores,
            0.2,
            0.2,
            &[(0.0, 0.5), (0.3, 0.4), (-0.2, 0.6)],
            KernelKind::Gaussian,
        )
        .unwrap();
        for (&b, &m) in eval.beta.iter().zip(&eval.m0) {
            assert_abs_diff_eq!(b, 3.0, epsilon = 1e-8);
            assert_abs_diff_eq!(m, 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn step1_linear_effect_is_exact_in_span() {
        // y = d * x_l lies in the regressor span, so beta(x0, e0) = x0 up to
        // solver precision at any bandwidth.
        let (ds, scores) = toy_dataset(400, 6, |xl, _| xl);
        let eval = step1_vc_fit(&ds, &scores, 0.1, 0.1, &[(0.2, 0.5)], KernelKind::Gaussian).unwrap();
        assert_abs_diff_eq!(eval.beta[0], 0.2, epsilon = 1e-8);
    }

    #[test]
    fn step1_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (ds, scores) = toy_dataset(100, 7, |xl, e| xl + e);
        // noisy outcome so the solve is nontrivial
        let y: Vec<f64> = ds
            .outcome()
            .iter()
            .map(|v| v + rng.gen_range(-0.5..0.5))
            .collect();
        let ds = ds.with_outcome(y).unwrap();
        let (h1, h2) = (0.25, 0.2);
        let (x0, e0) = (0.1, 0.5);
        let eval = step1_vc_fit(&ds, &scores, h1, h2, &[(x0, e0)], KernelKind::Gaussian).unwrap();

        let n = ds.n();
        let mut design = Array2::zeros((n, 6));
        let mut w = Vec::with_capacity(n);
        let xl = ds.xl();
        for i in 0..n {
            let u1 = (xl[i] - x0) / h1;
            let u2 = (scores[i] - e0) / h2;
            let di = ds.treatment()[i] as f64;
            design[[i, 0]] = di;
            design[[i, 1]] = 1.0;
            design[[i, 2]] = di * u1;
            design[[i, 3]] = u1;
            design[[i, 4]] = di * u2;
            design[[i, 5]] = u2;
            w.push(KernelKind::Gaussian.eval(u1) / h1 * KernelKind::Gaussian.eval(u2) / h2);
        }
        let oracle = normal_equations_oracle(&design, &w, ds.outcome());
        assert!((eval.beta[0] - oracle[0]).abs() <= 1e-8 * (1.0 + oracle[0].abs()));
        assert!((eval.m0[0] - oracle[1]).abs() <= 1e-8 * (1.0 + oracle[1].abs()));
    }

    #[test]
    fn step1_residual_identity_and_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (ds, scores) = toy_dataset(150, 8, |xl, e| xl * e);
        let y: Vec<f64> = ds
            .outcome()
            .iter()
            .map(|v| v + rng.gen_range(-0.2..0.2))
            .collect();
        let ds = ds.with_outcome(y).unwrap();
        let fit = step1_fit_at_samples(&ds, &scores, 0.2, 0.2, KernelKind::Gaussian).unwrap();
        for i in 0..ds.n() {
            let back = ds.outcome()[i]
                - fit.beta_at_sample[i] * ds.treatment()[i] as f64
                - fit.m0_at_sample[i];
            assert_abs_diff_eq!(fit.residuals[i], back, epsilon = 0.0);
        }

        // shifting y by a constant moves m0, not beta
        let shifted = ds
            .with_outcome(ds.outcome().iter().map(|v| v + 7.5).collect())
            .unwrap();
        let fit2 = step1_fit_at_samples(&shifted, &scores, 0.2, 0.2, KernelKind::Gaussian).unwrap();
        for i in 0..ds.n() {
            assert_abs_diff_eq!(fit2.beta_at_sample[i], fit.beta_at_sample[i], epsilon = 1e-10);
            assert_abs_diff_eq!(fit2.m0_at_sample[i], fit.m0_at_sample[i] + 7.5, epsilon = 1e-10);
        }
    }

    #[test]
    fn step1_row_permutation_invariant() {
        let (ds, scores) = toy_dataset(120, 9, |xl, e| xl + 2.0 * e);
        let points = [(0.0, 0.5), (0.25, 0.35)];
        let base = step1_vc_fit(&ds, &scores, 0.2, 0.2, &points, KernelKind::Gaussian).unwrap();

        let order: Vec<usize> = (0..ds.n()).rev().collect();
        let permuted = ds.permuted(&order).unwrap();
        let scores_p: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
        let perm = step1_vc_fit(&permuted, &scores_p, 0.2, 0.2, &points, KernelKind::Gaussian).unwrap();
        for (a, b) in base.beta.iter().zip(&perm.beta) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn rot_bandwidth_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let values: Vec<f64> = (0..1000)
            .map(|_| {
                let u: f64 = rng.gen_range(1e-12..1.0);
                let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                (-2.0 * u.ln()).sqrt() * v.cos()
            })
            .collect();
        let h = rot_bandwidth(&values).unwrap();
        let sd = crate::numeric::sample_sd(&values);
        assert_abs_diff_eq!(h, 1.06 * sd * 1000f64.powf(-0.2), epsilon = 1e-12);
        assert!((h - 0.267).abs() < 0.03);
    }

    #[test]
    fn rot_bandwidth_rejects_constant() {
        assert!(rot_bandwidth(&[2.0; 30]).is_err());
    }

    #[test]
    fn lscv_linear_truth_selects_largest() {
        let x: Vec<f64> = (0..60).map(|i| i as f64 / 20.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let h = lscv_bandwidth(&x, &y, KernelKind::Gaussian).unwrap();
        let rot = rot_bandwidth(&x).unwrap();
        assert_abs_diff_eq!(h, 3.0 * rot, epsilon = 1e-9);
    }

    #[test]
    fn lscv_stays_within_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let x: Vec<f64> = (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| (4.0 * v).sin() + rng.gen_range(-0.3..0.3))
            .collect();
        let h = lscv_bandwidth(&x, &y, KernelKind::Gaussian).unwrap();
        let rot = rot_bandwidth(&x).unwrap();
        assert!(h >= 0.1 * rot - 1e-12 && h <= 3.0 * rot + 1e-12);
    }

    #[test]
    fn lscv_needs_enough_points() {
        let x = vec![0.0, 1.0, 2.0];
        let y = vec![0.0, 1.0, 2.0];
        assert!(lscv_bandwidth(&x, &y, KernelKind::Gaussian).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn wls_weight_scale_invariant(c in 0.01f64..100.0) {
            let design = array![[1.0, 0.3], [1.0, -0.2], [1.0, 0.9], [1.0, 0.1]];
            let y = vec![1.0, 0.5, -0.3, 2.0];
            let w = vec![0.5, 1.5, 0.7, 1.1];
            let a = wls_solve(&WlsProblem { design: design.clone(), weights: w.clone(), response: y.clone() }).unwrap();
            let wc: Vec<f64> = w.iter().map(|v| v * c).collect();
            let b = wls_solve(&WlsProblem { design, weights: wc, response: y }).unwrap();
            for (p, q) in a.coefficients.iter().zip(&b.coefficients) {
                prop_assert!((p - q).abs() <= 1e-9 * (1.0 + q.abs()));
            }
        }

        #[test]
        fn local_linear_permutation_invariant(seed in 0u64..500) {
            use rand::seq::SliceRandom;
            let x: Vec<f64> = (0..30).map(|i| (i as f64 * 0.43).sin()).collect();
            let y: Vec<f64> = (0..30).map(|i| (i as f64 * 0.19).cos()).collect();
            let mut idx: Vec<usize> = (0..30).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let xp: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
            let yp: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let a = local_linear(&x, &y, 0.4, 0.3, KernelKind::Gaussian).unwrap();
            let b = local_linear(&xp, &yp, 0.4, 0.3, KernelKind::Gaussian).unwrap();
            prop_assert!((a.value - b.value).abs() <= 1e-10);
            prop_assert!((a.slope - b.slope).abs() <= 1e-10);
        }
    }
}
