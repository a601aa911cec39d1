//! Synthetic data-generating processes, true-effect oracles, metric
//! aggregation, and the Monte Carlo harness.
//!
//! Four outcome models crossed with four treatment-assignment mechanisms.
//! Mechanisms A and B push propensity scores against 0 and 1; C and D are
//! rescaled versions that keep scores in the interior. The canonical
//! pairings are I/II with A (extreme) or C (interior) and III/IV with B or
//! D; any other pairing is allowed but flagged experimental.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{EvaluationGrid, ObservationalDataset};
use crate::error::{Error, Result};
use crate::numeric::{self, KahanSum};
use crate::rng::stream_rng;

/// Outcome model: linearity of the true effect in the covariate of interest
/// ranges from a quintic polynomial (I) to linear (III).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OutcomeModel {
    I,
    II,
    III,
    IV,
}

/// Treatment assignment mechanism: the logistic index coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mechanism {
    A,
    B,
    C,
    D,
}

impl std::str::FromStr for OutcomeModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" => Ok(OutcomeModel::I),
            "II" => Ok(OutcomeModel::II),
            "III" => Ok(OutcomeModel::III),
            "IV" => Ok(OutcomeModel::IV),
            other => Err(Error::invalid(format!("unknown outcome model '{other}'"))),
        }
    }
}

impl std::fmt::Display for OutcomeModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OutcomeModel::I => "I",
            OutcomeModel::II => "II",
            OutcomeModel::III => "III",
            OutcomeModel::IV => "IV",
        })
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Mechanism::A),
            "B" => Ok(Mechanism::B),
            "C" => Ok(Mechanism::C),
            "D" => Ok(Mechanism::D),
            other => Err(Error::invalid(format!("unknown mechanism '{other}'"))),
        }
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mechanism::A => "A",
            Mechanism::B => "B",
            Mechanism::C => "C",
            Mechanism::D => "D",
        })
    }
}

impl Mechanism {
    /// The five nonzero index coefficients, loading on
    /// `(x_l, x{-l}_1, ..., x{-l}_4)` in order, no intercept.
    pub fn alpha(self) -> [f64; 5] {
        match self {
            Mechanism::A => [1.0, -1.0, -1.0, 1.0, -1.0],
            Mechanism::B => [1.0, 1.0, 1.0, 1.0, 1.0],
            Mechanism::C => [0.25, -0.25, -0.25, 0.25, -0.25],
            Mechanism::D => [0.125, -0.125, -0.125, 0.125, -0.125],
        }
    }

    /// The default mechanism each outcome model is paired with.
    pub fn canonical_for(model: OutcomeModel) -> Mechanism {
        match model {
            OutcomeModel::I | OutcomeModel::II => Mechanism::A,
            OutcomeModel::III | OutcomeModel::IV => Mechanism::B,
        }
    }
}

/// One Monte Carlo scenario cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScenarioConfig {
    pub outcome_model: OutcomeModel,
    pub mechanism: Mechanism,
    pub n: usize,
    pub p: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    /// Canonical pairings are I/II with A or C and III/IV with B or D.
    pub fn is_canonical(&self) -> bool {
        matches!(
            (self.outcome_model, self.mechanism),
            (OutcomeModel::I | OutcomeModel::II, Mechanism::A | Mechanism::C)
                | (OutcomeModel::III | OutcomeModel::IV, Mechanism::B | Mechanism::D)
        )
    }

    /// Simulation label: the canonical pairings are numbered I-VIII, with
    /// V-VIII the interior-score re-pairings of I-IV. Non-canonical
    /// (experimental) pairings render as "model/mechanism".
    pub fn simulation_label(&self) -> String {
        match (self.outcome_model, self.mechanism) {
            (OutcomeModel::I, Mechanism::A) => "I".to_string(),
            (OutcomeModel::II, Mechanism::A) => "II".to_string(),
            (OutcomeModel::III, Mechanism::B) => "III".to_string(),
            (OutcomeModel::IV, Mechanism::B) => "IV".to_string(),
            (OutcomeModel::I, Mechanism::C) => "V".to_string(),
            (OutcomeModel::II, Mechanism::C) => "VI".to_string(),
            (OutcomeModel::III, Mechanism::D) => "VII".to_string(),
            (OutcomeModel::IV, Mechanism::D) => "VIII".to_string(),
            (m, a) => format!("{m}/{a}"),
        }
    }
}

/// True conditional average treatment effect per outcome model.
pub fn true_tau(model: OutcomeModel, x: f64) -> f64 {
    match model {
        OutcomeModel::I => x * (2.0 * x + 1.0).powi(2) * (x - 1.0).powi(2),
        OutcomeModel::II => x * (1.0 - x) * x.cos() * (x + 2.0).ln() * x.exp(),
        OutcomeModel::III => x,
        OutcomeModel::IV => 5.0 * x * x + x,
    }
}

/// Confounding surface shared by both potential outcomes. `xm` is the first
/// block of the remaining covariates (at least 4 entries).
fn confounder(model: OutcomeModel, xl: f64, xm: &[f64]) -> f64 {
    match model {
        OutcomeModel::I | OutcomeModel::II => xl * xl * xm[0] * xm[1] * xm[2] * xm[3],
        OutcomeModel::III => {
            (xl * xm[0] + (xm[1] - 3.0).exp() * (xm[2].sin() + xm[3].cos())) / 2.0
        }
        OutcomeModel::IV => {
            xl * xl * (xm[0] / 4.0 + xm[1] / 8.0 + xm[2] / 16.0 + xm[3] / 32.0)
        }
    }
}

/// Both potential outcomes for a unit with covariate of interest `xl`,
/// remaining covariates `xm`, and noise draws `(eps1, eps0)`.
pub fn potential_outcomes(
    model: OutcomeModel,
    xl: f64,
    xm: &[f64],
    eps1: f64,
    eps0: f64,
) -> (f64, f64) {
    let f = confounder(model, xl, xm);
    (true_tau(model, xl) + f + eps1, f + eps0)
}

/// True propensity score at a covariate row: logistic index on
/// `(x_l, x{-l}_1..4)`.
pub fn true_score(mechanism: Mechanism, xl: f64, xm: &[f64]) -> f64 {
    let a = mechanism.alpha();
    let eta = a[0] * xl + a[1] * xm[0] + a[2] * xm[1] + a[3] * xm[2] + a[4] * xm[3];
    1.0 / (1.0 + (-eta).exp())
}

/// Lower-triangular Cholesky factor of the AR-like covariance
/// `Sigma[j][k] = 2^(-|j-k|)`.
fn correlation_cholesky(dim: usize) -> Vec<Vec<f64>> {
    let sigma = |j: usize, k: usize| -> f64 { 0.5f64.powi((j as i32 - k as i32).abs()) };
    let mut l = vec![vec![0.0; dim]; dim];
    for j in 0..dim {
        for k in 0..=j {
            let mut s = sigma(j, k);
            for m in 0..k {
                s -= l[j][m] * l[k][m];
            }
            if j == k {
                l[j][j] = s.sqrt();
            } else {
                l[j][k] = s / l[k][k];
            }
        }
    }
    l
}

/// Draw the remaining covariates `x^{-l}` from `Norm(0, Sigma)` using the
/// supplied Cholesky factor.
fn draw_xminus<R: Rng>(rng: &mut R, chol: &[Vec<f64>], out: &mut [f64]) {
    let dim = chol.len();
    let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    for j in 0..dim {
        let mut v = 0.0;
        for (m, zm) in z.iter().enumerate().take(j + 1) {
            v += chol[j][m] * zm;
        }
        out[j] = v;
    }
}

/// Draw `x^{-l}` rows for oracle simulations outside the full generator.
pub fn sample_xminus<R: Rng>(p: usize, rng: &mut R) -> Vec<f64> {
    let chol = correlation_cholesky(p - 1);
    let mut out = vec![0.0; p - 1];
    draw_xminus(rng, &chol, &mut out);
    out
}

/// A generated dataset together with the true scores it was assigned with.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub dataset: ObservationalDataset,
    pub true_scores: Vec<f64>,
}

/// Draw a full scenario dataset. Bit-reproducible from the seed: the draw
/// order per unit is fixed (covariate of interest, remaining covariates,
/// assignment uniform, then the two noise terms).
pub fn generate_dataset(config: &ScenarioConfig) -> Result<GeneratedData> {
    if config.p < 5 {
        return Err(Error::invalid(format!(
            "the index loads on five covariates; need p >= 5, got {}",
            config.p
        )));
    }
    if config.n < 2 {
        return Err(Error::invalid("need at least 2 units".to_string()));
    }
    let n = config.n;
    let p = config.p;
    let chol = correlation_cholesky(p - 1);
    let mut rng = stream_rng(config.seed, 0);

    let mut x = Array2::zeros((n, p));
    let mut d = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let mut xm = vec![0.0; p - 1];
    for i in 0..n {
        let xl: f64 = rng.gen_range(-0.5..0.5);
        draw_xminus(&mut rng, &chol, &mut xm);
        x[[i, 0]] = xl;
        for (j, &v) in xm.iter().enumerate() {
            x[[i, j + 1]] = v;
        }
        let e = true_score(config.mechanism, xl, &xm);
        let di = u8::from(rng.gen_range(0.0..1.0) < e);
        let eps0: f64 = rng.sample(StandardNormal);
        let eps1: f64 = rng.sample(StandardNormal);
        let (y1, y0) = potential_outcomes(config.outcome_model, xl, &xm, eps1, eps0);
        scores.push(e);
        d.push(di);
        y.push(if di == 1 { y1 } else { y0 });
    }
    let dataset = ObservationalDataset::new(x, 0, d, y, None).map_err(|_| {
        Error::InsufficientData(format!(
            "seed {} produced a single-arm sample at n={n}; increase n",
            config.seed
        ))
    })?;
    Ok(GeneratedData {
        dataset,
        true_scores: scores,
    })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Aggregated benchmark metrics for one (scenario, method, n, p) cell.
/// Values are in natural units; the conventional presentation multiplies
/// bias/sd/mae/mse by 100.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub scenario: String,
    pub method: String,
    pub n: usize,
    pub p: usize,
    pub reps: usize,
    pub bias: f64,
    pub sd: f64,
    pub mae: f64,
    pub mse: f64,
    /// Proportion in [0, 1].
    pub cp95: f64,
    pub grid: Vec<f64>,
    /// Fraction of (replicate, grid point) cells with a missing estimate.
    pub excluded_fraction: f64,
    /// Set when more than 10% of cells were excluded.
    pub reliability_warning: bool,
    /// Fraction of replicates whose fit carried a sparse-overlap warning.
    pub sparse_overlap_fraction: f64,
}

/// Pure aggregation of per-cell errors and confidence-interval hits, both
/// `reps x grid`. `None` marks a missing estimate (errors) or a missing
/// interval (hits).
pub fn compute_metrics(
    errors: &[Vec<Option<f64>>],
    hits: &[Vec<Option<bool>>],
) -> Result<MetricAggregates> {
    let reps = errors.len();
    if reps == 0 || errors[0].is_empty() {
        return Err(Error::invalid("metrics need a nonempty errors matrix".to_string()));
    }
    let grid = errors[0].len();
    if hits.len() != reps
        || errors.iter().any(|r| r.len() != grid)
        || hits.iter().any(|r| r.len() != grid)
    {
        return Err(Error::ShapeMismatch(
            "errors and hits must both be reps x grid".to_string(),
        ));
    }

    let mut bias = KahanSum::new();
    let mut mae = KahanSum::new();
    let mut mse = KahanSum::new();
    let mut present = 0usize;
    for row in errors {
        for e in row.iter().flatten() {
            bias.add(*e);
            mae.add(e.abs());
            mse.add(e * e);
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::invalid("every cell is missing".to_string()));
    }

    // SD: mean over grid points of the across-replicate sample deviation.
    let mut sd_acc = KahanSum::new();
    let mut sd_cols = 0usize;
    for g in 0..grid {
        let col: Vec<f64> = errors.iter().filter_map(|row| row[g]).collect();
        if col.len() >= 2 {
            sd_acc.add(numeric::sample_sd(&col));
            sd_cols += 1;
        }
    }

    let mut hit_sum = 0usize;
    let mut hit_count = 0usize;
    for row in hits {
        for h in row.iter().flatten() {
            hit_sum += usize::from(*h);
            hit_count += 1;
        }
    }

    let total = reps * grid;
    Ok(MetricAggregates {
        bias: bias.value() / present as f64,
        sd: if sd_cols > 0 { sd_acc.value() / sd_cols as f64 } else { 0.0 },
        mae: mae.value() / present as f64,
        mse: mse.value() / present as f64,
        cp95: if hit_count > 0 {
            hit_sum as f64 / hit_count as f64
        } else {
            f64::NAN
        },
        excluded_fraction: (total - present) as f64 / total as f64,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct MetricAggregates {
    pub bias: f64,
    pub sd: f64,
    pub mae: f64,
    pub mse: f64,
    pub cp95: f64,
    pub excluded_fraction: f64,
}

impl crate::data::ResultRecord for MetricsReport {
    fn to_csv_string(&self) -> String {
        use crate::data::fmt_g6;
        let mut out = String::from("scenario,method,n,p,reps,bias,sd,mae,mse,cp95\n");
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            self.scenario,
            self.method,
            self.n,
            self.p,
            self.reps,
            fmt_g6(self.bias),
            fmt_g6(self.sd),
            fmt_g6(self.mae),
            fmt_g6(self.mse),
            fmt_g6(self.cp95),
        ));
        out
    }

    fn to_json_string(&self) -> String {
        use crate::data::fmt_g6;
        format!(
            concat!(
                "{{\"scenario\":\"{}\",\"method\":\"{}\",\"n\":{},\"p\":{},\"reps\":{},",
                "\"bias\":{},\"sd\":{},\"mae\":{},\"mse\":{},\"cp95\":{}}}\n"
            ),
            self.scenario,
            self.method,
            self.n,
            self.p,
            self.reps,
            fmt_g6(self.bias),
            fmt_g6(self.sd),
            fmt_g6(self.mae),
            fmt_g6(self.mse),
            fmt_g6(self.cp95),
        )
    }
}

/// Per-grid-point diagnostics emitted alongside a metrics report.
#[derive(Debug, Clone)]
pub struct GridDiagnostics {
    pub rows: Vec<GridDiagnosticsRow>,
}

#[derive(Debug, Clone, Copy)]
pub struct GridDiagnosticsRow {
    pub x: f64,
    pub bias: f64,
    pub sd: f64,
    pub mae: f64,
    pub mse: f64,
    pub cp95: f64,
    pub excluded_fraction: f64,
}

impl crate::data::ResultRecord for GridDiagnostics {
    fn to_csv_string(&self) -> String {
        use crate::data::fmt_g6;
        let mut out = String::from("x,bias,sd,mae,mse,cp95,excluded_fraction\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                fmt_g6(r.x),
                fmt_g6(r.bias),
                fmt_g6(r.sd),
                fmt_g6(r.mae),
                fmt_g6(r.mse),
                fmt_g6(r.cp95),
                fmt_g6(r.excluded_fraction),
            ));
        }
        out
    }

    fn to_json_string(&self) -> String {
        use crate::data::fmt_g6;
        let mut out = String::from("{\"points\":[");
        for (i, r) in self.rows.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&format!(
                concat!(
                    "{{\"x\":{},\"bias\":{},\"sd\":{},\"mae\":{},\"mse\":{},",
                    "\"cp95\":{},\"excluded_fraction\":{}}}"
                ),
                fmt_g6(r.x),
                fmt_g6(r.bias),
                fmt_g6(r.sd),
                fmt_g6(r.mae),
                fmt_g6(r.mse),
                fmt_g6(r.cp95),
                fmt_g6(r.excluded_fraction),
            ));
        }
        out.push_str("]}\n");
        out
    }
}

/// Build per-grid-point diagnostics from the same cell matrices as
/// [`compute_metrics`].
pub fn grid_diagnostics(
    grid: &EvaluationGrid,
    errors: &[Vec<Option<f64>>],
    hits: &[Vec<Option<bool>>],
) -> Result<GridDiagnostics> {
    let g = grid.len();
    if errors.is_empty() || errors.iter().any(|r| r.len() != g) || hits.len() != errors.len() {
        return Err(Error::ShapeMismatch("diagnostics matrices must be reps x grid".to_string()));
    }
    let reps = errors.len();
    let mut rows = Vec::with_capacity(g);
    for j in 0..g {
        let col: Vec<f64> = errors.iter().filter_map(|r| r[j]).collect();
        let hit_col: Vec<bool> = hits.iter().filter_map(|r| r[j]).collect();
        let m = col.len();
        let (bias, mae, mse) = if m > 0 {
            let mut b = KahanSum::new();
            let mut a = KahanSum::new();
            let mut s = KahanSum::new();
            for &e in &col {
                b.add(e);
                a.add(e.abs());
                s.add(e * e);
            }
            (b.value() / m as f64, a.value() / m as f64, s.value() / m as f64)
        } else {
            (f64::NAN, f64::NAN, f64::NAN)
        };
        rows.push(GridDiagnosticsRow {
            x: grid.points()[j],
            bias,
            sd: numeric::sample_sd(&col),
            mae,
            mse,
            cp95: if hit_col.is_empty() {
                f64::NAN
            } else {
                hit_col.iter().filter(|&&h| h).count() as f64 / hit_col.len() as f64
            },
            excluded_fraction: (reps - m) as f64 / reps as f64,
        });
    }
    Ok(GridDiagnostics { rows })
}
