//! Dataset model, CSV ingestion for observational studies, and result
//! serialization.
//!
//! CSV files are RFC-4180 style with a required header row and `.` decimal
//! separator. Result files use a fixed field order and fixed 6-significant-
//! digit float formatting so identical inputs produce byte-identical output.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::numeric::{self, quantile_sorted};

/// Score values supplied from outside are clamped into this closed interval
/// at ingestion, matching the clamp applied to fitted scores.
pub const SCORE_CLAMP: f64 = 1e-6;

/// Rows of (full covariates X, treatment D, outcome Y) with a designated
/// covariate of interest, plus optionally an externally supplied propensity
/// score per row. Immutable after construction; safe to share across
/// concurrent estimator runs.
#[derive(Debug, Clone)]
pub struct ObservationalDataset {
    x: Array2<f64>,
    xl_index: usize,
    d: Vec<u8>,
    y: Vec<f64>,
    external_scores: Option<Vec<f64>>,
}

impl ObservationalDataset {
    pub fn new(
        x: Array2<f64>,
        xl_index: usize,
        d: Vec<u8>,
        y: Vec<f64>,
        external_scores: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = x.nrows();
        if n == 0 || x.ncols() == 0 {
            return Err(Error::invalid("dataset must have rows and covariates".to_string()));
        }
        if xl_index >= x.ncols() {
            return Err(Error::invalid(format!(
                "xl_index {} out of range for {} covariates",
                xl_index,
                x.ncols()
            )));
        }
        if d.len() != n || y.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "x has {} rows but d has {} and y has {}",
                n,
                d.len(),
                y.len()
            )));
        }
        if d.iter().any(|&v| v > 1) {
            return Err(Error::invalid("treatment vector must contain only 0/1".to_string()));
        }
        let treated = d.iter().filter(|&&v| v == 1).count();
        if treated == 0 || treated == n {
            return Err(Error::invalid(
                "dataset needs at least one treated and one control unit".to_string(),
            ));
        }
        if let Some(scores) = &external_scores {
            if scores.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "external scores have length {}, expected {}",
                    scores.len(),
                    n
                )));
            }
            if scores.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
                return Err(Error::invalid(
                    "external scores must lie strictly in (0,1) after clamping".to_string(),
                ));
            }
        }
        Ok(Self {
            x,
            xl_index,
            d,
            y,
            external_scores,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn covariates(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn xl_index(&self) -> usize {
        self.xl_index
    }

    /// The covariate of interest, one value per row.
    pub fn xl(&self) -> ArrayView1<'_, f64> {
        self.x.column(self.xl_index)
    }

    pub fn treatment(&self) -> &[u8] {
        &self.d
    }

    pub fn outcome(&self) -> &[f64] {
        &self.y
    }

    pub fn external_scores(&self) -> Option<&[f64]> {
        self.external_scores.as_deref()
    }

    /// Same rows with the outcome replaced; used by equivariance tests and
    /// the matching bootstrap.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(
            self.x.clone(),
            self.xl_index,
            self.d.clone(),
            y,
            self.external_scores.clone(),
        )
    }

    /// Swap treatment labels (D to 1-D). External scores, if any, are
    /// complemented so they keep estimating P(D = 1 | X).
    pub fn with_swapped_labels(&self) -> Result<Self> {
        Self::new(
            self.x.clone(),
            self.xl_index,
            self.d.iter().map(|&v| 1 - v).collect(),
            self.y.clone(),
            self.external_scores
                .as_ref()
                .map(|s| s.iter().map(|e| 1.0 - e).collect()),
        )
    }

    /// Row-permuted copy (same permutation applied to every column).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.n() {
            return Err(Error::ShapeMismatch("permutation length != n".to_string()));
        }
        let mut x = Array2::zeros((self.n(), self.p()));
        for (dst, &src) in order.iter().enumerate() {
            x.row_mut(dst).assign(&self.x.row(src));
        }
        Self::new(
            x,
            self.xl_index,
            order.iter().map(|&i| self.d[i]).collect(),
            order.iter().map(|&i| self.y[i]).collect(),
            self.external_scores
                .as_ref()
                .map(|s| order.iter().map(|&i| s[i]).collect()),
        )
    }
}

/// Sorted evaluation locations for the effect curve.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationGrid {
    points: Vec<f64>,
}

impl EvaluationGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("evaluation grid must be nonempty".to_string()));
        }
        if points.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("evaluation grid must be strictly increasing".to_string()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `m` equispaced points between two empirical quantiles of the covariate of
/// interest. Interior trimming avoids the boundary variance of local linear
/// fits.
pub fn grid_between_quantiles(
    dataset: &ObservationalDataset,
    m: usize,
    q_lo: f64,
    q_hi: f64,
) -> Result<EvaluationGrid> {
    if m < 2 {
        return Err(Error::invalid(format!("grid needs at least 2 points, got {m}")));
    }
    if !(0.0..1.0).contains(&q_lo) || !(q_lo < q_hi) || q_hi > 1.0 {
        return Err(Error::invalid(format!("bad quantile range [{q_lo}, {q_hi}]")));
    }
    let mut xs: Vec<f64> = dataset.xl().to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = quantile_sorted(&xs, q_lo);
    let hi = quantile_sorted(&xs, q_hi);
    if !(hi > lo) {
        return Err(Error::invalid(
            "covariate of interest is degenerate over the requested quantile range".to_string(),
        ));
    }
    EvaluationGrid::new(numeric::linspace(lo, hi, m))
}

/// Default grid: 5th to 95th percentile of the covariate of interest.
pub fn default_grid(dataset: &ObservationalDataset, m: usize) -> Result<EvaluationGrid> {
    grid_between_quantiles(dataset, m, 0.05, 0.95)
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

/// Which file columns hold the covariates.
#[derive(Debug, Clone)]
pub enum CovariateCols {
    /// All header columns not used as treatment/outcome/score.
    AllRemaining,
    /// An explicit list; must contain the covariate of interest.
    Named(Vec<String>),
}

#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub treatment_col: String,
    pub outcome_col: String,
    pub xl_col: String,
    pub score_col: Option<String>,
    pub covariate_cols: CovariateCols,
}

/// Result of ingesting a CSV file: the dataset plus the number of rows
/// dropped by listwise deletion of non-numeric or missing cells.
#[derive(Debug)]
pub struct CsvIngest {
    pub dataset: ObservationalDataset,
    pub rejected_rows: usize,
}

fn find_column(header: &[String], name: &str) -> Result<usize> {
    header.iter().position(|h| h == name).ok_or_else(|| Error::Schema {
        column: name.to_string(),
        message: "not found in header".to_string(),
    })
}

pub fn read_csv(path: &Path, schema: &CsvSchema) -> Result<CsvIngest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::invalid(format!("csv open failed: {other:?}")),
        })?;

    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::invalid(format!("csv header unreadable: {e}")))?
        .iter()
        .map(|s| s.to_string())
        .collect();

    let t_idx = find_column(&header, &schema.treatment_col)?;
    let y_idx = find_column(&header, &schema.outcome_col)?;
    let score_idx = match &schema.score_col {
        Some(name) => Some(find_column(&header, name)?),
        None => None,
    };

    let covariate_names: Vec<String> = match &schema.covariate_cols {
        CovariateCols::AllRemaining => header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != t_idx && *i != y_idx && Some(*i) != score_idx)
            .map(|(_, h)| h.clone())
            .collect(),
        CovariateCols::Named(names) => {
            for pair in names.windows(1) {
                if names.iter().filter(|n| *n == &pair[0]).count() > 1 {
                    return Err(Error::Schema {
                        column: pair[0].clone(),
                        message: "listed more than once".to_string(),
                    });
                }
            }
            if !names.contains(&schema.xl_col) {
                return Err(Error::Schema {
                    column: schema.xl_col.clone(),
                    message: "covariate list must include the covariate of interest".to_string(),
                });
            }
            names.clone()
        }
    };
    if covariate_names.is_empty() {
        return Err(Error::Schema {
            column: schema.xl_col.clone(),
            message: "no covariate columns selected".to_string(),
        });
    }
    let covariate_idx: Vec<usize> = covariate_names
        .iter()
        .map(|name| find_column(&header, name))
        .collect::<Result<_>>()?;
    let xl_index = covariate_names
        .iter()
        .position(|n| n == &schema.xl_col)
        .ok_or_else(|| Error::Schema {
            column: schema.xl_col.clone(),
            message: "covariate of interest not among covariates".to_string(),
        })?;

    let mut rows_x: Vec<Vec<f64>> = Vec::new();
    let mut d: Vec<u8> = Vec::new();
    let mut y: Vec<f64> = Vec::new();
    let mut scores: Vec<f64> = Vec::new();
    let mut rejected = 0usize;

    for (row_no, record) in reader.records().enumerate() {
        let row = row_no + 1; // 1-based data row, header excluded
        let record = record.map_err(|e| Error::Data {
            row,
            message: format!("unreadable record: {e}"),
        })?;

        let parse_cell = |idx: usize| -> Option<f64> {
            record
                .get(idx)
                .and_then(|s| if s.is_empty() { None } else { s.parse::<f64>().ok() })
                .filter(|v| v.is_finite())
        };

        let mut cells: Vec<f64> = Vec::with_capacity(covariate_idx.len());
        let mut missing = false;
        for &idx in &covariate_idx {
            match parse_cell(idx) {
                Some(v) => cells.push(v),
                None => {
                    missing = true;
                    break;
                }
            }
        }
        let t_val = parse_cell(t_idx);
        let y_val = parse_cell(y_idx);
        let s_val = score_idx.map(parse_cell);

        if missing || t_val.is_none() || y_val.is_none() || s_val == Some(None) {
            rejected += 1;
            continue;
        }

        let t = t_val.unwrap();
        if t != 0.0 && t != 1.0 {
            return Err(Error::Data {
                row,
                message: format!(
                    "treatment column '{}' must be 0 or 1, got {t}",
                    schema.treatment_col
                ),
            });
        }
        if let Some(Some(s)) = s_val {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Data {
                    row,
                    message: format!("score column value {s} outside [0, 1]"),
                });
            }
            scores.push(s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP));
        }
        rows_x.push(cells);
        d.push(t as u8);
        y.push(y_val.unwrap());
    }

    let n = rows_x.len();
    if n < 10 {
        return Err(Error::InsufficientData(format!(
            "{n} usable rows after rejecting {rejected}; need at least 10"
        )));
    }
    let p = covariate_idx.len();
    let mut x = Array2::zeros((n, p));
    for (i, cells) in rows_x.iter().enumerate() {
        for (j, &v) in cells.iter().enumerate() {
            x[[i, j]] = v;
        }
    }
    let external_scores = if score_idx.is_some() { Some(scores) } else { None };
    Ok(CsvIngest {
        dataset: ObservationalDataset::new(x, xl_index, d, y, external_scores)?,
        rejected_rows: rejected,
    })
}

/// Export a dataset in the layout `read_csv` expects: `d,y,x1..xp[,e]` with
/// the covariate of interest written as its covariate column.
pub fn write_dataset_csv(dataset: &ObservationalDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("d,y");
    for j in 0..dataset.p() {
        out.push_str(&format!(",x{}", j + 1));
    }
    if dataset.external_scores().is_some() {
        out.push_str(",e");
    }
    out.push('\n');
    for i in 0..dataset.n() {
        out.push_str(&format!("{}", dataset.treatment()[i]));
        out.push_str(&format!(",{}", fmt_g(dataset.outcome()[i], 17)));
        for j in 0..dataset.p() {
            out.push_str(&format!(",{}", fmt_g(dataset.covariates()[[i, j]], 17)));
        }
        if let Some(scores) = dataset.external_scores() {
            out.push_str(&format!(",{}", fmt_g(scores[i], 17)));
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

// ---------------------------------------------------------------------------
// Result serialization
// ---------------------------------------------------------------------------

/// Output format for result files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResultFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ResultFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ResultFormat::Csv),
            "json" => Ok(ResultFormat::Json),
            other => Err(Error::invalid(format!("unknown format '{other}'"))),
        }
    }
}

/// A result type with pinned CSV and JSON renderings.
pub trait ResultRecord {
    fn to_csv_string(&self) -> String;
    fn to_json_string(&self) -> String;
}

/// Serialize a result to `path`, writing to a temporary file in the same
/// directory and renaming, so failed runs never leave partial output.
pub fn write_results<R: ResultRecord>(record: &R, path: &Path, format: ResultFormat) -> Result<()> {
    let body = match format {
        ResultFormat::Csv => record.to_csv_string(),
        ResultFormat::Json => record.to_json_string(),
    };
    atomic_write(path, body.as_bytes())
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Fixed-width significant-digit float formatting (printf `%g` style).
/// `fmt_g6` is the 6-significant-digit form used by all result files.
pub fn fmt_g6(x: f64) -> String {
    fmt_g(x, 6)
}

pub fn fmt_g(x: f64, sig: usize) -> String {
    debug_assert!(sig >= 1);
    if x == 0.0 {
        return "0".to_string();
    }
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    // One digit before the point, sig-1 after: "d.ddddde[-]exp".
    let s = format!("{:.*e}", sig - 1, x);
    let (mantissa, exp) = s.split_once('e').expect("exponential format");
    let exp: i32 = exp.parse().expect("exponent parses");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();

    let body = if exp >= -4 && exp < sig as i32 {
        // Fixed notation; decimal point after position exp+1.
        let point = exp + 1;
        let mut out = String::new();
        if point <= 0 {
            out.push_str("0.");
            for _ in 0..(-point) {
                out.push('0');
            }
            out.push_str(&digits);
        } else if (point as usize) >= digits.len() {
            out.push_str(&digits);
            for _ in 0..(point as usize - digits.len()) {
                out.push('0');
            }
        } else {
            out.push_str(&digits[..point as usize]);
            out.push('.');
            out.push_str(&digits[point as usize..]);
        }
        trim_trailing_zeros(out)
    } else {
        let mut mant = format!("{}.{}", &digits[..1], &digits[1..]);
        mant = trim_trailing_zeros(mant);
        format!("{mant}e{exp}")
    };
    if negative {
        format!("-{body}")
    } else {
        body
    }
}

fn trim_trailing_zeros(mut s: String) -> String {
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    s
}

/// Render an optional value for CSV (missing = empty field).
pub fn fmt_opt_g6(x: Option<f64>) -> String {
    x.map(fmt_g6).unwrap_or_default()
}

/// Render an optional value for JSON (missing = null).
pub fn json_opt_g6(x: Option<f64>) -> String {
    x.map(fmt_g6).unwrap_or_else(|| "null".to_string())
}
