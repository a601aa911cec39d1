//! Shared numerical routines: adaptive quadrature, the standard normal
//! distribution, compensated summation, and sample statistics.
//!
//! The normal CDF/quantile pair is implemented in-repo (Cody's rational
//! approximations for erf/erfc, Acklam's inverse with one Halley polish) so
//! confidence bands do not depend on an external special-function crate.

/// Compensated (Kahan) accumulator. Summation order still matters for
/// bit-identical results; callers that need determinism across thread counts
/// must accumulate in a fixed order.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let y = value - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

pub fn mean(values: &[f64]) -> f64 {
    let mut acc = KahanSum::new();
    for &v in values {
        acc.add(v);
    }
    acc.value() / values.len() as f64
}

/// Sample standard deviation with divisor n - 1.
pub fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let mut acc = KahanSum::new();
    for &v in values {
        let d = v - m;
        acc.add(d * d);
    }
    (acc.value() / (n - 1) as f64).sqrt()
}

/// Empirical quantile with linear interpolation between order statistics
/// (the convention used by most statistics packages). `q` in [0, 1];
/// `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn linspace(a: f64, b: f64, m: usize) -> Vec<f64> {
    debug_assert!(m >= 2);
    let step = (b - a) / (m - 1) as f64;
    (0..m)
        .map(|i| {
            if i == m - 1 {
                b
            } else {
                a + i as f64 * step
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Adaptive quadrature
// ---------------------------------------------------------------------------

/// Adaptive Simpson integration of `f` over [a, b] to absolute tolerance
/// `tol`. Deterministic: the subdivision sequence depends only on the
/// integrand values.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = simpson(a, b, fa, fm, fb);
    adaptive(f, a, b, fa, fm, fb, whole, tol, 48)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        adaptive(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + adaptive(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

// ---------------------------------------------------------------------------
// Standard normal distribution
// ---------------------------------------------------------------------------

pub const SQRT_2PI: f64 = 2.5066282746310002;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Standard normal CDF via Cody's erf/erfc approximations; absolute error
/// below 1e-15 over the double range.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

// Cody (1969) rational Chebyshev coefficients, as in SPECFUN.
const ERF_A: [f64; 5] = [
    3.16112374387056560e0,
    1.13864154151050156e2,
    3.77485237685302021e2,
    3.20937758913846947e3,
    1.85777706184603153e-1,
];
const ERF_B: [f64; 4] = [
    2.36012909523441209e1,
    2.44024637934444173e2,
    1.28261652607737228e3,
    2.84423683343917062e3,
];
const ERF_C: [f64; 9] = [
    5.64188496988670089e-1,
    8.88314979438837594e0,
    6.61191906371416295e1,
    2.98635138197400131e2,
    8.81952221241769090e2,
    1.71204761263407058e3,
    2.05107837782607147e3,
    1.23033935479799725e3,
    2.15311535474403846e-8,
];
const ERF_D: [f64; 8] = [
    1.57449261107098347e1,
    1.17693950891312499e2,
    5.37181101862009858e2,
    1.62138957456669019e3,
    3.29079923573345963e3,
    4.36261909014324716e3,
    3.43936767414372164e3,
    1.23033935480374942e3,
];
const ERF_P: [f64; 6] = [
    3.05326634961232344e-1,
    3.60344899949804439e-1,
    1.25781726111229246e-1,
    1.60837851487422766e-2,
    6.58749161529837803e-4,
    1.63153871373020978e-2,
];
const ERF_Q: [f64; 5] = [
    2.56852019228982242e0,
    1.87295284992346047e0,
    5.27905102951428412e-1,
    6.05183413124413191e-2,
    2.33520497626869185e-3,
];

pub fn erf(x: f64) -> f64 {
    if x.abs() <= 0.46875 {
        let z = x * x;
        let mut num = ERF_A[4] * z;
        let mut den = z;
        for i in 0..3 {
            num = (num + ERF_A[i]) * z;
            den = (den + ERF_B[i]) * z;
        }
        x * (num + ERF_A[3]) / (den + ERF_B[3])
    } else {
        1.0 - erfc(x)
    }
}

pub fn erfc(x: f64) -> f64 {
    let ax = x.abs();
    if ax <= 0.46875 {
        return 1.0 - erf(x);
    }
    let value = if ax <= 4.0 {
        let mut num = ERF_C[8] * ax;
        let mut den = ax;
        for i in 0..7 {
            num = (num + ERF_C[i]) * ax;
            den = (den + ERF_D[i]) * ax;
        }
        let ratio = (num + ERF_C[7]) / (den + ERF_D[7]);
        exp_mx2(ax) * ratio
    } else if ax < 26.6 {
        let z = 1.0 / (ax * ax);
        let mut num = ERF_P[5] * z;
        let mut den = z;
        for i in 0..4 {
            num = (num + ERF_P[i]) * z;
            den = (den + ERF_Q[i]) * z;
        }
        let mut ratio = z * (num + ERF_P[4]) / (den + ERF_Q[4]);
        ratio = (FRAC_1_SQRT_PI - ratio) / ax;
        exp_mx2(ax) * ratio
    } else {
        0.0
    };
    if x < 0.0 {
        2.0 - value
    } else {
        value
    }
}

const FRAC_1_SQRT_PI: f64 = 0.5641895835477563;

// exp(-x^2) computed with the split trick from SPECFUN to reduce rounding.
fn exp_mx2(x: f64) -> f64 {
    let xsq = (x * 16.0).trunc() / 16.0;
    let del = (x - xsq) * (x + xsq);
    (-xsq * xsq).exp() * (-del).exp()
}

/// Inverse standard normal CDF. Acklam's rational approximation refined by a
/// single Halley step against [`normal_cdf`]; absolute error below 1e-14 for
/// p in (1e-300, 1 - 1e-16).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile defined on (0,1), got {p}");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // Halley refinement.
    let e = normal_cdf(x) - p;
    let u = e * SQRT_2PI * (0.5 * x * x).exp();
    x - u / (1.0 + x * u / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quadrature_polynomial_exact() {
        let v = integrate(&|x| x * x, 0.0, 3.0, 1e-10);
        assert_abs_diff_eq!(v, 9.0, epsilon = 1e-9);
    }

    #[test]
    fn quadrature_gaussian_mass() {
        let v = integrate(&normal_pdf, -10.0, 10.0, 1e-10);
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-8);
    }

    // Reference values computed with mpmath at 30 digits.
    #[test]
    fn normal_cdf_reference() {
        assert_abs_diff_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(normal_cdf(1.0), 0.84134474606854295, epsilon = 1e-14);
        assert_abs_diff_eq!(normal_cdf(2.0), 0.97724986805182079, epsilon = 1e-14);
        assert_abs_diff_eq!(normal_cdf(-1.5), 0.066807201268858066, epsilon = 1e-14);
        assert_abs_diff_eq!(normal_cdf(3.7), 0.99989220026652261, epsilon = 1e-14);
        assert_abs_diff_eq!(normal_cdf(-8.0), 6.2209605742717844e-16, epsilon = 1e-26);
    }

    #[test]
    fn normal_quantile_reference() {
        assert_abs_diff_eq!(normal_quantile(0.975), 1.9599639845400542, epsilon = 1e-9);
        assert_abs_diff_eq!(normal_quantile(0.75), 0.67448975019608174, epsilon = 1e-9);
        assert_abs_diff_eq!(normal_quantile(0.995), 2.5758293035489008, epsilon = 1e-9);
        assert_abs_diff_eq!(normal_quantile(0.9), 1.2815515655446005, epsilon = 1e-9);
        assert_abs_diff_eq!(normal_quantile(0.025), -1.9599639845400542, epsilon = 1e-9);
        assert_abs_diff_eq!(normal_quantile(1e-8), -5.6120012441747887, epsilon = 1e-8);
    }

    #[test]
    fn quantile_roundtrips_cdf() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 1.9, 4.2] {
            assert_abs_diff_eq!(normal_quantile(normal_cdf(x)), x, epsilon = 1e-9);
        }
    }

    #[test]
    fn sample_sd_two_points() {
        assert_abs_diff_eq!(sample_sd(&[-1.0, 1.0]), std::f64::consts::SQRT_2, epsilon = 1e-15);
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(quantile_sorted(&v, 0.5), 2.5, epsilon = 1e-15);
        assert_abs_diff_eq!(quantile_sorted(&v, 0.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(quantile_sorted(&v, 1.0), 4.0, epsilon = 1e-15);
    }
}
