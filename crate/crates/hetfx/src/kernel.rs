//! Kernel functions, the kernel constants entering the asymptotic variance,
//! and univariate kernel density estimation.
//!
//! Two kernels are supported. The default is Gaussian: its unbounded support
//! means no observation ever receives exactly zero weight, which avoids
//! singular local designs in sparse regions. Epanechnikov is available for
//! callers that want compact support.

use crate::error::{Error, Result};
use crate::numeric::{self, KahanSum};

/// Smoothing kernel. Both variants integrate to 1, are symmetric about 0,
/// and are nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelKind {
    #[default]
    Gaussian,
    Epanechnikov,
}

impl KernelKind {
    /// K(u).
    #[inline]
    pub fn eval(self, u: f64) -> f64 {
        match self {
            KernelKind::Gaussian => numeric::normal_pdf(u),
            KernelKind::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }

    /// Scaled kernel K_h(u) = K(u/h)/h.
    #[inline]
    pub fn eval_scaled(self, u: f64, h: f64) -> f64 {
        self.eval(u / h) / h
    }

    /// Half-width beyond which the kernel is treated as zero for quadrature
    /// bounds. Gaussian mass outside ±12 is below 1e-32.
    fn quadrature_halfwidth(self) -> f64 {
        match self {
            KernelKind::Gaussian => 12.0,
            KernelKind::Epanechnikov => 1.0,
        }
    }

    /// Constants for the plug-in variance at bandwidth ratio h1/h3.
    pub fn constants(self, h1: f64, h3: f64) -> Result<KernelConstants> {
        if !(h1 > 0.0) || !(h3 > 0.0) {
            return Err(Error::invalid(format!(
                "bandwidths must be positive, got h1={h1}, h3={h3}"
            )));
        }
        Ok(self.constants_for_ratio(h1 / h3))
    }

    /// As [`constants`](Self::constants) but with the ratio supplied
    /// directly; `ratio = 0` reproduces nu exactly.
    pub fn constants_for_ratio(self, ratio: f64) -> KernelConstants {
        const TOL: f64 = 1e-8;
        let r = self.quadrature_halfwidth();
        let nu = numeric::integrate(&|t| self.eval(t) * self.eval(t), -r, r, TOL);
        let kbar_sq_integral = if ratio == 0.0 {
            // kbar reduces to the kernel itself when step-1 smoothing is
            // infinitely finer than step-2 smoothing.
            nu
        } else {
            let outer = r * (1.0 + ratio);
            // Integrate t only where both factors have support; otherwise the
            // adaptive rule can step right over the second kernel's bump.
            let kbar = |x: f64| {
                let lo = (-r).max((-r - x) / ratio);
                let hi = r.min((r - x) / ratio);
                if lo >= hi {
                    return 0.0;
                }
                numeric::integrate(&|t| self.eval(t) * self.eval(x + ratio * t), lo, hi, TOL * 0.01)
            };
            numeric::integrate(&|x| kbar(x).powi(2), -outer, 0.0, 0.5 * TOL)
                + numeric::integrate(&|x| kbar(x).powi(2), 0.0, outer, 0.5 * TOL)
        };
        KernelConstants {
            nu,
            kbar_sq_integral,
            ratio,
        }
    }
}

/// The two kernel integrals appearing in the asymptotic variance of the
/// two-step estimator, together with the bandwidth ratio they were computed
/// at: `nu` is the squared-kernel integral, and `kbar_sq_integral` is the
/// squared integral of the cross-smoothing kernel
/// `kbar(x) = integral of K(t) K(x + ratio * t) dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConstants {
    pub nu: f64,
    pub kbar_sq_integral: f64,
    pub ratio: f64,
}

/// Kernel density estimate at `x`: `(1/(n h)) * sum K((x - s_i)/h)`.
pub fn kde(samples: &[f64], h: f64, x: f64, kind: KernelKind) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid(format!(
            "kde needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    if !(h > 0.0) {
        return Err(Error::invalid(format!("kde bandwidth must be positive, got {h}")));
    }
    let mut acc = KahanSum::new();
    for &s in samples {
        acc.add(kind.eval((x - s) / h));
    }
    Ok(acc.value() / (samples.len() as f64 * h))
}

/// Silverman's rule of thumb, `1.06 * sd * n^(-1/5)`. Shared by the density
/// estimator and the regression bandwidth selector.
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::invalid("bandwidth rule needs at least 2 values".to_string()));
    }
    let sd = numeric::sample_sd(values);
    if sd <= 0.0 {
        return Err(Error::invalid(
            "zero-variance values: no bandwidth scale available".to_string(),
        ));
    }
    Ok(1.06 * sd * (values.len() as f64).powf(-0.2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn eval_reference_points() {
        assert_abs_diff_eq!(
            KernelKind::Gaussian.eval(0.0),
            0.3989422804014327,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(KernelKind::Epanechnikov.eval(0.0), 0.75, epsilon = 1e-15);
        assert_eq!(KernelKind::Epanechnikov.eval(1.5), 0.0);
    }

    #[test]
    fn kernels_integrate_to_one() {
        for kind in [KernelKind::Gaussian, KernelKind::Epanechnikov] {
            let r = kind.quadrature_halfwidth();
            let mass = numeric::integrate(&|u| kind.eval(u), -r, r, 1e-10);
            assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn nu_reference_values() {
        // Gaussian: 1/(2 sqrt(pi)); Epanechnikov: 3/5.
        let g = KernelKind::Gaussian.constants_for_ratio(0.0);
        assert_abs_diff_eq!(g.nu, 0.28209479177387814, epsilon = 1e-8);
        let e = KernelKind::Epanechnikov.constants_for_ratio(0.0);
        assert_abs_diff_eq!(e.nu, 0.6, epsilon = 1e-8);
    }

    #[test]
    fn ratio_zero_collapses_kbar_to_nu() {
        for kind in [KernelKind::Gaussian, KernelKind::Epanechnikov] {
            let c = kind.constants_for_ratio(0.0);
            assert_abs_diff_eq!(c.kbar_sq_integral, c.nu, epsilon = 1e-8);
        }
    }

    #[test]
    fn gaussian_kbar_closed_form() {
        // For the Gaussian kernel the cross-smoothing integral has the closed
        // form 1/(2 sqrt(pi (1 + r^2))).
        for &r in &[0.5, 1.0, 2.0] {
            let c = KernelKind::Gaussian.constants(r, 1.0).unwrap();
            let expected = 0.5 / (std::f64::consts::PI * (1.0 + r * r)).sqrt();
            assert_abs_diff_eq!(c.kbar_sq_integral, expected, epsilon = 1e-7);
        }
    }

    // Independent brute-force oracle: fixed-step Simpson double quadrature,
    // coded without the adaptive machinery.
    fn kbar_sq_brute(kind: KernelKind, ratio: f64) -> f64 {
        let half = kind.quadrature_halfwidth();
        let steps = 4000usize;
        let kbar = |x: f64| {
            let (a, b) = (-half, half);
            let hstep = (b - a) / steps as f64;
            let mut s = 0.0;
            for i in 0..=steps {
                let t = a + i as f64 * hstep;
                let w = if i == 0 || i == steps {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                s += w * kind.eval(t) * kind.eval(x + ratio * t);
            }
            s * hstep / 3.0
        };
        let (a, b) = (-half * (1.0 + ratio), half * (1.0 + ratio));
        let hstep = (b - a) / steps as f64;
        let mut s = 0.0;
        for i in 0..=steps {
            let x = a + i as f64 * hstep;
            let w = if i == 0 || i == steps {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            s += w * kbar(x).powi(2);
        }
        s * hstep / 3.0
    }

    #[test]
    fn kbar_matches_brute_force_double_quadrature() {
        let got = KernelKind::Gaussian.constants(1.0, 1.0).unwrap();
        assert_abs_diff_eq!(got.kbar_sq_integral, kbar_sq_brute(KernelKind::Gaussian, 1.0), epsilon = 1e-6);
        let got = KernelKind::Epanechnikov.constants(0.5, 1.0).unwrap();
        assert_abs_diff_eq!(
            got.kbar_sq_integral,
            kbar_sq_brute(KernelKind::Epanechnikov, 0.5),
            epsilon = 1e-6
        );
        // Exact value for Epanechnikov at ratio 1 is 167/385 (mpmath, with
        // the inner integral split at the support kink).
        let got = KernelKind::Epanechnikov.constants(1.0, 1.0).unwrap();
        assert_abs_diff_eq!(got.kbar_sq_integral, 0.43376623376623377, epsilon = 1e-6);
    }

    #[test]
    fn constants_reject_nonpositive_bandwidths() {
        assert!(KernelKind::Gaussian.constants(0.0, 1.0).is_err());
        assert!(KernelKind::Gaussian.constants(1.0, -2.0).is_err());
    }

    #[test]
    fn kde_point_mass_at_zero() {
        let samples = vec![0.0; 50];
        let v = kde(&samples, 1.0, 0.0, KernelKind::Gaussian).unwrap();
        assert_abs_diff_eq!(v, 0.3989422804014327, epsilon = 1e-12);
    }

    #[test]
    fn kde_recovers_uniform_density() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<f64> = (0..10_000).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let h = silverman_bandwidth(&samples).unwrap();
        let v = kde(&samples, h, 0.0, KernelKind::Gaussian).unwrap();
        assert_abs_diff_eq!(v, 1.0, epsilon = 0.05);
    }

    #[test]
    fn kde_integrates_to_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<f64> = (0..500).map(|_| rng.gen_range(-1.0..2.0)).collect();
        let h = 0.2;
        let lo = -1.0 - 5.0 * h;
        let hi = 2.0 + 5.0 * h;
        let m = 4001;
        let xs = numeric::linspace(lo, hi, m);
        let step = xs[1] - xs[0];
        let mut mass = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            let w = if i == 0 || i == m - 1 { 0.5 } else { 1.0 };
            mass += w * kde(&samples, h, x, KernelKind::Gaussian).unwrap();
        }
        assert_abs_diff_eq!(mass * step, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn kde_rejects_degenerate_input() {
        assert!(kde(&[], 1.0, 0.0, KernelKind::Gaussian).is_err());
        assert!(kde(&[1.0], 1.0, 0.0, KernelKind::Gaussian).is_err());
        assert!(kde(&[1.0, 2.0], 0.0, 0.0, KernelKind::Gaussian).is_err());
    }

    proptest! {
        #[test]
        fn kernel_symmetry(u in -5.0f64..5.0) {
            for kind in [KernelKind::Gaussian, KernelKind::Epanechnikov] {
                prop_assert_eq!(kind.eval(u), kind.eval(-u));
                prop_assert!(kind.eval(u) >= 0.0);
            }
        }

        #[test]
        fn kde_scale_equivariance(c in 0.1f64..10.0, x in -2.0f64..2.0) {
            let samples = [0.3, -1.2, 0.7, 2.4, -0.1];
            let scaled: Vec<f64> = samples.iter().map(|s| s * c).collect();
            let base = kde(&samples, 0.8, x, KernelKind::Gaussian).unwrap();
            let stretched = kde(&scaled, 0.8 * c, x * c, KernelKind::Gaussian).unwrap();
            prop_assert!((stretched - base / c).abs() <= 1e-12 * (1.0 + base / c));
        }

        #[test]
        fn kde_permutation_invariant(seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let samples = [0.3, -1.2, 0.7, 2.4, -0.1, 1.1];
            let mut shuffled = samples;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            shuffled.shuffle(&mut rng);
            let a = kde(&samples, 0.5, 0.4, KernelKind::Gaussian).unwrap();
            let b = kde(&shuffled, 0.5, 0.4, KernelKind::Gaussian).unwrap();
            prop_assert!((a - b).abs() <= 1e-14);
        }
    }
}
