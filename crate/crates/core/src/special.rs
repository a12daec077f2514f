//! Standard normal density, distribution function and its inverse.

use libm::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal distribution function, via `erfc` so both tails keep
/// full relative precision.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

// Acklam's rational approximation, relative error below 1.2e-9.
const A: [f64; 6] = [
    -3.969683028665376e+01,
    2.209460984245205e+02,
    -2.759285104469687e+02,
    1.38357751867269e+02,
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

fn acklam(p: f64) -> f64 {
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Inverse of [`norm_cdf`] on `(0, 1)`.
///
/// The rational approximation is refined by Newton steps against the
/// `erfc`-based distribution function. Upper-half arguments use the
/// reflection `-inv(1 - p)`, which is exact in floating point for `p >= 0.5`.
pub fn norm_inv_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    if p > 0.5 {
        return -norm_inv_cdf(1.0 - p);
    }
    let mut x = acklam(p);
    for _ in 0..2 {
        let dens = norm_pdf(x);
        if dens <= 0.0 {
            break;
        }
        // relative residual keeps precision deep in the lower tail
        let step = (norm_cdf(x) - p) / dens;
        x -= step;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Series `Phi(x) = 1/2 + phi(x) * sum x^(2k+1) / (2k+1)!!`, independent of erfc.
    fn cdf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut k = 1.0;
        while term.abs() > 1e-18 * sum.abs() {
            term *= x * x / (2.0 * k + 1.0);
            sum += term;
            k += 1.0;
        }
        0.5 + norm_pdf(x) * sum
    }

    fn inv_by_bisection(p: f64) -> f64 {
        let (mut lo, mut hi) = (-8.0, 8.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf_series(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn cdf_matches_series() {
        for i in -60..=60 {
            let x = i as f64 * 0.1;
            assert!((norm_cdf(x) - cdf_series(x)).abs() < 1e-14, "x={x}");
        }
    }

    #[test]
    fn inverse_round_trips() {
        let mut p = 1e-10;
        while p < 1.0 {
            let x = norm_inv_cdf(p);
            assert!((norm_cdf(x) - p).abs() <= 1e-13, "p={p}");
            p = if p < 0.01 { p * 3.0 } else { p + 0.01 };
        }
    }

    #[test]
    fn inverse_matches_bisection_oracle() {
        for p in [0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99] {
            let x = norm_inv_cdf(p);
            let oracle = inv_by_bisection(p);
            assert!((x - oracle).abs() < 1e-12, "p={p}: {x} vs {oracle}");
        }
        assert!((norm_inv_cdf(0.05) - -1.6448536269514722).abs() < 1e-12);
        assert_eq!(norm_inv_cdf(0.5), 0.0);
    }

    #[test]
    fn pdf_values() {
        assert!((norm_pdf(0.0) - 0.3989422804014327).abs() < 1e-16);
        assert!((norm_pdf(1.0) - 0.24197072451914337).abs() < 1e-16);
    }
}
