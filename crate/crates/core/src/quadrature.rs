#![allow(clippy::excessive_precision)]

//! Globally adaptive Gauss-Kronrod (7/15) integration on a finite interval.

use crate::error::{Result, RiskError};

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

const MAX_SEGMENTS: usize = 2000;

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        kronrod += WGK[j] * s;
        // odd Kronrod nodes are the Gauss nodes
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Integrates `f` over `[a, b]` until the summed error estimate drops below
/// `max(abs_tol, rel_tol * |integral|)`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let mut segments = vec![(a, b, gk15(&f, a, b))];
    loop {
        let (total, err): (f64, f64) = segments
            .iter()
            .fold((0.0, 0.0), |(t, e), (_, _, (v, ev))| (t + v, e + ev));
        if !total.is_finite() {
            return Err(RiskError::QuadratureFailed { estimate: f64::INFINITY });
        }
        if err <= abs_tol.max(rel_tol * total.abs()) {
            return Ok(total);
        }
        if segments.len() >= MAX_SEGMENTS {
            return Err(RiskError::QuadratureFailed { estimate: err });
        }
        let worst = segments
            .iter()
            .enumerate()
            .max_by(|x, y| (x.1).2 .1.total_cmp(&(y.1).2 .1))
            .map(|(i, _)| i)
            .unwrap();
        let (lo, hi, _) = segments.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        segments.push((lo, mid, gk15(&f, lo, mid)));
        segments.push((mid, hi, gk15(&f, mid, hi)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomials_are_exact() {
        let v = integrate(|x| x * x * x - 2.0 * x, 0.0, 2.0, 1e-14, 0.0).unwrap();
        assert!((v - 0.0).abs() < 1e-14);
        let v = integrate(|x| x.powi(6), -1.0, 1.0, 1e-14, 0.0).unwrap();
        assert!((v - 2.0 / 7.0).abs() < 1e-14);
    }

    #[test]
    fn endpoint_singular_derivative() {
        // sqrt(x) on [0,1] = 2/3
        let v = integrate(f64::sqrt, 0.0, 1.0, 1e-13, 0.0).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_mass() {
        let v = integrate(crate::special::norm_pdf, -40.0, 40.0, 1e-14, 0.0).unwrap();
        assert!((v - 1.0).abs() < 1e-13);
    }

    #[test]
    fn reports_non_convergence() {
        let r = integrate(|x| 1.0 / x, 0.0, 1.0, 1e-12, 0.0);
        assert!(matches!(r, Err(RiskError::QuadratureFailed { .. })));
    }
}
