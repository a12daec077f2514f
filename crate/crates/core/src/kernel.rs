//! Kernel smoothing of the portfolio outcome sample.
//!
//! All estimators share one pass over the rows that accumulates
//! `sum_k w_k K_h(q - z_k)` and `sum_k w_k x_ki K_h(q - z_k)`. The density,
//! the weight derivative of the smoothed distribution function and the
//! Nadaraya-Watson conditional mean are read off those sums, so
//! `-(dF/du_i) / (dF/dz)` and the regression coincide term for term.
//!
//! Sums run over fixed-size row chunks in parallel and the chunk partials are
//! added in chunk order, which keeps results bit-identical for any number of
//! worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Result, RiskError};
use crate::model::{
    empirical_quantile, portfolio_outcomes, tail_indices, tail_mean, PortfolioSample, RiskSpec,
    ScenarioSet, Tail, WeightVector,
};

const CHUNK: usize = 8192;
pub const DEFAULT_MIN_DENSITY: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Gaussian,
    Epanechnikov,
}

impl KernelKind {
    /// Kernel value at standardised distance `t`.
    pub fn eval(self, t: f64) -> f64 {
        match self {
            KernelKind::Gaussian => (-0.5 * t * t).exp() / (2.0 * PI).sqrt(),
            KernelKind::Epanechnikov => {
                if t.abs() < 1.0 {
                    0.75 * (1.0 - t * t)
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub kernel: KernelKind,
    pub bandwidth: Bandwidth,
    /// Positivity guard on the density at the quantile.
    pub min_density: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { kernel: KernelKind::Gaussian, bandwidth: Bandwidth::Auto, min_density: DEFAULT_MIN_DENSITY }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(RiskError::InvalidInput(format!("bandwidth must be positive, got {h}")));
            }
        }
        if !(self.min_density > 0.0) {
            return Err(RiskError::InvalidInput("min_density must be positive".into()));
        }
        Ok(())
    }

    /// Explicit bandwidth, or the rule-of-thumb value for `p`.
    pub fn resolve_bandwidth(&self, p: &PortfolioSample) -> Result<f64> {
        self.validate()?;
        match self.bandwidth {
            Bandwidth::Fixed(h) => Ok(h),
            Bandwidth::Auto => select_bandwidth(p),
        }
    }
}

/// Silverman's rule `1.06 * min(sd, IQR / 1.349) * N^(-1/5)`, with the
/// weighted standard deviation and weighted quartiles of the sample.
pub fn select_bandwidth(p: &PortfolioSample) -> Result<f64> {
    let n = p.len();
    if n < 2 {
        return Err(RiskError::DegenerateSample);
    }
    let z = p.values();
    let w = p.probabilities();
    let mean: f64 = z.iter().zip(w).map(|(z, w)| z * w).sum();
    let var: f64 = z.iter().zip(w).map(|(z, w)| w * (z - mean) * (z - mean)).sum();
    let sd = (var * n as f64 / (n as f64 - 1.0)).sqrt();
    let iqr = empirical_quantile(p, 0.75) - empirical_quantile(p, 0.25);
    let spread = sd.min(iqr / 1.349);
    // spreads at the level of rounding noise are no spread
    let magnitude = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(spread > 64.0 * f64::EPSILON * magnitude) || spread == 0.0 {
        return Err(RiskError::DegenerateSample);
    }
    Ok(1.06 * spread * (n as f64).powf(-0.2))
}

/// Kernel sums at one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSums {
    /// `sum_k w_k K_h(q - z_k)`
    pub density: f64,
    /// `sum_k w_k x_ki K_h(q - z_k)` for each asset
    pub moments: Vec<f64>,
}

fn accumulate(
    s: Option<&ScenarioSet>,
    p: &PortfolioSample,
    q: f64,
    h: f64,
    kernel: KernelKind,
) -> KernelSums {
    let d = s.map_or(0, |s| s.n_assets());
    let z = p.values();
    let w = p.probabilities();
    let partials: Vec<(f64, Vec<f64>)> = (0..z.len().div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let range = c * CHUNK..((c + 1) * CHUNK).min(z.len());
            let mut den = 0.0;
            let mut num = vec![0.0; d];
            for k in range {
                let kv = w[k] * kernel.eval((q - z[k]) / h) / h;
                if kv == 0.0 {
                    continue;
                }
                den += kv;
                if let Some(s) = s {
                    for (acc, x) in num.iter_mut().zip(s.row(k)) {
                        *acc += x * kv;
                    }
                }
            }
            (den, num)
        })
        .collect();
    let mut sums = KernelSums { density: 0.0, moments: vec![0.0; d] };
    for (den, num) in partials {
        sums.density += den;
        for (acc, v) in sums.moments.iter_mut().zip(num) {
            *acc += v;
        }
    }
    sums
}

/// Kernel sums for the portfolio `u` at `q` with bandwidth `h`.
pub fn kernel_sums(s: &ScenarioSet, p: &PortfolioSample, q: f64, h: f64, kernel: KernelKind) -> KernelSums {
    accumulate(Some(s), p, q, h, kernel)
}

/// Kernel estimate of the density of `Z(u)` at `z`, the `z`-derivative of
/// the smoothed distribution function.
pub fn density_at(p: &PortfolioSample, z: f64, cfg: &KernelConfig) -> Result<f64> {
    let h = cfg.resolve_bandwidth(p)?;
    Ok(accumulate(None, p, z, h, cfg.kernel).density)
}

/// Smoothed `dF(z, u)/du_i = -sum_k w_k x_ki K_h(z - z_k)`.
pub fn cdf_weight_derivative(
    s: &ScenarioSet,
    u: &WeightVector,
    z: f64,
    i: usize,
    cfg: &KernelConfig,
) -> Result<f64> {
    if i >= s.n_assets() {
        return Err(RiskError::DimensionMismatch { expected: s.n_assets(), found: i + 1 });
    }
    let p = portfolio_outcomes(s, u)?;
    let h = cfg.resolve_bandwidth(&p)?;
    Ok(-kernel_sums(s, &p, z, h, cfg.kernel).moments[i])
}

/// Result of a Nadaraya-Watson evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Regression {
    pub conditional_mean: Vec<f64>,
    pub density: f64,
    pub bandwidth: f64,
}

fn regression_from_sums(q: f64, sums: KernelSums, h: f64, min_density: f64) -> Result<Regression> {
    if !(sums.density >= min_density) {
        return Err(RiskError::DensityTooLow { at: q, density: sums.density, threshold: min_density });
    }
    let conditional_mean = sums.moments.iter().map(|m| m / sums.density).collect();
    Ok(Regression { conditional_mean, density: sums.density, bandwidth: h })
}

/// Resolves the bandwidth for a gradient estimate. A sample with no spread
/// carries no continuous density, so it trips the density guard.
fn guarded_bandwidth(p: &PortfolioSample, q: f64, cfg: &KernelConfig) -> Result<f64> {
    match cfg.resolve_bandwidth(p) {
        Err(RiskError::DegenerateSample) => {
            Err(RiskError::DensityTooLow { at: q, density: 0.0, threshold: cfg.min_density })
        }
        other => other,
    }
}

/// Nadaraya-Watson estimate of `E[X | Z(u) = q]`.
pub fn kernel_regression(s: &ScenarioSet, u: &WeightVector, q: f64, cfg: &KernelConfig) -> Result<Regression> {
    let p = portfolio_outcomes(s, u)?;
    let h = guarded_bandwidth(&p, q, cfg)?;
    regression_from_sums(q, kernel_sums(s, &p, q, h, cfg.kernel), h, cfg.min_density)
}

/// Quantile gradient estimate: the regression at the empirical quantile.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileGradient {
    pub quantile: f64,
    pub gradient: Vec<f64>,
    pub density: f64,
    pub bandwidth: f64,
}

pub fn kernel_quantile_gradient(
    s: &ScenarioSet,
    u: &WeightVector,
    spec: &RiskSpec,
    cfg: &KernelConfig,
) -> Result<QuantileGradient> {
    let p = portfolio_outcomes(s, u)?;
    quantile_gradient_on(s, &p, spec.alpha(), cfg)
}

pub(crate) fn quantile_gradient_on(
    s: &ScenarioSet,
    p: &PortfolioSample,
    alpha: f64,
    cfg: &KernelConfig,
) -> Result<QuantileGradient> {
    let q = empirical_quantile(p, alpha);
    let h = guarded_bandwidth(p, q, cfg)?;
    let r = regression_from_sums(q, kernel_sums(s, p, q, h, cfg.kernel), h, cfg.min_density)?;
    Ok(QuantileGradient { quantile: q, gradient: r.conditional_mean, density: r.density, bandwidth: h })
}

/// Shortfall gradient with the kernel quantile gradient plugged in:
/// `delta * E[(dQ/du_i - X_i) |Z - q|^(delta-1) | Z <= q]` on the lower tail,
/// the difference reversed on the upper tail.
pub fn kernel_shortfall_gradient(
    s: &ScenarioSet,
    u: &WeightVector,
    spec: &RiskSpec,
    cfg: &KernelConfig,
) -> Result<Vec<f64>> {
    let p = portfolio_outcomes(s, u)?;
    let qg = quantile_gradient_on(s, &p, spec.alpha(), cfg)?;
    shortfall_gradient_on(s, &p, spec, &qg)
}

pub(crate) fn shortfall_gradient_on(
    s: &ScenarioSet,
    p: &PortfolioSample,
    spec: &RiskSpec,
    qg: &QuantileGradient,
) -> Result<Vec<f64>> {
    let q = qg.quantile;
    let rows = tail_indices(p, q, spec.tail());
    let z = p.values();
    let delta = spec.delta();
    let sign = match spec.tail() {
        Tail::Lower => 1.0,
        Tail::Upper => -1.0,
    };
    (0..s.n_assets())
        .map(|i| {
            let dq = qg.gradient[i];
            // powf(0, 0) == 1 covers the atom at q when delta = 1
            tail_mean(p, &rows, q, |k| sign * (dq - s.row(k)[i]) * (z[k] - q).abs().powf(delta - 1.0))
                .map(|m| delta * m)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::empirical_tail_gradient;

    fn one_col(z: &[f64]) -> ScenarioSet {
        ScenarioSet::new(vec!["x".into()], z.iter().map(|v| vec![*v]).collect()).unwrap()
    }

    fn fixed(h: f64) -> KernelConfig {
        KernelConfig { bandwidth: Bandwidth::Fixed(h), ..KernelConfig::default() }
    }

    #[test]
    fn density_values() {
        let p = PortfolioSample::uniform(vec![0.0]).unwrap();
        assert!((density_at(&p, 0.0, &fixed(1.0)).unwrap() - 0.3989423).abs() < 1e-7);
        let p = PortfolioSample::uniform(vec![-1.0, 1.0]).unwrap();
        assert!((density_at(&p, 0.0, &fixed(1.0)).unwrap() - 0.2419707).abs() < 1e-7);
        assert_eq!(density_at(&p, 100.0, &fixed(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn epanechnikov_support() {
        assert_eq!(KernelKind::Epanechnikov.eval(1.0), 0.0);
        assert_eq!(KernelKind::Epanechnikov.eval(0.0), 0.75);
        let p = PortfolioSample::uniform(vec![0.0, 0.5]).unwrap();
        let cfg = KernelConfig { kernel: KernelKind::Epanechnikov, ..fixed(1.0) };
        let f = density_at(&p, 0.25, &cfg).unwrap();
        assert!((f - 0.75 * (1.0 - 0.0625)).abs() < 1e-15);
    }

    #[test]
    fn bandwidth_rule() {
        let p = PortfolioSample::uniform(vec![3.0; 10]).unwrap();
        assert_eq!(select_bandwidth(&p), Err(RiskError::DegenerateSample));
        let z: Vec<f64> = (0..50).map(|k| ((k * 37) % 50) as f64 * 0.1).collect();
        let h = select_bandwidth(&PortfolioSample::uniform(z.clone()).unwrap()).unwrap();
        let h3 = select_bandwidth(&PortfolioSample::uniform(z.iter().map(|v| 3.0 * v).collect()).unwrap()).unwrap();
        assert!((h3 - 3.0 * h).abs() < 1e-12 * h3);
        // independent rule evaluation: uniform grid 0..4.9, sd and quartiles by hand
        let mean = 2.45;
        let var: f64 = (0..50).map(|k| (k as f64 * 0.1 - mean).powi(2)).sum::<f64>() / 49.0;
        let iqr = z_sorted_quantile(&z, 0.75) - z_sorted_quantile(&z, 0.25);
        let expect = 1.06 * var.sqrt().min(iqr / 1.349) * 50f64.powf(-0.2);
        assert!((h - expect).abs() < 1e-12);
    }

    fn z_sorted_quantile(z: &[f64], a: f64) -> f64 {
        let mut v = z.to_vec();
        v.sort_by(f64::total_cmp);
        v[((a * v.len() as f64).ceil() as usize).max(1) - 1]
    }

    #[test]
    fn weight_derivative_identities() {
        // constant column: -c * f(z)
        let s = ScenarioSet::new(
            vec!["a".into(), "b".into()],
            vec![vec![0.1, 2.0], vec![0.7, 2.0], vec![-0.4, 2.0], vec![1.3, 2.0]],
        )
        .unwrap();
        let u = WeightVector::new(vec![1.0, 0.0]).unwrap();
        let cfg = fixed(0.5);
        let p = portfolio_outcomes(&s, &u).unwrap();
        let f = density_at(&p, 0.3, &cfg).unwrap();
        let d = cdf_weight_derivative(&s, &u, 0.3, 1, &cfg).unwrap();
        assert!((d + 2.0 * f).abs() < 1e-15);

        // antisymmetric data cancel at 0
        let s = ScenarioSet::new(
            vec!["a".into(), "b".into()],
            vec![vec![1.0, 0.5], vec![-1.0, -0.5], vec![2.0, 3.0], vec![-2.0, -3.0]],
        )
        .unwrap();
        let d = cdf_weight_derivative(&s, &WeightVector::new(vec![1.0, 0.0]).unwrap(), 0.0, 1, &cfg).unwrap();
        assert!(d.abs() < 1e-16);
        assert!(cdf_weight_derivative(&s, &u, 0.0, 2, &cfg).is_err());
    }

    #[test]
    fn regression_properties() {
        let s = ScenarioSet::new(
            vec!["a".into(), "b".into()],
            vec![vec![0.1, 2.0], vec![0.7, 2.0], vec![-0.4, 2.0], vec![1.3, 2.0]],
        )
        .unwrap();
        let u = WeightVector::new(vec![1.0, 0.5]).unwrap();
        let r = kernel_regression(&s, &u, 1.2, &fixed(0.4)).unwrap();
        assert!((r.conditional_mean[1] - 2.0).abs() < 1e-15);
        assert!(r.conditional_mean[0] >= -0.4 && r.conditional_mean[0] <= 1.3);

        // localisation at an isolated atom
        let s = one_col(&[0.0, 1.0, 2.5, 4.0]);
        let u = WeightVector::new(vec![1.0]).unwrap();
        let r = kernel_regression(&s, &u, 2.5, &fixed(1e-3)).unwrap();
        assert!((r.conditional_mean[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn guard_trips() {
        let s = one_col(&[1.0; 20]);
        let u = WeightVector::new(vec![1.0]).unwrap();
        let spec = RiskSpec::new(0.05, 1.0, 1, Tail::Lower).unwrap();
        assert!(matches!(
            kernel_quantile_gradient(&s, &u, &spec, &KernelConfig::default()),
            Err(RiskError::DensityTooLow { .. })
        ));
        let s = one_col(&[0.0, 1.0]);
        assert!(matches!(
            kernel_regression(&s, &u, 60.0, &fixed(1.0)),
            Err(RiskError::DensityTooLow { density, .. }) if density == 0.0
        ));
    }

    #[test]
    fn shortfall_gradient_reduces_at_delta_one() {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|k| {
                let a = ((k * 17) % 40) as f64 / 10.0 - 2.0;
                let b = ((k * 23) % 40) as f64 / 13.0 - 1.5;
                vec![a, b]
            })
            .collect();
        let s = ScenarioSet::new(vec!["a".into(), "b".into()], rows).unwrap();
        let u = WeightVector::new(vec![1.0, 0.7]).unwrap();
        for tail in [Tail::Lower, Tail::Upper] {
            let spec = RiskSpec::new(0.2, 1.0, 1, tail).unwrap();
            let cfg = KernelConfig::default();
            let gq = kernel_quantile_gradient(&s, &u, &spec, &cfg).unwrap().gradient;
            let gt = empirical_tail_gradient(&s, &u, &spec).unwrap();
            let gs = kernel_shortfall_gradient(&s, &u, &spec, &cfg).unwrap();
            for i in 0..2 {
                let expect = match tail {
                    Tail::Lower => gq[i] - gt[i],
                    Tail::Upper => gt[i] - gq[i],
                };
                assert!((gs[i] - expect).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn chunked_sums_match_serial() {
        let n = 3 * CHUNK + 17;
        let rows: Vec<Vec<f64>> = (0..n).map(|k| vec![(k as f64 * 0.37).sin(), (k as f64 * 0.11).cos()]).collect();
        let s = ScenarioSet::new(vec!["a".into(), "b".into()], rows).unwrap();
        let p = portfolio_outcomes(&s, &WeightVector::new(vec![1.0, 1.0]).unwrap()).unwrap();
        let sums = kernel_sums(&s, &p, 0.2, 0.3, KernelKind::Gaussian);
        let serial: f64 = p.values().iter().map(|z| KernelKind::Gaussian.eval((0.2 - z) / 0.3) / 0.3 / n as f64).sum();
        assert!((sums.density - serial).abs() < 1e-12 * serial);
    }
}
