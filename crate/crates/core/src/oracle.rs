//! Independent numerical oracles: central finite differences, a smoothed
//! quantile that is differentiable in the weights, and Monte Carlo
//! references with bootstrap standard errors.
//!
//! Nothing here calls into the Gaussian or kernel backends; only the shared
//! domain types are used. Every random stream is derived from a master seed
//! and a fixed stream index, so serial and parallel runs agree bit for bit.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use libm::erfc;
use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{Result, RiskError};
use crate::gaussian::GaussianModel;
use crate::kernel::{KernelConfig, KernelKind};
use crate::model::{PortfolioSample, RiskSpec, Tail};

const CHUNK: usize = 8192;
const BISECTION_TOL: f64 = 1e-12;
pub const DEFAULT_RESAMPLES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FDConfig {
    /// Step relative to `max(1, |u|_inf)`.
    pub step: f64,
    pub smoothing: KernelConfig,
}

impl Default for FDConfig {
    fn default() -> Self {
        Self { step: 1e-6, smoothing: KernelConfig::default() }
    }
}

impl FDConfig {
    pub fn absolute_step(&self, u: &[f64]) -> f64 {
        self.step * u.iter().fold(1.0f64, |m, v| m.max(v.abs()))
    }
}

/// Central differences `(f(u + e_i) - f(u - e_i)) / 2e`.
pub fn fd_gradient<F>(f: F, u: &[f64], cfg: &FDConfig) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(cfg.step > 0.0) {
        return Err(RiskError::InvalidInput("finite-difference step must be positive".into()));
    }
    let eps = cfg.absolute_step(u);
    let probe = |v: &[f64]| f(v).map_err(|e| RiskError::ProbeFailed(format!("{v:?}: {e}")));
    (0..u.len())
        .map(|i| {
            let mut up = u.to_vec();
            let mut down = u.to_vec();
            up[i] += eps;
            down[i] -= eps;
            Ok((probe(&up)? - probe(&down)?) / (2.0 * eps))
        })
        .collect()
}

fn kernel_cdf(kernel: KernelKind, t: f64) -> f64 {
    match kernel {
        KernelKind::Gaussian => 0.5 * erfc(-t * FRAC_1_SQRT_2),
        KernelKind::Epanechnikov => {
            if t <= -1.0 {
                0.0
            } else if t >= 1.0 {
                1.0
            } else {
                0.5 + 0.75 * t - 0.25 * t * t * t
            }
        }
    }
}

/// Kernel-smoothed distribution function `sum_k w_k K((z - z_k) / h)`.
pub fn smoothed_cdf(p: &PortfolioSample, z: f64, h: f64, kernel: KernelKind) -> f64 {
    let zs = p.values();
    let ws = p.probabilities();
    let partials: Vec<f64> = (0..zs.len().div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let range = c * CHUNK..((c + 1) * CHUNK).min(zs.len());
            range.map(|k| ws[k] * kernel_cdf(kernel, (z - zs[k]) / h)).sum::<f64>()
        })
        .collect();
    partials.iter().sum()
}

/// Root of `smoothed_cdf(z) = alpha`, by bisection to an absolute width of 1e-12.
pub fn smoothed_quantile(p: &PortfolioSample, alpha: f64, h: f64, kernel: KernelKind) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(RiskError::InvalidInput(format!("alpha must lie in (0,1), got {alpha}")));
    }
    if !(h > 0.0) {
        return Err(RiskError::InvalidInput("smoothing bandwidth must be positive".into()));
    }
    let (min, max) = p.values().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (mut lo, mut hi) = (min - 40.0 * h, max + 40.0 * h);
    if smoothed_cdf(p, lo, h, kernel) > alpha || smoothed_cdf(p, hi, h, kernel) < alpha {
        return Err(RiskError::ProbeFailed("smoothed quantile bracket".into()));
    }
    for _ in 0..400 {
        if hi - lo <= BISECTION_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if smoothed_cdf(p, mid, h, kernel) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `E[|Z - q_h|^delta ; tail] / mass` at the smoothed quantile `q_h`, with
/// `mass = alpha` (lower) or `1 - alpha` (upper). Differentiable in the
/// weights wherever `q_h` is.
pub fn smoothed_shortfall(p: &PortfolioSample, spec: &RiskSpec, h: f64, kernel: KernelKind) -> Result<f64> {
    let q = smoothed_quantile(p, spec.alpha(), h, kernel)?;
    let (mass, lower) = match spec.tail() {
        Tail::Lower => (spec.alpha(), true),
        Tail::Upper => (1.0 - spec.alpha(), false),
    };
    let acc: f64 = p
        .values()
        .iter()
        .zip(p.probabilities())
        .filter(|(z, _)| if lower { **z <= q } else { **z >= q })
        .map(|(z, w)| w * (z - q).abs().powf(spec.delta()))
        .sum();
    Ok(acc / mass)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    /// Number of standard errors between the estimate and `target`.
    pub fn z_score(&self, target: f64) -> f64 {
        (self.value - target).abs() / self.se
    }
}

/// Bootstrap standard errors of a vector-valued statistic over `n` rows.
///
/// Resample `b` draws its indices from stream `b` of `seed`.
pub fn bootstrap_se<F>(n: usize, resamples: usize, seed: u64, statistic: F) -> Result<Vec<f64>>
where
    F: Fn(&[usize]) -> Result<Vec<f64>> + Sync,
{
    if resamples < 2 || n == 0 {
        return Err(RiskError::InvalidInput("bootstrap needs at least two resamples and one row".into()));
    }
    let draws = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64 + 1);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            statistic(&idx)
        })
        .collect::<Result<Vec<_>>>()?;
    let dim = draws[0].len();
    Ok((0..dim)
        .map(|j| {
            let mean = draws.iter().map(|d| d[j]).sum::<f64>() / resamples as f64;
            let var = draws.iter().map(|d| (d[j] - mean).powi(2)).sum::<f64>() / (resamples as f64 - 1.0);
            var.sqrt()
        })
        .collect())
}

/// Monte Carlo functionals of a Gaussian model on the query's tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReference {
    pub n_samples: usize,
    pub quantile: Estimate,
    pub tail_moment: Estimate,
    pub shortfall: Estimate,
    /// Plug-in `n * E[X_i Z^(n-1) | tail]`.
    pub tail_gradient: Vec<Estimate>,
}

/// Order-statistic estimators on the rows listed in `idx`: quantile, tail
/// moment, shortfall moment, then the tail-moment gradient.
fn mc_statistics(x: &[f64], d: usize, z: &[f64], idx: &[usize], spec: &RiskSpec) -> Result<Vec<f64>> {
    let n = idx.len();
    let mut zs: Vec<f64> = idx.iter().map(|&k| z[k]).collect();
    let k = ((spec.alpha() * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let (_, q, _) = zs.select_nth_unstable_by(k - 1, f64::total_cmp);
    let q = *q;
    let in_tail = |v: f64| match spec.tail() {
        Tail::Lower => v <= q,
        Tail::Upper => v >= q,
    };
    let np = spec.n() as i32;
    let mut count = 0usize;
    let mut t = 0.0;
    let mut s = 0.0;
    let mut g = vec![0.0; d];
    for &r in idx {
        let v = z[r];
        if !in_tail(v) {
            continue;
        }
        count += 1;
        t += v.powi(np);
        s += (v - q).abs().powf(spec.delta());
        let zp = v.powi(np - 1);
        for (acc, xi) in g.iter_mut().zip(&x[r * d..(r + 1) * d]) {
            *acc += xi * zp;
        }
    }
    if count == 0 {
        return Err(RiskError::EmptyTail { threshold: q });
    }
    let c = count as f64;
    let mut out = vec![q, t / c, s / c];
    out.extend(g.iter().map(|v| spec.n() as f64 * v / c));
    Ok(out)
}

/// Samples `n` scenarios from `model` by its Cholesky factor and reports
/// empirical functionals with bootstrap standard errors.
pub fn mc_reference(
    model: &GaussianModel,
    u: &[f64],
    spec: &RiskSpec,
    n: usize,
    seed: u64,
    resamples: usize,
) -> Result<McReference> {
    if n < 1000 {
        return Err(RiskError::InvalidInput("Monte Carlo reference needs at least 1000 samples".into()));
    }
    let d = model.dim();
    if u.len() != d {
        return Err(RiskError::DimensionMismatch { expected: d, found: u.len() });
    }
    let chol = model.sigma().clone().cholesky().ok_or(RiskError::NotPositiveDefinite)?;
    let lower = chol.l();
    let mu = DVector::from_column_slice(model.mu());
    let chunks: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let rows = CHUNK.min(n - c * CHUNK);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let mut out = Vec::with_capacity(rows * d);
            for _ in 0..rows {
                let e = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
                out.extend((&mu + &lower * e).iter());
            }
            out
        })
        .collect();
    let x = chunks.concat();
    let z: Vec<f64> = x.chunks_exact(d).map(|r| r.iter().zip(u).map(|(a, b)| a * b).sum()).collect();

    let all: Vec<usize> = (0..n).collect();
    let point = mc_statistics(&x, d, &z, &all, spec)?;
    // resampling streams start past the sampling streams
    let se = bootstrap_se(n, resamples, seed ^ 0xB007_5743_D1CE_0001, |idx| mc_statistics(&x, d, &z, idx, spec))?;
    let est = |j: usize| Estimate { value: point[j], se: se[j] };
    Ok(McReference {
        n_samples: n,
        quantile: est(0),
        tail_moment: est(1),
        shortfall: est(2),
        tail_gradient: (0..d).map(|i| est(3 + i)).collect(),
    })
}
