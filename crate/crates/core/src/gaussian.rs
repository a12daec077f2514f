//! Closed-form backend for jointly normal outcomes.
//!
//! With `X ~ N(mu, Sigma)` the portfolio outcome `Z(u)` is normal with mean
//! `m_u = mu'u` and standard deviation `s_u = sqrt(u' Sigma u)`, and the
//! conditional law of `X_i` given `Z(u)` is linear:
//! `E[X_i | Z = t] = mu_i + (Sigma u)_i (t - m_u) / s_u^2`.
//! Every functional below reduces to moments of a truncated standard normal.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Result, RiskError};
use crate::model::{RiskSpec, ScenarioSet, Tail, TailPair, WeightVector};
use crate::quadrature;
use crate::special::{norm_inv_cdf, norm_pdf};

const SYMMETRY_TOL: f64 = 1e-12;
const SAMPLE_CHUNK: usize = 4096;
const QUAD_TOL: f64 = 1e-13;
/// Standardised distance beyond which the normal density is treated as zero.
const TAIL_CUTOFF: f64 = 40.0;

/// Mean vector and full-rank covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    chol_lower: DMatrix<f64>,
}

impl GaussianModel {
    pub fn new(mu: Vec<f64>, sigma: Vec<Vec<f64>>) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(RiskError::InvalidInput("model needs at least one asset".into()));
        }
        if sigma.len() != d {
            return Err(RiskError::DimensionMismatch { expected: d, found: sigma.len() });
        }
        if let Some(row) = sigma.iter().find(|r| r.len() != d) {
            return Err(RiskError::DimensionMismatch { expected: d, found: row.len() });
        }
        if mu.iter().chain(sigma.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(RiskError::NonFinite("gaussian parameters".into()));
        }
        let sigma = DMatrix::from_fn(d, d, |i, j| sigma[i][j]);
        for i in 0..d {
            for j in 0..i {
                let scale = sigma[(i, j)].abs().max(sigma[(j, i)].abs()).max(1.0);
                if (sigma[(i, j)] - sigma[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(RiskError::InvalidInput(format!(
                        "covariance is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let chol = sigma.clone().cholesky().ok_or(RiskError::NotPositiveDefinite)?;
        Ok(Self { mu: DVector::from_vec(mu), chol_lower: chol.l(), sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        self.mu.as_slice()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Same covariance, mean replaced by `-mu`.
    pub fn negated(&self) -> Self {
        Self { mu: -&self.mu, ..self.clone() }
    }

    /// Draws `n` scenarios; rows are generated in fixed-size chunks, each from
    /// its own stream of `seed`, so the output does not depend on the number
    /// of worker threads.
    pub fn sample(&self, n: usize, seed: u64) -> Result<ScenarioSet> {
        if n == 0 {
            return Err(RiskError::InvalidInput("sample size must be positive".into()));
        }
        let d = self.dim();
        let n_chunks = n.div_ceil(SAMPLE_CHUNK);
        let chunks: Vec<Vec<f64>> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let rows = SAMPLE_CHUNK.min(n - c * SAMPLE_CHUNK);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(c as u64);
                let mut out = Vec::with_capacity(rows * d);
                let mut e = DVector::zeros(d);
                for _ in 0..rows {
                    for v in e.iter_mut() {
                        *v = StandardNormal.sample(&mut rng);
                    }
                    let x = &self.mu + &self.chol_lower * &e;
                    out.extend(x.iter());
                }
                out
            })
            .collect();
        let assets = (1..=d).map(|i| format!("x{i}")).collect();
        ScenarioSet::from_flat(assets, chunks.concat(), vec![1.0 / n as f64; n])
    }
}

/// Moments of `Z(u)` plus `Sigma u`, which every gradient needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioLaw {
    pub mean: f64,
    pub stdev: f64,
    pub sigma_u: Vec<f64>,
}

impl PortfolioLaw {
    /// `(Sigma u)_i / s_u`, the sensitivity of `s_u` to `u_i`.
    fn loading(&self, i: usize) -> f64 {
        self.sigma_u[i] / self.stdev
    }
}

pub fn gaussian_portfolio_law(m: &GaussianModel, u: &WeightVector) -> Result<PortfolioLaw> {
    u.check_dim(m.dim())?;
    let uv = DVector::from_column_slice(u.as_slice());
    let sigma_u = &m.sigma * &uv;
    let var = uv.dot(&sigma_u);
    if !(var > 0.0) {
        return Err(RiskError::NotPositiveDefinite);
    }
    Ok(PortfolioLaw { mean: m.mu.dot(&uv), stdev: var.sqrt(), sigma_u: sigma_u.as_slice().to_vec() })
}

/// `Q_alpha(u) = m_u + z_alpha * s_u`.
pub fn gaussian_quantile(m: &GaussianModel, u: &WeightVector, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let law = gaussian_portfolio_law(m, u)?;
    Ok(law.mean + norm_inv_cdf(alpha) * law.stdev)
}

/// Density of `Z(u)` at its alpha-quantile.
pub fn gaussian_density_at_quantile(m: &GaussianModel, u: &WeightVector, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let law = gaussian_portfolio_law(m, u)?;
    Ok(norm_pdf(norm_inv_cdf(alpha)) / law.stdev)
}

/// `E[X | Z(u) = q]` for every component.
pub fn gaussian_conditional_expectation(m: &GaussianModel, u: &WeightVector, q: f64) -> Result<Vec<f64>> {
    let law = gaussian_portfolio_law(m, u)?;
    let r = (q - law.mean) / (law.stdev * law.stdev);
    Ok(m.mu.iter().zip(&law.sigma_u).map(|(mu, su)| mu + su * r).collect())
}

/// Weight gradient of the quantile: the conditional expectation of `X` given
/// that the portfolio sits at its quantile.
pub fn gaussian_quantile_gradient(m: &GaussianModel, u: &WeightVector, alpha: f64) -> Result<Vec<f64>> {
    let q = gaussian_quantile(m, u, alpha)?;
    gaussian_conditional_expectation(m, u, q)
}

/// Truncated standard normal moments `E[W^k | tail]`, `k = 0..=order`, for
/// the tail `W <= z` (mass `alpha`) or `W >= z` (mass `1 - alpha`).
fn truncated_moments(z: f64, alpha: f64, tail: Tail, order: usize) -> Vec<f64> {
    let (mass, sign) = match tail {
        Tail::Lower => (alpha, -1.0),
        Tail::Upper => (1.0 - alpha, 1.0),
    };
    let edge = sign * norm_pdf(z) / mass;
    let mut m = Vec::with_capacity(order + 1);
    m.push(1.0);
    if order >= 1 {
        m.push(edge);
    }
    for k in 2..=order {
        let next = (k as f64 - 1.0) * m[k - 2] + z.powi(k as i32 - 1) * edge;
        m.push(next);
    }
    m
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

/// Conditional moments `E[Z^n | Z <= Q]` and `E[Z^n | Z >= Q]`.
pub fn gaussian_tail_moment(m: &GaussianModel, u: &WeightVector, alpha: f64, n: u32) -> Result<TailPair> {
    check_alpha(alpha)?;
    let law = gaussian_portfolio_law(m, u)?;
    let z = norm_inv_cdf(alpha);
    let n = n as usize;
    let value = |tail| {
        let mk = truncated_moments(z, alpha, tail, n);
        (0..=n)
            .map(|k| binomial(n, k) * law.mean.powi((n - k) as i32) * law.stdev.powi(k as i32) * mk[k])
            .sum::<f64>()
    };
    Ok(TailPair { lower: value(Tail::Lower), upper: value(Tail::Upper) })
}

/// Component `i` is `n * E[X_i Z^(n-1) | tail]`, with `X_i` replaced by its
/// conditional expectation given `Z`.
pub fn gaussian_tail_moment_gradient(
    m: &GaussianModel,
    u: &WeightVector,
    alpha: f64,
    n: u32,
    tail: Tail,
) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    let law = gaussian_portfolio_law(m, u)?;
    let z = norm_inv_cdf(alpha);
    let n = n as usize;
    let mk = truncated_moments(z, alpha, tail, n);
    // E[W^j (m + sW)^(n-1) | tail] for j = 0, 1
    let mixed = |j: usize| {
        (0..n)
            .map(|k| {
                binomial(n - 1, k)
                    * law.mean.powi((n - 1 - k) as i32)
                    * law.stdev.powi(k as i32)
                    * mk[k + j]
            })
            .sum::<f64>()
    };
    let (e0, e1) = (mixed(0), mixed(1));
    Ok((0..m.dim())
        .map(|i| n as f64 * (m.mu[i] * e0 + law.loading(i) * e1))
        .collect())
}

/// `E[Z | tail]`; lower tail: `m_u - s_u phi(z_alpha) / alpha`.
pub fn gaussian_tail_mean(m: &GaussianModel, u: &WeightVector, alpha: f64, tail: Tail) -> Result<f64> {
    Ok(gaussian_tail_moment(m, u, alpha, 1)?.get(tail))
}

pub fn gaussian_tail_mean_gradient(
    m: &GaussianModel,
    u: &WeightVector,
    alpha: f64,
    tail: Tail,
) -> Result<Vec<f64>> {
    gaussian_tail_moment_gradient(m, u, alpha, 1, tail)
}

/// `E[|W - z|^(delta-1)]`, `E[W |W - z|^(delta-1)]` and `E[|W - z|^delta]`
/// over one tail of a standard normal, conditional on the tail.
#[derive(Debug, Clone, Copy)]
struct ShortfallIntegrals {
    a: f64,
    b: f64,
    j: f64,
}

fn shortfall_integrals(z: f64, alpha: f64, delta: f64, tail: Tail) -> Result<ShortfallIntegrals> {
    if delta == 1.0 {
        let m1 = truncated_moments(z, alpha, tail, 1)[1];
        let j = match tail {
            Tail::Lower => z - m1,
            Tail::Upper => m1 - z,
        };
        return Ok(ShortfallIntegrals { a: 1.0, b: m1, j });
    }
    // integrate over the distance t = |W - z| >= 0
    let (mass, w_of, len) = match tail {
        Tail::Lower => (alpha, -1.0, z + TAIL_CUTOFF),
        Tail::Upper => (1.0 - alpha, 1.0, TAIL_CUTOFF - z),
    };
    let w = |t: f64| z + w_of * t;
    let integral = |g: &dyn Fn(f64) -> f64| {
        quadrature::integrate(|t| g(t) * norm_pdf(w(t)), 0.0, len, QUAD_TOL * mass, QUAD_TOL)
            .map(|v| v / mass)
    };
    let a = integral(&|t| t.powf(delta - 1.0))?;
    let b = integral(&|t| w(t) * t.powf(delta - 1.0))?;
    let j = integral(&|t| t.powf(delta))?;
    Ok(ShortfallIntegrals { a, b, j })
}

/// `E[|Z - Q|^delta | Z <= Q]` and `E[|Z - Q|^delta | Z >= Q]`.
///
/// Closed form for `delta = 1`; adaptive quadrature on the truncated normal
/// otherwise.
pub fn gaussian_shortfall(m: &GaussianModel, u: &WeightVector, spec: &RiskSpec) -> Result<TailPair> {
    let law = gaussian_portfolio_law(m, u)?;
    let z = norm_inv_cdf(spec.alpha());
    let scale = law.stdev.powf(spec.delta());
    let lower = shortfall_integrals(z, spec.alpha(), spec.delta(), Tail::Lower)?.j * scale;
    let upper = shortfall_integrals(z, spec.alpha(), spec.delta(), Tail::Upper)?.j * scale;
    Ok(TailPair { lower, upper })
}

/// Lower tail: `delta * E[(dQ/du_i - X_i) |Z - Q|^(delta-1) | Z <= Q]`; the
/// upper tail flips the sign of the difference.
pub fn gaussian_shortfall_gradient(m: &GaussianModel, u: &WeightVector, spec: &RiskSpec) -> Result<Vec<f64>> {
    let law = gaussian_portfolio_law(m, u)?;
    let z = norm_inv_cdf(spec.alpha());
    let delta = spec.delta();
    let grad_q = gaussian_quantile_gradient(m, u, spec.alpha())?;
    let ints = shortfall_integrals(z, spec.alpha(), delta, spec.tail())?;
    let scale = delta * law.stdev.powf(delta - 1.0);
    // E[X_i | Z] = mu_i + loading_i * W
    Ok((0..m.dim())
        .map(|i| {
            let diff = (grad_q[i] - m.mu[i]) * ints.a - law.loading(i) * ints.b;
            match spec.tail() {
                Tail::Lower => scale * diff,
                Tail::Upper => -scale * diff,
            }
        })
        .collect())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(RiskError::InvalidInput(format!("alpha must lie in (0,1), got {alpha}")))
    }
}
