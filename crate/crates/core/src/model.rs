//! Domain types, portfolio aggregation and the empirical tail functionals.
//!
//! A [`ScenarioSet`] is an N x d matrix of joint outcomes with one probability
//! per row. For a weight vector `u` the portfolio outcome of row `k` is
//! `z_k = sum_i u_i * x_ki`; every empirical estimator in the crate works on
//! that one-dimensional sample.
//!
//! Quantiles follow the left-continuous inverse: the smallest observed value
//! whose cumulative mass reaches `alpha`. Tail sets use non-strict
//! inequalities, so an atom sitting at the quantile belongs to both tails.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RiskError};

/// Slack used when comparing accumulated probability mass against `alpha`
/// and when validating that row probabilities sum to one.
pub const MASS_TOL: f64 = 1e-12;

/// Joint outcomes of `(X_1, ..., X_d)` with row probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    assets: Vec<String>,
    outcomes: Vec<f64>,
    probs: Vec<f64>,
    n_rows: usize,
}

impl ScenarioSet {
    /// Builds a set with uniform row probabilities.
    pub fn new(assets: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let probs = vec![1.0 / n.max(1) as f64; n];
        Self::with_probabilities(assets, rows, probs)
    }

    pub fn with_probabilities(
        assets: Vec<String>,
        rows: Vec<Vec<f64>>,
        probs: Vec<f64>,
    ) -> Result<Self> {
        let d = assets.len();
        if d == 0 {
            return Err(RiskError::InvalidInput("scenario set needs at least one asset".into()));
        }
        if rows.is_empty() {
            return Err(RiskError::InvalidInput("scenario set needs at least one row".into()));
        }
        if probs.len() != rows.len() {
            return Err(RiskError::DimensionMismatch { expected: rows.len(), found: probs.len() });
        }
        let mut outcomes = Vec::with_capacity(rows.len() * d);
        for (k, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(RiskError::DimensionMismatch { expected: d, found: row.len() });
            }
            if let Some(i) = row.iter().position(|x| !x.is_finite()) {
                return Err(RiskError::NonFinite(format!("row {k}, column {}", assets[i])));
            }
            outcomes.extend_from_slice(row);
        }
        Self::from_flat(assets, outcomes, probs)
    }

    /// Builds a set from a row-major buffer of `N * d` outcomes.
    pub fn from_flat(assets: Vec<String>, outcomes: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        let d = assets.len();
        if d == 0 || probs.is_empty() {
            return Err(RiskError::InvalidInput("scenario set needs N >= 1 and d >= 1".into()));
        }
        let n_rows = probs.len();
        if outcomes.len() != n_rows * d {
            return Err(RiskError::DimensionMismatch { expected: n_rows * d, found: outcomes.len() });
        }
        if let Some(pos) = outcomes.iter().position(|x| !x.is_finite()) {
            return Err(RiskError::NonFinite(format!("row {}, column {}", pos / d, assets[pos % d])));
        }
        if let Some(k) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(RiskError::InvalidInput(format!("probability of row {k} is negative or non-finite")));
        }
        let total = compensated_sum(probs.iter().copied());
        if (total - 1.0).abs() > MASS_TOL {
            return Err(RiskError::InvalidInput(format!("row probabilities sum to {total}, not 1")));
        }
        Ok(Self { assets, outcomes, probs, n_rows })
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let d = self.n_assets();
        &self.outcomes[k * d..(k + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.outcomes.chunks_exact(self.n_assets())
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    /// True when every row carries exactly `1/N`.
    pub fn is_uniform(&self) -> bool {
        let w = 1.0 / self.n_rows as f64;
        self.probs.iter().all(|&p| p == w)
    }

    /// Copy of the set with rows picked by `indices` (repeats allowed) and
    /// uniform probabilities. Used for resampling.
    pub fn resample(&self, indices: &[usize]) -> Result<Self> {
        let d = self.n_assets();
        let mut outcomes = Vec::with_capacity(indices.len() * d);
        for &k in indices {
            outcomes.extend_from_slice(self.row(k));
        }
        let probs = vec![1.0 / indices.len() as f64; indices.len()];
        Self::from_flat(self.assets.clone(), outcomes, probs)
    }
}

/// Portfolio weights `u`; at least one component is nonzero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(u: Vec<f64>) -> Result<Self> {
        if u.is_empty() {
            return Err(RiskError::InvalidInput("weight vector is empty".into()));
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(RiskError::NonFinite("weight vector".into()));
        }
        if u.iter().all(|&x| x == 0.0) {
            return Err(RiskError::InvalidInput("weight vector must have a nonzero component".into()));
        }
        Ok(Self(u))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(RiskError::DimensionMismatch { expected: d, found: self.dim() });
        }
        Ok(())
    }

    pub fn dot(&self, v: &[f64]) -> f64 {
        self.0.iter().zip(v).map(|(a, b)| a * b).sum()
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = RiskError;
    fn try_from(u: Vec<f64>) -> Result<Self> {
        Self::new(u)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(u: WeightVector) -> Self {
        u.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tail {
    Lower,
    Upper,
}

/// Confidence level, shortfall exponent, tail-moment order and tail side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskSpec {
    alpha: f64,
    delta: f64,
    n: u32,
    tail: Tail,
}

impl RiskSpec {
    pub fn new(alpha: f64, delta: f64, n: u32, tail: Tail) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(RiskError::InvalidInput(format!("alpha must lie in (0,1), got {alpha}")));
        }
        if !(delta >= 1.0) || !delta.is_finite() {
            return Err(RiskError::InvalidInput(format!("delta must be >= 1, got {delta}")));
        }
        if n < 1 {
            return Err(RiskError::InvalidInput("tail-moment order must be >= 1".into()));
        }
        Ok(Self { alpha, delta, n, tail })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn n(&self) -> u32 {
        self.n
    }
    pub fn tail(&self) -> Tail {
        self.tail
    }

    pub fn with_tail(self, tail: Tail) -> Self {
        Self { tail, ..self }
    }
}

/// Sample of `Z(u)`, indexed like the rows it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioSample {
    values: Vec<f64>,
    probs: Vec<f64>,
    /// Row indices sorted by `(value, index)`.
    order: Vec<usize>,
}

impl PortfolioSample {
    pub fn new(values: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.len() != probs.len() {
            return Err(RiskError::DimensionMismatch { expected: probs.len(), found: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RiskError::NonFinite("portfolio outcomes".into()));
        }
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        Ok(Self { values, probs, order })
    }

    /// Sample with uniform probabilities.
    pub fn uniform(values: Vec<f64>) -> Result<Self> {
        let n = values.len().max(1);
        Self::new(values, vec![1.0 / n as f64; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Row indices in ascending order of outcome.
    pub fn sorted_indices(&self) -> &[usize] {
        &self.order
    }
}

/// `z_k = sum_i u_i * x_ki`, summed left to right over `i`.
pub fn portfolio_outcomes(s: &ScenarioSet, u: &WeightVector) -> Result<PortfolioSample> {
    u.check_dim(s.n_assets())?;
    let w = u.as_slice();
    let values = s
        .rows()
        .map(|row| row.iter().zip(w).fold(0.0, |acc, (x, ui)| acc + ui * x))
        .collect();
    PortfolioSample::new(values, s.probabilities().to_vec())
}

/// `P[Z <= z]` under the sample's row probabilities.
pub fn empirical_cdf(p: &PortfolioSample, z: f64) -> f64 {
    compensated_sum(p.values.iter().zip(&p.probs).filter(|(v, _)| **v <= z).map(|(_, w)| *w))
}

/// Compensated running sum; its error stays near one ulp of the total
/// regardless of the number of terms.
#[derive(Debug, Default, Clone, Copy)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

fn compensated_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let mut acc = Neumaier::default();
    xs.for_each(|x| acc.add(x));
    acc.total()
}

/// Smallest observed value whose cumulative mass reaches `alpha`.
///
/// Mass is accumulated in sorted order and compared against `alpha - MASS_TOL`
/// so that `alpha = k/N` selects the k-th order statistic despite rounding in
/// the running sum.
pub fn empirical_quantile(p: &PortfolioSample, alpha: f64) -> f64 {
    let mut cum = Neumaier::default();
    let (mut i, n) = (0, p.order.len());
    while i < n {
        let v = p.values[p.order[i]];
        // absorb the whole atom before testing
        while i < n && p.values[p.order[i]] == v {
            cum.add(p.probs[p.order[i]]);
            i += 1;
        }
        if cum.total() >= alpha - MASS_TOL {
            return v;
        }
    }
    p.values[p.order[n - 1]]
}

/// Rows in the lower (`z <= q`) or upper (`z >= q`) tail, ascending by row.
pub fn tail_indices(p: &PortfolioSample, q: f64, tail: Tail) -> Vec<usize> {
    p.values
        .iter()
        .enumerate()
        .filter(|(_, &z)| match tail {
            Tail::Lower => z <= q,
            Tail::Upper => z >= q,
        })
        .map(|(k, _)| k)
        .collect()
}

/// Probability-weighted mean of `f(k)` over the tail rows.
pub(crate) fn tail_mean<F>(p: &PortfolioSample, rows: &[usize], q: f64, mut f: F) -> Result<f64>
where
    F: FnMut(usize) -> f64,
{
    let Some(&first) = rows.first() else {
        return Err(RiskError::EmptyTail { threshold: q });
    };
    let w0 = p.probs[first];
    if rows.iter().all(|&k| p.probs[k] == w0) {
        // equal weights: a plain average avoids rounding through the weights
        if w0 <= 0.0 {
            return Err(RiskError::EmptyTail { threshold: q });
        }
        let acc: f64 = rows.iter().map(|&k| f(k)).sum();
        return Ok(acc / rows.len() as f64);
    }
    let mut mass = 0.0;
    let mut acc = 0.0;
    for &k in rows {
        let w = p.probs[k];
        mass += w;
        acc += w * f(k);
    }
    if mass <= 0.0 {
        return Err(RiskError::EmptyTail { threshold: q });
    }
    Ok(acc / mass)
}

/// Pair of lower-tail and upper-tail values of one functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailPair {
    pub lower: f64,
    pub upper: f64,
}

impl TailPair {
    pub fn get(&self, tail: Tail) -> f64 {
        match tail {
            Tail::Lower => self.lower,
            Tail::Upper => self.upper,
        }
    }
}

/// Conditional n-th moments `E[Z^n | Z <= q]` and `E[Z^n | Z >= q]` at the
/// empirical quantile.
pub fn empirical_tail_moment(s: &ScenarioSet, u: &WeightVector, spec: &RiskSpec) -> Result<TailPair> {
    let p = portfolio_outcomes(s, u)?;
    let q = empirical_quantile(&p, spec.alpha());
    let n = spec.n() as i32;
    let z = p.values();
    let lower = tail_mean(&p, &tail_indices(&p, q, Tail::Lower), q, |k| z[k].powi(n))?;
    let upper = tail_mean(&p, &tail_indices(&p, q, Tail::Upper), q, |k| z[k].powi(n))?;
    Ok(TailPair { lower, upper })
}

/// Conditional moments `E[|Z - q|^delta | tail]` at the empirical quantile.
pub fn empirical_shortfall_moment(
    s: &ScenarioSet,
    u: &WeightVector,
    spec: &RiskSpec,
) -> Result<TailPair> {
    let p = portfolio_outcomes(s, u)?;
    let q = empirical_quantile(&p, spec.alpha());
    let delta = spec.delta();
    let z = p.values();
    let lower = tail_mean(&p, &tail_indices(&p, q, Tail::Lower), q, |k| (z[k] - q).abs().powf(delta))?;
    let upper = tail_mean(&p, &tail_indices(&p, q, Tail::Upper), q, |k| (z[k] - q).abs().powf(delta))?;
    Ok(TailPair { lower, upper })
}

/// Plug-in weight gradient of the tail moment on `spec.tail()`:
/// component `i` is `n * E[X_i Z^(n-1) | tail]`.
pub fn empirical_tail_gradient(
    s: &ScenarioSet,
    u: &WeightVector,
    spec: &RiskSpec,
) -> Result<Vec<f64>> {
    let p = portfolio_outcomes(s, u)?;
    let q = empirical_quantile(&p, spec.alpha());
    let rows = tail_indices(&p, q, spec.tail());
    tail_gradient_on(s, &p, &rows, q, spec.n())
}

pub(crate) fn tail_gradient_on(
    s: &ScenarioSet,
    p: &PortfolioSample,
    rows: &[usize],
    q: f64,
    n: u32,
) -> Result<Vec<f64>> {
    let z = p.values();
    let pow = n as i32 - 1;
    (0..s.n_assets())
        .map(|i| {
            tail_mean(p, rows, q, |k| s.row(k)[i] * z[k].powi(pow)).map(|m| n as f64 * m)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Empirical,
    Kernel,
    Gaussian,
}

/// Estimator diagnostics attached to a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Kernel bandwidth, when a kernel was used.
    pub bandwidth: Option<f64>,
    /// Number of scenarios in the selected tail.
    pub tail_count: Option<usize>,
    pub n_scenarios: Option<usize>,
    /// `P[Z <= q] - alpha` under the empirical law (zero for the Gaussian backend).
    pub cdf_excess: f64,
    /// More than one scenario sits exactly at the quantile.
    pub tie_at_quantile: bool,
    /// False when a soft guard tripped.
    pub reliable: bool,
}

/// Functionals, weight gradients and diagnostics for one query.
///
/// `grad_t` and `grad_s` refer to the tail selected in the query's
/// [`RiskSpec`]; values for both tails are always reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub method: Method,
    pub spec: RiskSpec,
    pub q_alpha: f64,
    pub t_lower: f64,
    pub t_upper: f64,
    pub s_lower: f64,
    pub s_upper: f64,
    pub grad_q: Vec<f64>,
    pub grad_t: Vec<f64>,
    pub grad_s: Vec<f64>,
    pub density_at_q: f64,
    pub diagnostics: Diagnostics,
}

impl RiskReport {
    /// Tail moment on the query's tail.
    pub fn t_selected(&self) -> f64 {
        match self.spec.tail() {
            Tail::Lower => self.t_lower,
            Tail::Upper => self.t_upper,
        }
    }

    /// Shortfall moment on the query's tail.
    pub fn s_selected(&self) -> f64 {
        match self.spec.tail() {
            Tail::Lower => self.s_lower,
            Tail::Upper => self.s_upper,
        }
    }

    /// Checks that every number is finite.
    pub fn ensure_finite(&self) -> Result<()> {
        let scalars = [
            ("q_alpha", self.q_alpha),
            ("t_lower", self.t_lower),
            ("t_upper", self.t_upper),
            ("s_lower", self.s_lower),
            ("s_upper", self.s_upper),
            ("density_at_q", self.density_at_q),
            ("cdf_excess", self.diagnostics.cdf_excess),
        ];
        for (name, v) in scalars {
            if !v.is_finite() {
                return Err(RiskError::NonFinite(name.into()));
            }
        }
        for (name, g) in [("grad_q", &self.grad_q), ("grad_t", &self.grad_t), ("grad_s", &self.grad_s)] {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(RiskError::NonFinite(name.into()));
            }
        }
        if let Some(h) = self.diagnostics.bandwidth {
            if !h.is_finite() {
                return Err(RiskError::NonFinite("bandwidth".into()));
            }
        }
        Ok(())
    }
}
