//! Seeded property checks for the tail-mean risk measure
//! `rho(X) = -E[X | X <= Q_alpha(X)]` on empirical laws.
//!
//! Cases keep `alpha * N` integral and all sample values distinct, so every
//! generated law puts mass exactly `alpha` at or below its quantile. Under
//! that restriction the four coherence axioms are pathwise inequalities on
//! order statistics and are checked with a small rounding slack only.
//! [`tie_counterexample`] shows what goes wrong once the restriction is
//! dropped.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RiskError};

const GRID_TOL: f64 = 1e-9;
const MAX_REDRAWS: usize = 64;

fn tail_count(n: usize, alpha: f64) -> Result<usize> {
    let k = (alpha * n as f64).round();
    if !(alpha > 0.0 && alpha < 1.0) || (alpha * n as f64 - k).abs() > GRID_TOL || k < 1.0 {
        return Err(RiskError::AlphaOffGrid { alpha, n });
    }
    Ok(k as usize)
}

fn sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn has_duplicates(sorted: &[f64]) -> bool {
    sorted.windows(2).any(|w| w[0] == w[1])
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Negative mean of the `alpha * N` smallest values.
pub fn rho(x: &[f64], alpha: f64) -> Result<f64> {
    let k = tail_count(x.len(), alpha)?;
    let v = sorted(x);
    if has_duplicates(&v) {
        return Err(RiskError::DuplicateValues);
    }
    Ok(-mean(&v[..k]))
}

/// `-E[X | X <= Q_alpha(X)]` for an arbitrary equally weighted sample: the
/// quantile is the left-continuous inverse and the conditioning event keeps
/// every atom at the quantile.
pub fn rho_relaxed(x: &[f64], alpha: f64) -> f64 {
    let v = sorted(x);
    let n = v.len() as f64;
    let k = ((alpha * n - GRID_TOL).ceil() as usize).clamp(1, v.len());
    let q = v[k - 1];
    let tail: Vec<f64> = v.iter().copied().filter(|&z| z <= q).collect();
    -mean(&tail)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    GaussianIid,
    Correlated,
    /// Two-component normal scale mixture.
    HeavyTailLike,
    Shifted,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl Generator {
    pub const ALL: [Generator; 4] =
        [Generator::GaussianIid, Generator::Correlated, Generator::HeavyTailLike, Generator::Shifted];

    /// Draws a joint sample `(X, Y)` of length `n`.
    fn draw_pair(self, n: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
        let sx = rng.random_range(0.5..3.0);
        let sy = rng.random_range(0.5..3.0);
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        match self {
            Generator::GaussianIid => {
                for _ in 0..n {
                    x.push(sx * normal(rng));
                    y.push(sy * normal(rng));
                }
            }
            Generator::Correlated | Generator::HeavyTailLike => {
                let r: f64 = rng.random_range(-0.95..0.95);
                let heavy = self == Generator::HeavyTailLike;
                for _ in 0..n {
                    let a: f64 = StandardNormal.sample(&mut *rng);
                    let b: f64 = StandardNormal.sample(&mut *rng);
                    let (mx, my) = if heavy {
                        let pick = |rng: &mut ChaCha8Rng| if rng.random_bool(0.1) { 5.0 } else { 1.0 };
                        (pick(rng), pick(rng))
                    } else {
                        (1.0, 1.0)
                    };
                    x.push(sx * mx * a);
                    y.push(sy * my * (r * a + (1.0 - r * r).sqrt() * b));
                }
            }
            Generator::Shifted => {
                let ax = rng.random_range(-10.0..10.0);
                let ay = rng.random_range(-10.0..10.0);
                for _ in 0..n {
                    x.push(ax + sx * normal(rng));
                    y.push(ay + sy * normal(rng));
                }
            }
        }
        (x, y)
    }
}

/// One seeded case of the suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceCase {
    pub n_samples: usize,
    pub alpha: f64,
    pub generator: Generator,
    pub seed: u64,
}

impl CoherenceCase {
    pub fn new(n_samples: usize, alpha: f64, generator: Generator, seed: u64) -> Result<Self> {
        tail_count(n_samples, alpha)?;
        Ok(Self { n_samples, alpha, generator, seed })
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// Draws `(X, Y)` and the derived vectors from `derive`, redrawing until
    /// every vector is free of ties.
    fn draw<F>(&self, rng: &mut ChaCha8Rng, derive: F) -> Result<Vec<Vec<f64>>>
    where
        F: Fn(&[f64], &[f64], &mut ChaCha8Rng) -> Vec<Vec<f64>>,
    {
        for _ in 0..MAX_REDRAWS {
            let (x, y) = self.generator.draw_pair(self.n_samples, rng);
            let vs = derive(&x, &y, rng);
            if vs.iter().all(|v| !has_duplicates(&sorted(v))) {
                return Ok(vs);
            }
        }
        Err(RiskError::DuplicateValues)
    }
}

/// Outcome of one check. `margin` is the slack of the inequality (or minus
/// the defect of the identity); the check holds when `margin >= -tolerance`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub holds: bool,
    pub margin: f64,
    pub tolerance: f64,
}

impl Verdict {
    fn new(margin: f64, slack: f64, magnitude: f64) -> Self {
        let tolerance = slack * (1.0 + magnitude);
        Self { holds: margin >= -tolerance, margin, tolerance }
    }
}

fn magnitude(values: &[f64]) -> f64 {
    values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// `X <= Y` pointwise with `Y = X + |noise|` implies `rho(X) >= rho(Y)`.
pub fn check_monotonicity(case: &CoherenceCase, slack: f64) -> Result<Verdict> {
    let mut rng = case.rng();
    let vs = case.draw(&mut rng, |x, _, rng| {
        let scale = rng.random_range(0.0..2.0);
        let y = x.iter().map(|v| v + scale * f64::abs(StandardNormal.sample(rng))).collect();
        vec![x.to_vec(), y]
    })?;
    let (rx, ry) = (rho(&vs[0], case.alpha)?, rho(&vs[1], case.alpha)?);
    Ok(Verdict::new(rx - ry, slack, magnitude(&[rx, ry])))
}

/// `rho(X + Y) <= rho(X) + rho(Y)`.
pub fn check_subadditivity(case: &CoherenceCase, slack: f64) -> Result<Verdict> {
    let mut rng = case.rng();
    let vs = case.draw(&mut rng, |x, y, _| {
        let s = x.iter().zip(y).map(|(a, b)| a + b).collect();
        vec![x.to_vec(), y.to_vec(), s]
    })?;
    let (rx, ry, rs) = (rho(&vs[0], case.alpha)?, rho(&vs[1], case.alpha)?, rho(&vs[2], case.alpha)?);
    Ok(Verdict::new(rx + ry - rs, slack, magnitude(&[rx, ry, rs])))
}

/// `rho(hX) = h rho(X)` for `h` drawn from `(0, 10]`.
pub fn check_homogeneity(case: &CoherenceCase, slack: f64) -> Result<Verdict> {
    let mut rng = case.rng();
    let h: f64 = 10.0 - rng.random_range(0.0..10.0);
    let vs = case.draw(&mut rng, |x, _, _| vec![x.to_vec(), x.iter().map(|v| h * v).collect()])?;
    let (rx, rh) = (rho(&vs[0], case.alpha)?, rho(&vs[1], case.alpha)?);
    Ok(Verdict::new(-(rh - h * rx).abs(), slack, magnitude(&[rh, h * rx])))
}

/// `rho(X + a) = rho(X) - a` for `a` drawn from `[-10, 10]`.
pub fn check_translation(case: &CoherenceCase, slack: f64) -> Result<Verdict> {
    let mut rng = case.rng();
    let a: f64 = rng.random_range(-10.0..=10.0);
    let vs = case.draw(&mut rng, |x, _, _| vec![x.to_vec(), x.iter().map(|v| v + a).collect()])?;
    let (rx, ra) = (rho(&vs[0], case.alpha)?, rho(&vs[1], case.alpha)?);
    Ok(Verdict::new(-(ra - (rx - a)).abs(), slack, magnitude(&[ra, rx, a])))
}

/// Any event of mass `m/N` has a conditional mean at least the mean of the
/// `k <= m` smallest values. The smallest such conditional mean is attained
/// by the `m` smallest values, so that is what is compared.
pub fn check_tail_mean_inequality(y: &[f64], k: usize, m: usize) -> Result<Verdict> {
    if !(1 <= k && k <= m && m <= y.len()) {
        return Err(RiskError::InvalidInput(format!("need 1 <= k <= m <= N, got k={k}, m={m}, N={}", y.len())));
    }
    let v = sorted(y);
    let lhs = mean(&v[..m]);
    let rhs = mean(&v[..k]);
    Ok(Verdict::new(lhs - rhs, 1e-12, magnitude(&[lhs, rhs])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalitySummary {
    pub checks: usize,
    pub violations: usize,
    pub worst_margin: f64,
}

impl InequalitySummary {
    fn empty() -> Self {
        Self { checks: 0, violations: 0, worst_margin: f64::INFINITY }
    }

    fn record(&mut self, v: Verdict) {
        self.checks += 1;
        if !v.holds {
            self.violations += 1;
        }
        self.worst_margin = self.worst_margin.min(v.margin);
    }

    fn merge(&mut self, o: &InequalitySummary) {
        self.checks += o.checks;
        self.violations += o.violations;
        self.worst_margin = self.worst_margin.min(o.worst_margin);
    }
}

/// Every threshold `k` and every event `F` with `|F| >= k`, by enumerating
/// all `2^N` subsets. Meant for small `N`.
pub fn exhaustive_tail_mean_check(y: &[f64]) -> Result<InequalitySummary> {
    let n = y.len();
    if n == 0 || n > 20 {
        return Err(RiskError::InvalidInput("exhaustive check needs 1 <= N <= 20".into()));
    }
    let v = sorted(y);
    if has_duplicates(&v) {
        return Err(RiskError::DuplicateValues);
    }
    let mut summary = InequalitySummary::empty();
    for k in 1..=n {
        let rhs = mean(&v[..k]);
        for mask in 1u32..(1u32 << n) {
            let size = mask.count_ones() as usize;
            if size < k {
                continue;
            }
            let sum: f64 = (0..n).filter(|j| mask & (1 << j) != 0).map(|j| y[j]).sum();
            let lhs = sum / size as f64;
            summary.record(Verdict::new(lhs - rhs, 1e-12, magnitude(&[lhs, rhs])));
        }
        for m in k..=n {
            summary.record(check_tail_mean_inequality(y, k, m)?);
        }
    }
    Ok(summary)
}

/// Random events of mass at least `k/N` on random samples of size `n`.
pub fn random_tail_mean_checks(count: usize, n: usize, seed: u64) -> Result<InequalitySummary> {
    let summaries = (0..count)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let y: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let v = sorted(&y);
            let k = rng.random_range(1..=n);
            let m = rng.random_range(k..=n);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let lhs = mean(&idx[..m].iter().map(|&j| y[j]).collect::<Vec<_>>());
            let rhs = mean(&v[..k]);
            let mut s = InequalitySummary::empty();
            s.record(Verdict::new(lhs - rhs, 1e-12, magnitude(&[lhs, rhs])));
            s.record(check_tail_mean_inequality(&y, k, m)?);
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = InequalitySummary::empty();
    for s in &summaries {
        total.merge(s);
    }
    Ok(total)
}

/// A tied sample pair on which the relaxed tail mean is not subadditive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TieCounterexample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub alpha: f64,
    pub rho_x: f64,
    pub rho_y: f64,
    pub rho_sum: f64,
    /// `rho(X + Y) - rho(X) - rho(Y)`, positive for a violation.
    pub excess: f64,
    /// The strict measure refuses at least one of `X`, `Y`, `X + Y`.
    pub excluded_by_invariants: bool,
}

/// Brute-force search over small integer-valued samples for a subadditivity
/// violation of [`rho_relaxed`]. Deterministic: returns the first hit in
/// enumeration order.
pub fn tie_counterexample() -> Option<TieCounterexample> {
    const VALUES: [f64; 5] = [-2.0, -1.0, 0.0, 1.0, 2.0];
    for n in 2..=4usize {
        let vectors: Vec<Vec<f64>> = (0..VALUES.len().pow(n as u32))
            .map(|mut code| {
                (0..n)
                    .map(|_| {
                        let v = VALUES[code % VALUES.len()];
                        code /= VALUES.len();
                        v
                    })
                    .collect()
            })
            .collect();
        for j in 1..n {
            for denom in [n, 2 * n] {
                let alpha = j as f64 / denom as f64;
                if alpha >= 1.0 {
                    continue;
                }
                for x in &vectors {
                    for y in &vectors {
                        let s: Vec<f64> = x.iter().zip(y).map(|(a, b)| a + b).collect();
                        let (rx, ry, rs) = (rho_relaxed(x, alpha), rho_relaxed(y, alpha), rho_relaxed(&s, alpha));
                        if rs > rx + ry + 1e-12 {
                            let excluded = rho(x, alpha).is_err() || rho(y, alpha).is_err() || rho(&s, alpha).is_err();
                            return Some(TieCounterexample {
                                x: x.clone(),
                                y: y.clone(),
                                alpha,
                                rho_x: rx,
                                rho_y: ry,
                                rho_sum: rs,
                                excess: rs - rx - ry,
                                excluded_by_invariants: excluded,
                            });
                        }
                    }
                }
            }
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axiom {
    Monotonicity,
    Subadditivity,
    PositiveHomogeneity,
    TranslationInvariance,
}

impl Axiom {
    pub const ALL: [Axiom; 4] =
        [Axiom::Monotonicity, Axiom::Subadditivity, Axiom::PositiveHomogeneity, Axiom::TranslationInvariance];

    pub fn check(self, case: &CoherenceCase, slack: f64) -> Result<Verdict> {
        match self {
            Axiom::Monotonicity => check_monotonicity(case, slack),
            Axiom::Subadditivity => check_subadditivity(case, slack),
            Axiom::PositiveHomogeneity => check_homogeneity(case, slack),
            Axiom::TranslationInvariance => check_translation(case, slack),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub cases: usize,
    pub seed: u64,
    pub sizes: Vec<usize>,
    pub alphas: Vec<f64>,
    pub slack: f64,
    /// Sample size and count for the random large-N subset checks.
    pub inequality_random: usize,
    pub inequality_random_n: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            cases: 10_000,
            seed: 7,
            sizes: vec![20, 100, 500],
            alphas: vec![0.05, 0.1, 0.25],
            slack: 1e-12,
            inequality_random: 1000,
            inequality_random_n: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxiomSummary {
    pub axiom: Axiom,
    pub cases: usize,
    pub violations: usize,
    pub worst_margin: f64,
    /// Seeds of failing cases, at most 20.
    pub failing_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub config: SuiteConfig,
    pub axioms: Vec<AxiomSummary>,
    pub inequality_exhaustive: InequalitySummary,
    pub inequality_random: InequalitySummary,
    pub tie_demo: Option<TieCounterexample>,
    pub total_violations: usize,
}

fn case_seed(master: u64, axiom: usize, j: usize) -> u64 {
    // splitmix64 finaliser
    let mut z = master ^ ((axiom as u64) << 48) ^ (j as u64);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds the case list for one axiom, cycling through the admissible
/// `(N, alpha)` grid points and the generators.
pub fn suite_cases(cfg: &SuiteConfig, axiom_index: usize) -> Result<Vec<CoherenceCase>> {
    let grid: Vec<(usize, f64)> = cfg
        .sizes
        .iter()
        .flat_map(|&n| cfg.alphas.iter().map(move |&a| (n, a)))
        .filter(|&(n, a)| tail_count(n, a).is_ok())
        .collect();
    if grid.is_empty() {
        return Err(RiskError::InvalidInput("no (N, alpha) pair lies on the k/N grid".into()));
    }
    (0..cfg.cases)
        .map(|j| {
            let (n, a) = grid[j % grid.len()];
            let generator = Generator::ALL[(j / grid.len()) % Generator::ALL.len()];
            CoherenceCase::new(n, a, generator, case_seed(cfg.seed, axiom_index, j))
        })
        .collect()
}

pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteSummary> {
    let mut axioms = Vec::new();
    for (ai, axiom) in Axiom::ALL.iter().enumerate() {
        let cases = suite_cases(cfg, ai)?;
        let verdicts = cases
            .par_iter()
            .map(|c| axiom.check(c, cfg.slack))
            .collect::<Result<Vec<_>>>()?;
        let mut s = AxiomSummary {
            axiom: *axiom,
            cases: cases.len(),
            violations: 0,
            worst_margin: f64::INFINITY,
            failing_seeds: Vec::new(),
        };
        for (c, v) in cases.iter().zip(&verdicts) {
            s.worst_margin = s.worst_margin.min(v.margin);
            if !v.holds {
                s.violations += 1;
                if s.failing_seeds.len() < 20 {
                    s.failing_seeds.push(c.seed);
                }
            }
        }
        axioms.push(s);
    }

    let mut inequality_exhaustive = InequalitySummary::empty();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..8 {
        let y: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
        inequality_exhaustive.merge(&exhaustive_tail_mean_check(&y)?);
    }
    let inequality_random = random_tail_mean_checks(cfg.inequality_random, cfg.inequality_random_n, cfg.seed)?;

    let total_violations = axioms.iter().map(|a| a.violations).sum::<usize>()
        + inequality_exhaustive.violations
        + inequality_random.violations;
    Ok(SuiteSummary {
        config: cfg.clone(),
        axioms,
        inequality_exhaustive,
        inequality_random,
        tie_demo: tie_counterexample(),
        total_violations,
    })
}
