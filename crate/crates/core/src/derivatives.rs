//! Query dispatch and report assembly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RiskError};
use crate::gaussian::{self, GaussianModel};
use crate::kernel::{self, KernelConfig};
use crate::model::{
    empirical_cdf, empirical_quantile, portfolio_outcomes, tail_gradient_on, tail_indices, tail_mean,
    Diagnostics, Method, RiskReport, RiskSpec, ScenarioSet, Tail, WeightVector,
};

#[derive(Debug, Clone, PartialEq)]
pub enum QueryInput {
    Scenarios(ScenarioSet),
    Gaussian(GaussianModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub input: QueryInput,
    pub u: WeightVector,
    pub spec: RiskSpec,
    pub method: Method,
    pub kernel: KernelConfig,
}

impl Query {
    pub fn validate(&self) -> Result<()> {
        match (&self.input, self.method) {
            (QueryInput::Gaussian(m), Method::Gaussian) => self.u.check_dim(m.dim()),
            (QueryInput::Scenarios(s), Method::Empirical | Method::Kernel) => {
                self.kernel.validate()?;
                self.u.check_dim(s.n_assets())
            }
            (QueryInput::Gaussian(_), _) => {
                Err(RiskError::MethodMismatch("empirical and kernel methods need scenarios".into()))
            }
            (QueryInput::Scenarios(_), Method::Gaussian) => {
                Err(RiskError::MethodMismatch("gaussian method needs a gaussian model".into()))
            }
        }
    }
}

/// Runs the selected backend and assembles a report. Success reports contain
/// only finite numbers.
pub fn evaluate(q: &Query) -> Result<RiskReport> {
    q.validate()?;
    let report = match &q.input {
        QueryInput::Gaussian(m) => evaluate_gaussian(m, &q.u, &q.spec)?,
        QueryInput::Scenarios(s) => evaluate_scenarios(s, &q.u, &q.spec, q.method, &q.kernel)?,
    };
    report.ensure_finite()?;
    Ok(report)
}

/// Evaluates independent queries in parallel; output order follows input order.
pub fn evaluate_batch(queries: &[Query]) -> Vec<Result<RiskReport>> {
    queries.par_iter().map(evaluate).collect()
}

fn evaluate_gaussian(m: &GaussianModel, u: &WeightVector, spec: &RiskSpec) -> Result<RiskReport> {
    let alpha = spec.alpha();
    let t = gaussian::gaussian_tail_moment(m, u, alpha, spec.n())?;
    let s = gaussian::gaussian_shortfall(m, u, spec)?;
    Ok(RiskReport {
        method: Method::Gaussian,
        spec: *spec,
        q_alpha: gaussian::gaussian_quantile(m, u, alpha)?,
        t_lower: t.lower,
        t_upper: t.upper,
        s_lower: s.lower,
        s_upper: s.upper,
        grad_q: gaussian::gaussian_quantile_gradient(m, u, alpha)?,
        grad_t: gaussian::gaussian_tail_moment_gradient(m, u, alpha, spec.n(), spec.tail())?,
        grad_s: gaussian::gaussian_shortfall_gradient(m, u, spec)?,
        density_at_q: gaussian::gaussian_density_at_quantile(m, u, alpha)?,
        diagnostics: Diagnostics {
            bandwidth: None,
            tail_count: None,
            n_scenarios: None,
            cdf_excess: 0.0,
            tie_at_quantile: false,
            reliable: true,
        },
    })
}

// Empirical and kernel reports share the empirical quantile and tail sets;
// the quantile and shortfall gradients need the kernel in both cases, since
// the raw empirical quantile is piecewise constant in u.
fn evaluate_scenarios(
    s: &ScenarioSet,
    u: &WeightVector,
    spec: &RiskSpec,
    method: Method,
    cfg: &KernelConfig,
) -> Result<RiskReport> {
    let p = portfolio_outcomes(s, u)?;
    let z = p.values();
    let q = empirical_quantile(&p, spec.alpha());
    let lower = tail_indices(&p, q, Tail::Lower);
    let upper = tail_indices(&p, q, Tail::Upper);
    let n = spec.n() as i32;
    let delta = spec.delta();

    let qg = kernel::quantile_gradient_on(s, &p, spec.alpha(), cfg)?;
    let selected = match spec.tail() {
        Tail::Lower => &lower,
        Tail::Upper => &upper,
    };
    let grad_t = tail_gradient_on(s, &p, selected, q, spec.n())?;
    let grad_s = kernel::shortfall_gradient_on(s, &p, spec, &qg)?;

    let ties = z.iter().filter(|&&v| v == q).count();
    let cdf_excess = empirical_cdf(&p, q) - spec.alpha();
    Ok(RiskReport {
        method,
        spec: *spec,
        q_alpha: q,
        t_lower: tail_mean(&p, &lower, q, |k| z[k].powi(n))?,
        t_upper: tail_mean(&p, &upper, q, |k| z[k].powi(n))?,
        s_lower: tail_mean(&p, &lower, q, |k| (z[k] - q).abs().powf(delta))?,
        s_upper: tail_mean(&p, &upper, q, |k| (z[k] - q).abs().powf(delta))?,
        grad_q: qg.gradient,
        grad_t,
        grad_s,
        density_at_q: qg.density,
        diagnostics: Diagnostics {
            bandwidth: Some(qg.bandwidth),
            tail_count: Some(selected.len()),
            n_scenarios: Some(s.n_rows()),
            cdf_excess,
            tie_at_quantile: ties > 1,
            reliable: ties <= 1,
        },
    })
}

/// Per-asset contributions `u_i * df/du_i` and the Euler residuals
/// `sum_i u_i df/du_i - degree * f`, where the degree of homogeneity is 1
/// for the quantile, `n` for the tail moment and `delta` for the shortfall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationSummary {
    pub contrib_q: Vec<f64>,
    pub contrib_t: Vec<f64>,
    pub contrib_s: Vec<f64>,
    pub residual_q: f64,
    pub residual_t: f64,
    pub residual_s: f64,
}

pub fn allocation_summary(report: &RiskReport, u: &WeightVector) -> Result<AllocationSummary> {
    let d = u.dim();
    for g in [&report.grad_q, &report.grad_t, &report.grad_s] {
        if g.len() != d {
            return Err(RiskError::DimensionMismatch { expected: d, found: g.len() });
        }
    }
    let contrib = |g: &[f64]| u.as_slice().iter().zip(g).map(|(a, b)| a * b).collect::<Vec<f64>>();
    let (cq, ct, cs) = (contrib(&report.grad_q), contrib(&report.grad_t), contrib(&report.grad_s));
    let sum = |c: &[f64]| c.iter().sum::<f64>();
    Ok(AllocationSummary {
        residual_q: sum(&cq) - report.q_alpha,
        residual_t: sum(&ct) - report.spec.n() as f64 * report.t_selected(),
        residual_s: sum(&cs) - report.spec.delta() * report.s_selected(),
        contrib_q: cq,
        contrib_t: ct,
        contrib_s: cs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_query(spec: RiskSpec) -> Query {
        Query {
            input: QueryInput::Gaussian(
                GaussianModel::new(vec![0., 0.], vec![vec![1., 0.], vec![0., 1.]]).unwrap(),
            ),
            u: WeightVector::new(vec![1., 1.]).unwrap(),
            spec,
            method: Method::Gaussian,
            kernel: KernelConfig::default(),
        }
    }

    #[test]
    fn gaussian_report() {
        let r = evaluate(&gaussian_query(RiskSpec::new(0.05, 1.0, 1, Tail::Lower).unwrap())).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-7;
        assert!(close(r.q_alpha, -2.3261743));
        assert!(close(r.t_lower, -2.9171164));
        assert!(close(r.s_lower, 0.5909421));
        for i in 0..2 {
            assert!(close(r.grad_q[i], -1.1630871));
            assert!(close(r.grad_t[i], -1.4585582));
            assert!(close(r.grad_s[i], 0.2954711));
        }
        assert!(r.diagnostics.reliable);
        let a = allocation_summary(&r, &WeightVector::new(vec![1., 1.]).unwrap()).unwrap();
        assert!(close(a.contrib_q[0], -1.1630871) && close(a.contrib_q[1], -1.1630871));
        assert!(a.residual_q.abs() <= 1e-10);
        assert!(a.residual_t.abs() <= 1e-10);
        assert!(a.residual_s.abs() <= 1e-10);
    }

    #[test]
    fn empirical_report_on_five_rows() {
        let s = ScenarioSet::new(
            vec!["a".into(), "b".into()],
            vec![vec![1., 1.], vec![2., 3.], vec![3., 2.], vec![4., 5.], vec![5., 4.]],
        )
        .unwrap();
        let q = Query {
            input: QueryInput::Scenarios(s),
            u: WeightVector::new(vec![2., 1.]).unwrap(),
            spec: RiskSpec::new(0.4, 1.0, 1, Tail::Lower).unwrap(),
            method: Method::Empirical,
            kernel: KernelConfig::default(),
        };
        let r = evaluate(&q).unwrap();
        assert_eq!(r.q_alpha, 7.0);
        assert_eq!(r.t_lower, 5.0);
        assert_eq!(r.s_lower, 2.0);
        assert_eq!(r.grad_t, vec![1.5, 2.0]);
        assert_eq!(r.diagnostics.tail_count, Some(2));
        assert!(r.diagnostics.cdf_excess.abs() < 1e-15);
        // residual is reported, not forced to zero
        let a = allocation_summary(&r, &q.u).unwrap();
        assert!(a.residual_q.is_finite());
    }

    #[test]
    fn single_asset_contribution_is_the_functional() {
        let m = GaussianModel::new(vec![0.1], vec![vec![0.64]]).unwrap();
        let q = Query {
            input: QueryInput::Gaussian(m),
            u: WeightVector::new(vec![1.]).unwrap(),
            spec: RiskSpec::new(0.1, 1.0, 1, Tail::Lower).unwrap(),
            method: Method::Gaussian,
            kernel: KernelConfig::default(),
        };
        let r = evaluate(&q).unwrap();
        let a = allocation_summary(&r, &q.u).unwrap();
        assert!((a.contrib_q[0] - r.q_alpha).abs() < 1e-15);
        assert!((a.contrib_t[0] - r.t_lower).abs() < 1e-15);
    }

    #[test]
    fn constant_scenarios_trip_the_guard() {
        let s = ScenarioSet::new(vec!["a".into(), "b".into()], vec![vec![1., 2.]; 50]).unwrap();
        let q = Query {
            input: QueryInput::Scenarios(s),
            u: WeightVector::new(vec![1., 1.]).unwrap(),
            spec: RiskSpec::new(0.1, 1.0, 1, Tail::Lower).unwrap(),
            method: Method::Kernel,
            kernel: KernelConfig::default(),
        };
        assert!(matches!(evaluate(&q), Err(RiskError::DensityTooLow { .. })));
    }

    #[test]
    fn method_input_mismatch() {
        let mut q = gaussian_query(RiskSpec::new(0.05, 1.0, 1, Tail::Lower).unwrap());
        q.method = Method::Kernel;
        assert!(matches!(evaluate(&q), Err(RiskError::MethodMismatch(_))));
        q.input = QueryInput::Scenarios(
            ScenarioSet::new(vec!["a".into(), "b".into()], vec![vec![1., 2.], vec![0., 1.]]).unwrap(),
        );
        q.method = Method::Gaussian;
        assert!(matches!(evaluate(&q), Err(RiskError::MethodMismatch(_))));
    }

    #[test]
    fn batch_preserves_order() {
        let specs: Vec<Query> = [0.01, 0.3, 0.7]
            .iter()
            .map(|&a| gaussian_query(RiskSpec::new(a, 1.0, 1, Tail::Lower).unwrap()))
            .collect();
        let out = evaluate_batch(&specs);
        for (q, r) in specs.iter().zip(out) {
            assert_eq!(r.unwrap(), evaluate(q).unwrap());
        }
    }
}
