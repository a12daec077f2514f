use proptest::prelude::*;

use riskgrad::cli::{parse_scenarios, write_scenarios};
use riskgrad::coherence::rho;
use riskgrad::gaussian::{
    gaussian_conditional_expectation, gaussian_quantile, gaussian_quantile_gradient, gaussian_shortfall,
    gaussian_shortfall_gradient, gaussian_tail_moment, gaussian_tail_moment_gradient,
};
use riskgrad::model::{
    empirical_quantile, empirical_tail_gradient, empirical_tail_moment, portfolio_outcomes, tail_indices,
};
use riskgrad::oracle::{fd_gradient, smoothed_quantile, FDConfig};
use riskgrad::{GaussianModel, KernelKind, PortfolioSample, RiskSpec, ScenarioSet, Tail, WeightVector};

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, -1.0..1.0f64, Just(0.0), -1e-300..1e-300f64]
}

fn sample(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0..100.0f64, 1..max)
}

fn scenario_set() -> impl Strategy<Value = ScenarioSet> {
    (1usize..4, 1usize..30)
        .prop_flat_map(|(d, n)| {
            (
                prop::collection::vec(prop::collection::vec(finite(), d), n),
                prop::collection::vec(0.01..1.0f64, n),
                any::<bool>(),
            )
        })
        .prop_map(|(rows, raw, weighted)| {
            let d = rows[0].len();
            let names = (0..d).map(|i| format!("x{i}")).collect();
            if weighted {
                let total: f64 = raw.iter().sum();
                let mut probs: Vec<f64> = raw.iter().map(|w| w / total).collect();
                // push the rounding residue onto the last row
                let head: f64 = probs[..probs.len() - 1].iter().sum();
                *probs.last_mut().unwrap() = 1.0 - head;
                ScenarioSet::with_probabilities(names, rows, probs).unwrap()
            } else {
                ScenarioSet::new(names, rows).unwrap()
            }
        })
}

/// Random positive definite model in dimension 2..=4.
fn model() -> impl Strategy<Value = (GaussianModel, Vec<f64>)> {
    (2usize..5)
        .prop_flat_map(|d| {
            (
                prop::collection::vec(-1.0..1.0f64, d),
                prop::collection::vec(-1.5..1.5f64, d * d),
                prop::collection::vec(-2.0..2.0f64, d),
            )
        })
        .prop_filter("nonzero weights", |(_, _, u)| u.iter().any(|v| v.abs() > 0.1))
        .prop_map(|(mu, a, u)| {
            let d = mu.len();
            let sigma: Vec<Vec<f64>> = (0..d)
                .map(|r| {
                    (0..d)
                        .map(|c| {
                            let (r, c) = (r.min(c), r.max(c));
                            (0..d).map(|k| a[r * d + k] * a[c * d + k]).sum::<f64>() + if r == c { 0.2 } else { 0.0 }
                        })
                        .collect()
                })
                .collect();
            (GaussianModel::new(mu, sigma).unwrap(), u)
        })
}

fn w(v: &[f64]) -> WeightVector {
    WeightVector::new(v.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn csv_round_trip(s in scenario_set()) {
        let text = write_scenarios(&s);
        let back = parse_scenarios(&text).unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn quantile_is_an_observed_value_and_monotone(z in sample(60), a in 0.001..0.999f64, b in 0.001..0.999f64) {
        let p = PortfolioSample::uniform(z.clone()).unwrap();
        let (lo, hi) = (a.min(b), a.max(b));
        let qa = empirical_quantile(&p, lo);
        prop_assert!(z.contains(&qa));
        prop_assert!(qa <= empirical_quantile(&p, hi));
    }

    #[test]
    fn quantile_scales_and_shifts(z in sample(60), alpha in 0.01..0.99f64, h in 0.01..50.0f64, c in -50.0..50.0f64) {
        let p = PortfolioSample::uniform(z.clone()).unwrap();
        let q = empirical_quantile(&p, alpha);
        let scaled = PortfolioSample::uniform(z.iter().map(|v| h * v).collect()).unwrap();
        prop_assert_eq!(empirical_quantile(&scaled, alpha), h * q);
        let shifted = PortfolioSample::uniform(z.iter().map(|v| v + c).collect()).unwrap();
        prop_assert_eq!(empirical_quantile(&shifted, alpha), q + c);
    }

    #[test]
    fn tails_bracket_the_quantile(s in scenario_set(), alpha in 0.01..0.99f64) {
        let u = w(&vec![1.0; s.n_assets()]);
        let spec = RiskSpec::new(alpha, 1.0, 1, Tail::Lower).unwrap();
        let p = portfolio_outcomes(&s, &u).unwrap();
        let q = empirical_quantile(&p, alpha);
        let t = empirical_tail_moment(&s, &u, &spec).unwrap();
        let tol = 1e-9 * (1.0 + q.abs());
        prop_assert!(t.lower <= q + tol && t.upper >= q - tol);
        prop_assert!(!tail_indices(&p, q, Tail::Lower).is_empty());
        prop_assert!(!tail_indices(&p, q, Tail::Upper).is_empty());
    }

    #[test]
    fn plug_in_tail_gradient_is_euler_consistent(s in scenario_set(), alpha in 0.01..0.99f64, n in 1u32..4) {
        let u = w(&vec![0.5; s.n_assets()]);
        for tail in [Tail::Lower, Tail::Upper] {
            let spec = RiskSpec::new(alpha, 1.0, n, tail).unwrap();
            let t = empirical_tail_moment(&s, &u, &spec).unwrap().get(tail);
            let g = empirical_tail_gradient(&s, &u, &spec).unwrap();
            let scale: f64 = s.rows().map(|r| r.iter().map(|x| (0.5 * x).abs()).sum::<f64>().powi(n as i32)).fold(1.0, f64::max);
            prop_assert!((u.dot(&g) - n as f64 * t).abs() <= 1e-11 * n as f64 * scale);
        }
    }

    #[test]
    fn rho_is_permutation_invariant(mut x in prop::collection::vec(-10.0..10.0f64, 20), k in 1usize..20, seed in any::<u64>()) {
        let alpha = k as f64 / 20.0;
        let r = rho(&x, alpha);
        prop_assume!(r.is_ok());
        let r = r.unwrap();
        let mut state = seed;
        for i in (1..x.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            x.swap(i, (state >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(rho(&x, alpha).unwrap(), r);
    }

    #[test]
    fn smoothed_quantile_increases_in_alpha(z in sample(40), a in 0.01..0.99f64, b in 0.01..0.99f64, h in 0.01..5.0f64) {
        let p = PortfolioSample::uniform(z).unwrap();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assume!(hi - lo > 1e-6);
        prop_assert!(smoothed_quantile(&p, lo, h, KernelKind::Gaussian).unwrap()
            < smoothed_quantile(&p, hi, h, KernelKind::Gaussian).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gaussian_gradients_match_fd((m, u) in model(), alpha in 0.02..0.98f64, delta in 1.0..3.0f64, lower in any::<bool>()) {
        let tail = if lower { Tail::Lower } else { Tail::Upper };
        let cfg = FDConfig::default();
        let uw = w(&u);
        let rel = |a: &[f64], b: &[f64]| {
            let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs()));
            a.iter().zip(b).fold(0.0f64, |s, (x, y)| s.max((x - y).abs())) / scale
        };
        let fd = fd_gradient(|v| gaussian_quantile(&m, &w(v), alpha), &u, &cfg).unwrap();
        prop_assert!(rel(&gaussian_quantile_gradient(&m, &uw, alpha).unwrap(), &fd) < 1e-6);
        let fd = fd_gradient(|v| Ok(gaussian_tail_moment(&m, &w(v), alpha, 1)?.get(tail)), &u, &cfg).unwrap();
        prop_assert!(rel(&gaussian_tail_moment_gradient(&m, &uw, alpha, 1, tail).unwrap(), &fd) < 1e-6);
        let spec = RiskSpec::new(alpha, delta, 1, tail).unwrap();
        let fd = fd_gradient(|v| Ok(gaussian_shortfall(&m, &w(v), &spec)?.get(tail)), &u, &cfg).unwrap();
        let g = gaussian_shortfall_gradient(&m, &uw, &spec).unwrap();
        prop_assert!(rel(&g, &fd) < 1e-5, "delta {} rel {}", delta, rel(&g, &fd));
        let s = gaussian_shortfall(&m, &uw, &spec).unwrap().get(tail);
        prop_assert!((uw.dot(&g) - delta * s).abs() <= 1e-9 * (1.0 + s.abs()));
    }

    #[test]
    fn quantile_gradient_is_conditional_expectation((m, u) in model(), alpha in 0.01..0.99f64) {
        let uw = w(&u);
        let q = gaussian_quantile(&m, &uw, alpha).unwrap();
        let g = gaussian_quantile_gradient(&m, &uw, alpha).unwrap();
        let e = gaussian_conditional_expectation(&m, &uw, q).unwrap();
        for (a, b) in g.iter().zip(&e) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn gaussian_monotone_and_reflected((m, u) in model(), a in 0.01..0.99f64, b in 0.01..0.99f64) {
        let uw = w(&u);
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assume!(hi - lo > 1e-9);
        prop_assert!(gaussian_quantile(&m, &uw, lo).unwrap() < gaussian_quantile(&m, &uw, hi).unwrap());
        let tl = gaussian_tail_moment(&m, &uw, lo, 1).unwrap().lower;
        let th = gaussian_tail_moment(&m, &uw, hi, 1).unwrap().lower;
        prop_assert!(tl <= th + 1e-12);
        let neg = m.negated();
        let q = gaussian_quantile(&m, &uw, a).unwrap();
        let qn = gaussian_quantile(&neg, &uw, 1.0 - a).unwrap();
        prop_assert!((q + qn).abs() <= 1e-12 * (1.0 + q.abs()));
        let t = gaussian_tail_moment(&m, &uw, a, 1).unwrap();
        let tn = gaussian_tail_moment(&neg, &uw, 1.0 - a, 1).unwrap();
        prop_assert!((t.lower + tn.upper).abs() <= 1e-10 * (1.0 + t.lower.abs()));
    }
}
