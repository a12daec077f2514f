//! Quantiles, tail moments and expected shortfall of weighted sums of random
//! variables, with their partial derivatives in the portfolio weights.
//!
//! Three backends compute the same report: [`gaussian`] in closed form for a
//! multivariate normal law, and the empirical and kernel estimators in
//! [`model`] and [`kernel`] for scenario data. [`oracle`] holds independent
//! finite-difference and Monte Carlo checks, [`coherence`] the seeded
//! property suite for the tail-mean risk measure, and [`cli`] the `riskgrad`
//! command line.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod coherence;
pub mod derivatives;
pub mod error;
pub mod gaussian;
pub mod kernel;
pub mod model;
pub mod oracle;
pub mod quadrature;
pub mod special;

pub use derivatives::{allocation_summary, evaluate, AllocationSummary, Query, QueryInput};
pub use error::{Result, RiskError};
pub use gaussian::GaussianModel;
pub use kernel::{Bandwidth, KernelConfig, KernelKind};
pub use model::{
    Method, PortfolioSample, RiskReport, RiskSpec, ScenarioSet, Tail, TailPair, WeightVector,
};
