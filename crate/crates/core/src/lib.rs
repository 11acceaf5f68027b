//! Continuous-time structural failure time models for treatments taken
//! intermittently, as recorded by prescription dispensations.
//!
//! The crate estimates the causal parameter `psi` of the model
//! `U(psi) = ∫_0^tau exp{(psi1 + psi2' g(L_u)) A_u} du`, where `U` is distributed as
//! the failure time had treatment never been given. Estimation solves an
//! inverse-probability-of-censoring weighted, doubly robust estimating equation
//! built from martingales of the refill process. A structural simulator with a
//! known `psi` is included for validation.
//!
//! Modules, bottom up:
//!
//! * [`data_model`]: trajectories, dispensation geometry and CSV tables;
//! * [`counterfactual`]: `U(psi)`, its gradient and inverse;
//! * [`hazard_models`]: the refill gap-time hazard and the censoring Cox model;
//! * [`martingale`]: refill martingales and stochastic integrals against them;
//! * [`estimator`]: the estimating equation, Newton solver and bootstrap;
//! * [`simulation`]: synthetic cohorts with known truth.

// Validation is written `!(x > 0.0)` so that NaN fails it.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod counterfactual;
pub mod data_model;
pub mod estimator;
pub mod hazard_models;
pub mod martingale;
pub mod simulation;
pub(crate) mod linalg;

pub use counterfactual::{EffectModifierMap, PsiVector};
pub use data_model::{Cohort, CovariateProcess, DispensationRecord, SubjectTrajectory};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/counterfactual.md")]
    mod counterfactual {}
    #[doc = include_str!("../../../book/src/nuisance_models.md")]
    mod nuisance_models {}
    #[doc = include_str!("../../../book/src/martingales.md")]
    mod martingales {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
