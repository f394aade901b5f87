//! Aggregation of sparse, noisy continuous predictions from many
//! contributors.
//!
//! Every task collects a handful of real-valued guesses from a small,
//! task-specific subset of a large worker pool. The estimators here
//! recover the underlying truths by learning how reliable and how
//! correlated the workers are:
//!
//! * [`ind_ml`] and [`ind_vb`]: independent per-worker noise, fit by
//!   maximum likelihood or variational inference,
//! * [`cov_ml`]: correlated noise through a full or latent low-rank
//!   covariance, fit by alternating estimation or stochastic gradient,
//! * [`latent_vb`]: the latent low-rank model under a full variational
//!   posterior with closed-form prediction for unseen tasks,
//! * [`eval`]: synthetic benchmarks, sweeps, and holdout evaluation.
//!
//! The crate is `no_std` (with `alloc`); file formats and the command
//! line front end live in the companion `crowdagg-cli` crate.

#![cfg_attr(not(test), no_std)]
extern crate alloc;

pub mod cov_ml;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod ind_ml;
pub mod ind_vb;
pub mod latent_vb;
pub mod numkern;
pub mod types;

pub use cov_ml::{
    aggregate_icov, fit_icov_full, fit_latent_ml, task_grad, task_loglik, FullCovModel,
    LatentNoiseModel, SgdOptions, TaskGrad, WorkerCovariance,
};
pub use dataset::{
    generate_synthetic, stack_multitarget, unstack_estimates, unstack_multitarget,
    MultiTargetSpec, Observation, ObservationSet, SyntheticConfig,
};
pub use error::{Error, Result};
pub use eval::{
    evaluate_holdout, method_estimates, rmse, run_sweep, HoldoutReport, Method, MethodParams,
    SweepCell, SweepResult, SweepSpec,
};
pub use ind_ml::{aggregate_ind, fit_ind_ml, loglik_ind, IndependentNoiseModel};
pub use ind_vb::{
    elbo_ind, exact_posterior_ind, fit_ind_vb, fit_ind_vb_frozen, fit_ind_vb_tied, IndPosterior,
};
pub use latent_vb::{
    elbo_latent, fit_latent_vb, fit_latent_vb_multitarget, predict_closed_form, predict_via_icov,
    update_hyperparameter_block, update_task_feature_block, update_truth_block,
    update_worker_feature_block, LatentPosteriorState, MultiTargetFit,
};
pub use types::{AggregationResult, FitDiagnostics, FitOptions};
