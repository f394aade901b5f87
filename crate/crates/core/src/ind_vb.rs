//! Variational Bayes under independent worker noise.
//!
//! Same likelihood as [`crate::ind_ml`] plus a zero-mean Gaussian prior
//! `y_i ~ N(0, tau^2)`. The posterior over each truth is Gaussian with
//! variance `lambda_i = (1/tau^2 + sum_j 1/sigma_j^2)^-1` and mean
//! `lambda_i * sum_j x_ij / sigma_j^2`; hyperparameters are re-estimated
//! from the expected sufficient statistics. Every update is the exact
//! maximizer of the evidence lower bound for its block, so the ELBO is
//! non-decreasing sweep over sweep.
//!
//! The prior is centered at zero, so fitting first subtracts the global
//! observation mean and adds it back on output; the shift is recorded on
//! the returned posterior.

use alloc::vec;
use alloc::vec::Vec;

use crate::dataset::ObservationSet;
use crate::error::{Error, Result};
use crate::ind_ml::IndependentNoiseModel;
use crate::types::{DeltaTracker, FitOptions};

use crate::types::LN_2PI;

/// Gaussian posterior over task truths.
///
/// Means are reported in the original data units; `shift` is the global
/// mean that was subtracted during fitting (zero when the caller supplied
/// the model). Tasks with known truth carry `var == 0`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IndPosterior {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub shift: f64,
}

/// Analytic posterior for fixed hyperparameters.
///
/// Tasks without observations fall back to the prior `N(0, tau^2)`; tasks
/// with known truth become point masses on it.
pub fn exact_posterior_ind(
    data: &ObservationSet,
    model: &IndependentNoiseModel,
) -> Result<IndPosterior> {
    model.validate()?;
    if model.num_workers() != data.num_workers() {
        return Err(Error::DimensionMismatch {
            expected: data.num_workers(),
            actual: model.num_workers(),
        });
    }
    let tau2 = model.prior_variance;
    let mut mean = vec![0.0; data.num_tasks()];
    let mut var = vec![0.0; data.num_tasks()];
    for i in 0..data.num_tasks() {
        if let Some(t) = data.truth(i) {
            mean[i] = t;
            var[i] = 0.0;
            continue;
        }
        let mut precision = 1.0 / tau2;
        let mut weighted = 0.0;
        for e in data.task_entries(i) {
            let v = model.worker_variances[e.worker];
            precision += 1.0 / v;
            weighted += e.value / v;
        }
        var[i] = 1.0 / precision;
        mean[i] = var[i] * weighted;
    }
    Ok(IndPosterior { mean, var, shift: 0.0 })
}

/// Evidence lower bound `E_q[log p(x, y)] + H(q)`.
///
/// Data and means are centered by `post.shift` before evaluation. Tasks
/// with known truth contribute no entropy (their posterior is a point
/// mass). With no observations and `q` equal to the prior the bound is
/// exactly zero.
pub fn elbo_ind(
    data: &ObservationSet,
    post: &IndPosterior,
    model: &IndependentNoiseModel,
) -> Result<f64> {
    model.validate()?;
    if post.mean.len() != data.num_tasks() || post.var.len() != data.num_tasks() {
        return Err(Error::DimensionMismatch {
            expected: data.num_tasks(),
            actual: post.mean.len(),
        });
    }
    if model.num_workers() != data.num_workers() {
        return Err(Error::DimensionMismatch {
            expected: data.num_workers(),
            actual: model.num_workers(),
        });
    }
    let tau2 = model.prior_variance;
    let mut elbo = 0.0;
    for i in 0..data.num_tasks() {
        let m = post.mean[i] - post.shift;
        let lambda = post.var[i];
        elbo += -0.5 * (LN_2PI + libm::log(tau2)) - (lambda + m * m) / (2.0 * tau2);
        if data.truth(i).is_none() {
            elbo += 0.5 * (LN_2PI + 1.0 + libm::log(lambda));
        }
    }
    for e in data.entries() {
        let v = model.worker_variances[e.worker];
        let r = (e.value - post.shift) - (post.mean[e.task] - post.shift);
        elbo += -0.5 * (LN_2PI + libm::log(v)) - (r * r + post.var[e.task]) / (2.0 * v);
    }
    Ok(elbo)
}

/// How the worker variances are treated during a variational fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VarianceMode {
    /// One variance per worker.
    PerWorker,
    /// A single variance shared by all workers.
    Tied,
    /// Hyperparameters stay at their given values.
    Frozen,
}

/// Full variational fit: posterior plus re-estimated hyperparameters and
/// the per-sweep ELBO trace.
pub fn fit_ind_vb(
    data: &ObservationSet,
    opts: &FitOptions,
) -> Result<(IndPosterior, IndependentNoiseModel, Vec<f64>)> {
    run_vb(data, None, VarianceMode::PerWorker, opts)
}

/// Variational fit with a single noise variance shared by every worker.
///
/// This is the rank-zero limit of the latent model; initialization matches
/// it so the two produce identical iterates.
pub fn fit_ind_vb_tied(
    data: &ObservationSet,
    opts: &FitOptions,
) -> Result<(IndPosterior, IndependentNoiseModel, Vec<f64>)> {
    run_vb(data, None, VarianceMode::Tied, opts)
}

/// Posterior sweeps with the hyperparameters held at `model`.
///
/// One sweep already lands on [`exact_posterior_ind`]; the loop exists to
/// share the convergence reporting with the other fits. No centering is
/// applied, the data is taken as given.
pub fn fit_ind_vb_frozen(
    data: &ObservationSet,
    model: &IndependentNoiseModel,
    opts: &FitOptions,
) -> Result<(IndPosterior, Vec<f64>)> {
    let (post, _, trace) = run_vb(data, Some(model), VarianceMode::Frozen, opts)?;
    Ok((post, trace))
}

fn run_vb(
    data: &ObservationSet,
    frozen_model: Option<&IndependentNoiseModel>,
    mode: VarianceMode,
    opts: &FitOptions,
) -> Result<(IndPosterior, IndependentNoiseModel, Vec<f64>)> {
    opts.validate()?;
    let i_count = data.num_tasks();
    let j_count = data.num_workers();

    let shift;
    let mut tau2;
    let mut variances;
    match (mode, frozen_model) {
        (VarianceMode::Frozen, Some(m)) => {
            m.validate()?;
            if m.num_workers() != j_count {
                return Err(Error::DimensionMismatch { expected: j_count, actual: m.num_workers() });
            }
            shift = 0.0;
            tau2 = m.prior_variance;
            variances = m.worker_variances.clone();
        }
        (VarianceMode::PerWorker, None) => {
            if data.is_empty() {
                return Err(Error::InvalidData("no observations to fit".into()));
            }
            data.require_estimable()?;
            shift = data.value_mean();
            tau2 = data.value_variance().max(opts.variance_floor);
            variances = vec![1.0; j_count];
        }
        (VarianceMode::Tied, None) => {
            if data.is_empty() {
                return Err(Error::InvalidData("no observations to fit".into()));
            }
            data.require_estimable()?;
            shift = data.value_mean();
            let scale = data.value_variance();
            tau2 = scale.max(opts.variance_floor);
            variances = vec![(0.5 * scale).max(opts.variance_floor); j_count];
        }
        _ => unreachable!("frozen model is passed exactly when the mode is Frozen"),
    }

    let clamp: Vec<Option<f64>> = (0..i_count).map(|i| data.truth(i).map(|t| t - shift)).collect();
    let mut mean = vec![0.0; i_count];
    let mut var = vec![tau2; i_count];
    let mut trace = Vec::new();

    let update_posterior = |mean: &mut [f64],
                            var: &mut [f64],
                            tau2: f64,
                            variances: &[f64],
                            delta: &mut DeltaTracker| {
        for i in 0..i_count {
            let (new_mean, new_var) = match clamp[i] {
                Some(t) => (t, 0.0),
                None => {
                    let mut precision = 1.0 / tau2;
                    let mut weighted = 0.0;
                    for e in data.task_entries(i) {
                        let v = variances[e.worker];
                        precision += 1.0 / v;
                        weighted += (e.value - shift) / v;
                    }
                    let lambda = 1.0 / precision;
                    (lambda * weighted, lambda)
                }
            };
            delta.observe(mean[i], new_mean);
            delta.observe(var[i], new_var);
            mean[i] = new_mean;
            var[i] = new_var;
        }
    };

    for _ in 0..opts.max_iters {
        let mut delta = DeltaTracker::default();
        update_posterior(&mut mean, &mut var, tau2, &variances, &mut delta);

        if mode != VarianceMode::Frozen {
            let moments: f64 = (0..i_count).map(|i| var[i] + mean[i] * mean[i]).sum();
            let new_tau2 = (moments / i_count as f64).max(opts.variance_floor);
            delta.observe(tau2, new_tau2);
            tau2 = new_tau2;

            match mode {
                VarianceMode::PerWorker => {
                    for j in 0..j_count {
                        let n = data.worker_load(j);
                        if n == 0 {
                            continue;
                        }
                        let ss: f64 = data.worker_entries(j).map(|e| {
                            let r = (e.value - shift) - mean[e.task];
                            var[e.task] + r * r
                        }).sum();
                        let new_v = (ss / n as f64).max(opts.variance_floor);
                        delta.observe(variances[j], new_v);
                        variances[j] = new_v;
                    }
                }
                VarianceMode::Tied => {
                    let ss: f64 = data.entries().iter().map(|e| {
                        let r = (e.value - shift) - mean[e.task];
                        var[e.task] + r * r
                    }).sum();
                    let new_v = (ss / data.num_entries() as f64).max(opts.variance_floor);
                    for j in 0..j_count {
                        delta.observe(variances[j], new_v);
                        variances[j] = new_v;
                    }
                }
                VarianceMode::Frozen => {}
            }
        }

        let model = IndependentNoiseModel { worker_variances: variances.clone(), prior_variance: tau2 };
        let post = IndPosterior { mean: mean.clone(), var: var.clone(), shift: 0.0 };
        let elbo = elbo_centered(data, &post, &model, shift)?;
        if !elbo.is_finite() {
            return Err(Error::NonFinite("evidence lower bound diverged".into()));
        }
        trace.push(elbo);

        if delta.max() <= opts.rel_tolerance {
            break;
        }
    }

    // Align the posterior with the final hyperparameters; this is another
    // exact block update, so the bound cannot drop.
    let mut delta = DeltaTracker::default();
    update_posterior(&mut mean, &mut var, tau2, &variances, &mut delta);

    for m in mean.iter_mut() {
        *m += shift;
    }
    let model = IndependentNoiseModel { worker_variances: variances, prior_variance: tau2 };
    Ok((IndPosterior { mean, var, shift }, model, trace))
}

/// [`elbo_ind`] for a posterior whose means are still centered.
fn elbo_centered(
    data: &ObservationSet,
    centered_post: &IndPosterior,
    model: &IndependentNoiseModel,
    shift: f64,
) -> Result<f64> {
    let view = IndPosterior {
        mean: centered_post.mean.iter().map(|m| m + shift).collect(),
        var: centered_post.var.clone(),
        shift,
    };
    elbo_ind(data, &view, model)
}
