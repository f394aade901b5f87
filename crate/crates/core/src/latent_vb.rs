//! Variational Bayes for the latent low-rank noise model.
//!
//! The generative story extends the independent one: each task carries a
//! feature vector `u_i`, each worker a feature vector `v_j`, and an
//! observation is `x_ij = y_i + u_i^T v_j + noise`. The posterior is
//! approximated by independent Gaussians, one per truth, task feature,
//! and worker feature, updated in closed form block by block:
//!
//! * `q(y_i)`: variance `lambda_i = (1/sigma_y^2 + |J_i|/sigma^2)^-1`,
//!   mean `lambda_i * sum_j (x_ij - u_i^T v_j) / sigma^2`,
//! * `q(u_i)`: covariance `(I/sigma_u^2 + sum_j (Psi_j + v_j v_j^T) /
//!   sigma^2)^-1`, mean from the residuals `x_ij - y_i`,
//! * `q(v_j)`: the mirror image over the worker's tasks,
//! * hyperparameters by their expected-moment averages.
//!
//! Every block maximizes the same evidence lower bound exactly, so the
//! bound never decreases across sweeps. The bound is also what
//! [`fit_latent_vb`] traces and what convergence is judged on.
//!
//! Prediction for a task outside the training set reuses the frozen
//! worker factors: [`predict_closed_form`] collapses the alternating
//! `q(y)`/`q(u)` iteration into one weighted average, and
//! [`predict_via_icov`] instead materializes the implied covariance and
//! runs generalized least squares.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cov_ml::{aggregate_icov, check_ascending, LatentNoiseModel, FEATURE_INIT_STD};

/// The hyperparameter block stays frozen while the worker-feature means
/// are still growing; these bound that warm-up. See [`fit_latent_vb`]
/// for why a warm-up is needed at all. Growth below two percent per
/// sweep counts as saturated, no earlier than sweep ten so the initial
/// realignment dip is not mistaken for saturation, and no later than
/// sweep one hundred.
const HYPER_BURN_IN_MIN: usize = 10;
const HYPER_BURN_IN_CAP: usize = 100;
const HYPER_SATURATION_GROWTH: f64 = 1.02;
use crate::dataset::{stack_multitarget, unstack_estimates, MultiTargetSpec, ObservationSet};
use crate::error::{Error, Result};
use crate::numkern::{cholesky, spd_logdet, SymMatrix};
use crate::types::{DeltaTracker, FitOptions, LN_2PI};

/// Mean-field Gaussian posterior over truths and both feature sets.
///
/// Truth means are stored in centered coordinates; `shift` is the offset
/// removed from the data before fitting and [`estimates`] restores the
/// original units. Clamped tasks keep a point mass: mean at the known
/// truth, variance exactly zero.
///
/// [`estimates`]: LatentPosteriorState::estimates
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LatentPosteriorState {
    #[cfg_attr(feature = "serde", serde(rename = "D"))]
    pub rank: usize,
    /// Centering offset removed from every observation.
    pub shift: f64,
    /// Per-task truth means, centered.
    pub y_mean: Vec<f64>,
    /// Per-task truth variances; zero exactly on clamped tasks.
    pub y_var: Vec<f64>,
    /// Per-task feature means.
    pub u_mean: Vec<Vec<f64>>,
    /// Per-task feature covariances.
    pub u_cov: Vec<SymMatrix>,
    /// Per-worker feature means.
    pub v_mean: Vec<Vec<f64>>,
    /// Per-worker feature covariances.
    pub v_cov: Vec<SymMatrix>,
}

impl LatentPosteriorState {
    /// The factorized prior itself: zero means, prior covariances, no
    /// centering. Running [`elbo_latent`] against it on an empty data set
    /// scores zero.
    pub fn prior(num_tasks: usize, num_workers: usize, model: &LatentNoiseModel) -> Self {
        LatentPosteriorState {
            rank: model.rank,
            shift: 0.0,
            y_mean: vec![0.0; num_tasks],
            y_var: vec![model.sigma_y2; num_tasks],
            u_mean: vec![vec![0.0; model.rank]; num_tasks],
            u_cov: vec![SymMatrix::scaled_identity(model.rank, model.sigma_u2); num_tasks],
            v_mean: vec![vec![0.0; model.rank]; num_workers],
            v_cov: vec![SymMatrix::scaled_identity(model.rank, model.sigma_v2); num_workers],
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.y_mean.len()
    }

    pub fn num_workers(&self) -> usize {
        self.v_mean.len()
    }

    /// Truth means in the original units of the data.
    pub fn estimates(&self) -> Vec<f64> {
        self.y_mean.iter().map(|m| m + self.shift).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let i_count = self.y_mean.len();
        let j_count = self.v_mean.len();
        if self.y_var.len() != i_count || self.u_mean.len() != i_count || self.u_cov.len() != i_count
        {
            return Err(Error::DimensionMismatch { expected: i_count, actual: self.y_var.len() });
        }
        if self.v_cov.len() != j_count {
            return Err(Error::DimensionMismatch { expected: j_count, actual: self.v_cov.len() });
        }
        if !self.shift.is_finite() {
            return Err(Error::NonFinite("posterior shift".into()));
        }
        for (m, v) in self.y_mean.iter().zip(self.y_var.iter()) {
            if !m.is_finite() || !v.is_finite() || *v < 0.0 {
                return Err(Error::InvalidData("truth posterior has invalid moments".into()));
            }
        }
        for (mean, cov) in self
            .u_mean
            .iter()
            .zip(self.u_cov.iter())
            .chain(self.v_mean.iter().zip(self.v_cov.iter()))
        {
            if mean.len() != self.rank || cov.order() != self.rank {
                return Err(Error::DimensionMismatch { expected: self.rank, actual: mean.len() });
            }
            if mean.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidData("feature posterior has non-finite mean".into()));
            }
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn check_state(
    data: &ObservationSet,
    post: &LatentPosteriorState,
    model: &LatentNoiseModel,
) -> Result<()> {
    if post.num_tasks() != data.num_tasks() {
        return Err(Error::DimensionMismatch {
            expected: data.num_tasks(),
            actual: post.num_tasks(),
        });
    }
    if post.num_workers() != data.num_workers() || model.num_workers() != data.num_workers() {
        return Err(Error::DimensionMismatch {
            expected: data.num_workers(),
            actual: post.num_workers(),
        });
    }
    if model.rank != post.rank {
        return Err(Error::DimensionMismatch { expected: post.rank, actual: model.rank });
    }
    Ok(())
}

/// Second moments `cov + mean mean^T`, one per factor.
fn second_moments(means: &[Vec<f64>], covs: &[SymMatrix]) -> Vec<SymMatrix> {
    means
        .iter()
        .zip(covs.iter())
        .map(|(mean, cov)| {
            let mut m = cov.clone();
            m.rank_one_update(mean, 1.0);
            m
        })
        .collect()
}

/// Exact `q(y)` update; returns the largest relative change it made.
///
/// Tasks with known truth are pinned to a point mass instead.
pub fn update_truth_block(
    data: &ObservationSet,
    post: &mut LatentPosteriorState,
    model: &LatentNoiseModel,
) -> Result<f64> {
    check_state(data, post, model)?;
    let sigma2 = model.sigma2;
    let shift = post.shift;
    let mut delta = DeltaTracker::default();
    for i in 0..data.num_tasks() {
        let (new_mean, new_var) = match data.truth(i) {
            Some(t) => (t - shift, 0.0),
            None => {
                let mut precision = 1.0 / model.sigma_y2;
                let mut weighted = 0.0;
                for e in data.task_entries(i) {
                    let expected = dot(&post.u_mean[i], &post.v_mean[e.worker]);
                    precision += 1.0 / sigma2;
                    weighted += (e.value - shift - expected) / sigma2;
                }
                let lambda = 1.0 / precision;
                (lambda * weighted, lambda)
            }
        };
        delta.observe(post.y_mean[i], new_mean);
        delta.observe(post.y_var[i], new_var);
        post.y_mean[i] = new_mean;
        post.y_var[i] = new_var;
    }
    Ok(delta.max())
}

/// Exact `q(u)` update; returns the largest relative change across the
/// posterior means.
pub fn update_task_feature_block(
    data: &ObservationSet,
    post: &mut LatentPosteriorState,
    model: &LatentNoiseModel,
) -> Result<f64> {
    check_state(data, post, model)?;
    let d = post.rank;
    if d == 0 {
        return Ok(0.0);
    }
    let sigma2 = model.sigma2;
    let shift = post.shift;
    let worker_moments = second_moments(&post.v_mean, &post.v_cov);
    let mut delta = DeltaTracker::default();
    for i in 0..data.num_tasks() {
        let mut precision = SymMatrix::scaled_identity(d, 1.0 / model.sigma_u2);
        let mut rhs = vec![0.0; d];
        for e in data.task_entries(i) {
            precision.add_scaled(&worker_moments[e.worker], 1.0 / sigma2);
            let r = (e.value - shift - post.y_mean[i]) / sigma2;
            for (slot, v) in rhs.iter_mut().zip(post.v_mean[e.worker].iter()) {
                *slot += r * v;
            }
        }
        let factor = cholesky(&precision)?;
        let new_mean = factor.solve(&rhs)?;
        for (old, new) in post.u_mean[i].iter().zip(new_mean.iter()) {
            delta.observe(*old, *new);
        }
        post.u_mean[i] = new_mean;
        post.u_cov[i] = factor.inverse();
    }
    Ok(delta.max())
}

/// Exact `q(v)` update, the mirror image of the task-feature block.
pub fn update_worker_feature_block(
    data: &ObservationSet,
    post: &mut LatentPosteriorState,
    model: &LatentNoiseModel,
) -> Result<f64> {
    check_state(data, post, model)?;
    let d = post.rank;
    if d == 0 {
        return Ok(0.0);
    }
    let sigma2 = model.sigma2;
    let shift = post.shift;
    let task_moments = second_moments(&post.u_mean, &post.u_cov);
    let mut delta = DeltaTracker::default();
    for j in 0..data.num_workers() {
        let mut precision = SymMatrix::scaled_identity(d, 1.0 / model.sigma_v2);
        let mut rhs = vec![0.0; d];
        for e in data.worker_entries(j) {
            precision.add_scaled(&task_moments[e.task], 1.0 / sigma2);
            let r = (e.value - shift - post.y_mean[e.task]) / sigma2;
            for (slot, u) in rhs.iter_mut().zip(post.u_mean[e.task].iter()) {
                *slot += r * u;
            }
        }
        let factor = cholesky(&precision)?;
        let new_mean = factor.solve(&rhs)?;
        for (old, new) in post.v_mean[j].iter().zip(new_mean.iter()) {
            delta.observe(*old, *new);
        }
        post.v_mean[j] = new_mean;
        post.v_cov[j] = factor.inverse();
    }
    Ok(delta.max())
}

/// Expected residual moment of one entry: the bracket of the noise
/// variance update and of the per-entry likelihood term in the bound.
fn entry_bracket(
    e: &crate::dataset::Observation,
    post: &LatentPosteriorState,
    task_moments: &[SymMatrix],
    worker_moments: &[SymMatrix],
) -> f64 {
    let r = (e.value - post.shift) - post.y_mean[e.task];
    post.y_var[e.task] + r * r - 2.0 * r * dot(&post.u_mean[e.task], &post.v_mean[e.worker])
        + task_moments[e.task].trace_product(&worker_moments[e.worker])
}

/// Expected-moment re-estimation of all four variances; returns the
/// largest relative change. With `rank` zero the feature priors have no
/// moments to match and stay put.
pub fn update_hyperparameter_block(
    data: &ObservationSet,
    post: &LatentPosteriorState,
    model: &mut LatentNoiseModel,
    variance_floor: f64,
) -> Result<f64> {
    check_state(data, post, model)?;
    let i_count = data.num_tasks();
    let j_count = data.num_workers();
    let d = post.rank;
    let mut delta = DeltaTracker::default();

    let moments: f64 = (0..i_count).map(|i| post.y_var[i] + post.y_mean[i] * post.y_mean[i]).sum();
    let new_sy2 = (moments / i_count as f64).max(variance_floor);
    delta.observe(model.sigma_y2, new_sy2);
    model.sigma_y2 = new_sy2;

    if d > 0 {
        let tr_u: f64 =
            (0..i_count).map(|i| post.u_cov[i].trace() + dot(&post.u_mean[i], &post.u_mean[i])).sum();
        let new_su2 = (tr_u / (d * i_count) as f64).max(variance_floor);
        delta.observe(model.sigma_u2, new_su2);
        model.sigma_u2 = new_su2;

        let tr_v: f64 =
            (0..j_count).map(|j| post.v_cov[j].trace() + dot(&post.v_mean[j], &post.v_mean[j])).sum();
        let new_sv2 = (tr_v / (d * j_count) as f64).max(variance_floor);
        delta.observe(model.sigma_v2, new_sv2);
        model.sigma_v2 = new_sv2;
    }

    let task_moments = second_moments(&post.u_mean, &post.u_cov);
    let worker_moments = second_moments(&post.v_mean, &post.v_cov);
    let ss: f64 = data
        .entries()
        .iter()
        .map(|e| entry_bracket(e, post, &task_moments, &worker_moments))
        .sum();
    let new_s2 = (ss / data.num_entries() as f64).max(variance_floor);
    delta.observe(model.sigma2, new_s2);
    model.sigma2 = new_s2;

    Ok(delta.max())
}

/// Evidence lower bound of the mean-field posterior.
///
/// Point-mass factors on clamped tasks contribute their prior moment but
/// no entropy. With the exact prior as posterior and no observations the
/// bound is zero.
pub fn elbo_latent(
    data: &ObservationSet,
    post: &LatentPosteriorState,
    model: &LatentNoiseModel,
) -> Result<f64> {
    check_state(data, post, model)?;
    let d = post.rank as f64;
    let mut elbo = 0.0;

    for i in 0..data.num_tasks() {
        let lambda = post.y_var[i];
        let m = post.y_mean[i];
        elbo += -0.5 * (LN_2PI + libm::log(model.sigma_y2)) - (lambda + m * m) / (2.0 * model.sigma_y2);
        if data.truth(i).is_none() {
            elbo += 0.5 * (LN_2PI + 1.0 + libm::log(lambda));
        }
        let tr = post.u_cov[i].trace() + dot(&post.u_mean[i], &post.u_mean[i]);
        elbo += -0.5 * d * (LN_2PI + libm::log(model.sigma_u2)) - tr / (2.0 * model.sigma_u2);
        elbo += 0.5 * d * (LN_2PI + 1.0) + 0.5 * spd_logdet(&post.u_cov[i])?;
    }
    for j in 0..data.num_workers() {
        let tr = post.v_cov[j].trace() + dot(&post.v_mean[j], &post.v_mean[j]);
        elbo += -0.5 * d * (LN_2PI + libm::log(model.sigma_v2)) - tr / (2.0 * model.sigma_v2);
        elbo += 0.5 * d * (LN_2PI + 1.0) + 0.5 * spd_logdet(&post.v_cov[j])?;
    }

    let task_moments = second_moments(&post.u_mean, &post.u_cov);
    let worker_moments = second_moments(&post.v_mean, &post.v_cov);
    for e in data.entries() {
        let bracket = entry_bracket(e, post, &task_moments, &worker_moments);
        elbo += -0.5 * (LN_2PI + libm::log(model.sigma2)) - bracket / (2.0 * model.sigma2);
    }
    Ok(elbo)
}

/// Initial state and hyperparameters shared by the fit and its tests:
/// truth means at the (centered) task means, feature means at zero except
/// for a small seeded draw on the worker side, covariances at their
/// priors.
fn init_latent(
    data: &ObservationSet,
    rank: usize,
    opts: &FitOptions,
) -> (LatentPosteriorState, LatentNoiseModel) {
    let i_count = data.num_tasks();
    let j_count = data.num_workers();
    let shift = data.value_mean();
    let scale = data.value_variance();
    let model = LatentNoiseModel {
        rank,
        worker_features: vec![vec![0.0; rank]; j_count],
        sigma2: (0.5 * scale).max(opts.variance_floor),
        sigma_u2: 1.0,
        sigma_v2: 1.0,
        sigma_y2: scale.max(opts.variance_floor),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut y_mean = vec![0.0; i_count];
    let mut y_var = vec![0.0; i_count];
    for i in 0..i_count {
        match data.truth(i) {
            Some(t) => {
                y_mean[i] = t - shift;
            }
            None => {
                let block = data.task_entries(i);
                if !block.is_empty() {
                    y_mean[i] =
                        block.iter().map(|e| e.value - shift).sum::<f64>() / block.len() as f64;
                }
                let mut precision = 1.0 / model.sigma_y2;
                for _ in block {
                    precision += 1.0 / model.sigma2;
                }
                y_var[i] = 1.0 / precision;
            }
        }
    }

    let post = LatentPosteriorState {
        rank,
        shift,
        y_mean,
        y_var,
        u_mean: vec![vec![0.0; rank]; i_count],
        u_cov: vec![SymMatrix::scaled_identity(rank, model.sigma_u2); i_count],
        v_mean: (0..j_count)
            .map(|_| (0..rank).map(|_| FEATURE_INIT_STD * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect(),
        v_cov: vec![SymMatrix::scaled_identity(rank, model.sigma_v2); j_count],
    };
    (post, model)
}

/// Full variational fit: block updates cycled to convergence, with the
/// bound recorded once per sweep.
///
/// The returned model carries the posterior mean worker features, so it
/// can feed [`predict_via_icov`] or [`aggregate_icov`] directly. With
/// `rank` zero the fit follows [`crate::ind_vb::fit_ind_vb_tied`]
/// iterate for iterate.
pub fn fit_latent_vb(
    data: &ObservationSet,
    rank: usize,
    opts: &FitOptions,
) -> Result<(LatentPosteriorState, LatentNoiseModel, Vec<f64>)> {
    opts.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidData("no observations to fit".into()));
    }
    data.require_estimable()?;

    let (mut post, mut model) = init_latent(data, rank, opts);
    // The factor means start near zero, so their posterior covariances
    // enter the cross-block precisions as pure noise; re-estimating the
    // priors in that state shrinks sigma_u2 and sigma_v2 toward the floor
    // faster than the means can align with the correlation structure, and
    // the fit dies at the V = 0 saddle. The hyperparameter block therefore
    // waits until the worker means saturate: once aligned they grow
    // multiplicatively sweep over sweep, so flat growth means either
    // locked-on factors or no correlation to find, and re-estimation is
    // safe in both cases. Every performed update is still exact block
    // ascent and the fixed points are unchanged. With no factors there is
    // no saddle, and starting the block immediately keeps the rank-zero
    // fit aligned with the tied independent one iterate for iterate.
    let mut hypers_active = rank == 0;
    let mut prev_growth = f64::INFINITY;
    let mut trace = Vec::new();
    for sweep in 0..opts.max_iters {
        let mut worst = update_truth_block(data, &mut post, &model)?;
        worst = worst.max(update_task_feature_block(data, &mut post, &model)?);
        worst = worst.max(update_worker_feature_block(data, &mut post, &model)?);
        if !hypers_active {
            let v2: f64 =
                post.v_mean.iter().map(|row| dot(row, row)).sum::<f64>() / post.v_mean.len() as f64;
            hypers_active = sweep + 1 >= HYPER_BURN_IN_CAP
                || (sweep >= HYPER_BURN_IN_MIN && v2 <= HYPER_SATURATION_GROWTH * prev_growth);
            prev_growth = v2;
        }
        if hypers_active {
            worst =
                worst.max(update_hyperparameter_block(data, &post, &mut model, opts.variance_floor)?);
        }

        let elbo = elbo_latent(data, &post, &model)?;
        if !elbo.is_finite() {
            return Err(Error::NonFinite("evidence lower bound diverged".into()));
        }
        trace.push(elbo);

        if worst <= opts.rel_tolerance && hypers_active {
            break;
        }
    }

    // Align the truths with the final hyperparameters; another exact
    // block update, so the bound cannot drop.
    update_truth_block(data, &mut post, &model)?;
    model.worker_features = post.v_mean.clone();
    Ok((post, model, trace))
}

/// Closed-form truth prediction for a task outside the training set.
///
/// Freezing the worker factors makes the alternating `q(y)`/`q(u)`
/// iteration a linear fixed-point problem; its solution is the weighted
/// average `sum_j rho_j x_j / (1/sigma_y^2 + sum_j rho_j)` with
/// `rho_j = (1 - s^T Phi v_j / sigma^2) / sigma^2` and `s = sum_j v_j`.
/// With no observations the prior mean comes back.
pub fn predict_closed_form(
    x: &[f64],
    idx: &[usize],
    post: &LatentPosteriorState,
    model: &LatentNoiseModel,
) -> Result<f64> {
    if x.len() != idx.len() {
        return Err(Error::DimensionMismatch { expected: idx.len(), actual: x.len() });
    }
    if model.rank != post.rank || model.num_workers() != post.num_workers() {
        return Err(Error::DimensionMismatch {
            expected: post.num_workers(),
            actual: model.num_workers(),
        });
    }
    check_ascending(idx, post.num_workers())?;

    let d = post.rank;
    let sigma2 = model.sigma2;
    let mut precision = SymMatrix::scaled_identity(d, 1.0 / model.sigma_u2);
    let mut s = vec![0.0; d];
    for &j in idx {
        let mut m = post.v_cov[j].clone();
        m.rank_one_update(&post.v_mean[j], 1.0);
        precision.add_scaled(&m, 1.0 / sigma2);
        for (slot, v) in s.iter_mut().zip(post.v_mean[j].iter()) {
            *slot += v;
        }
    }
    let phi_s = cholesky(&precision)?.solve(&s)?;

    let mut num = 0.0;
    let mut den = 1.0 / model.sigma_y2;
    for (value, &j) in x.iter().zip(idx.iter()) {
        let rho = (1.0 - dot(&phi_s, &post.v_mean[j]) / sigma2) / sigma2;
        num += rho * (value - post.shift);
        den += rho;
    }
    Ok(num / den + post.shift)
}

/// Truth prediction through the implied covariance: builds
/// `sigma_u^2 V V^T + sigma^2 I` from the posterior mean features and
/// delegates to [`aggregate_icov`].
pub fn predict_via_icov(x: &[f64], idx: &[usize], model: &LatentNoiseModel) -> Result<f64> {
    aggregate_icov(x, idx, model)
}

/// Outputs of [`fit_latent_vb_multitarget`]: the fit of the stacked
/// problem plus the estimates unstacked into one vector per target.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTargetFit {
    pub state: LatentPosteriorState,
    pub model: LatentNoiseModel,
    pub elbo_trace: Vec<f64>,
    pub target_estimates: Vec<Vec<f64>>,
}

/// Fits several prediction targets jointly by stacking them into one
/// task axis; workers share a single feature vector across targets.
pub fn fit_latent_vb_multitarget(
    data: &[ObservationSet],
    spec: &MultiTargetSpec,
    rank: usize,
    opts: &FitOptions,
) -> Result<MultiTargetFit> {
    let stacked = stack_multitarget(data, spec)?;
    let (state, model, elbo_trace) = fit_latent_vb(&stacked, rank, opts)?;
    let target_estimates = unstack_estimates(&state.estimates(), spec)?;
    Ok(MultiTargetFit { state, model, elbo_trace, target_estimates })
}
