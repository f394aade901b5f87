//! Maximum likelihood with correlated worker noise.
//!
//! Two covariance families share the generalized-least-squares aggregator
//! here:
//!
//! * [`FullCovModel`] keeps an explicit worker-by-worker covariance,
//!   re-estimated from pairwise residual statistics,
//! * [`LatentNoiseModel`] parameterizes it as
//!   `sigma_u^2 * V V^T + sigma^2 * I`, a low-rank factor per worker plus
//!   an isotropic floor, trained by stochastic gradient ascent on the
//!   per-task log-likelihood.
//!
//! For a task observed by worker subset `w` with covariance block
//! `Sigma_w`, the truth estimate is `1^T Sigma_w^-1 x / 1^T Sigma_w^-1 1`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::ObservationSet;
use crate::error::{Error, Result};
use crate::numkern::{cholesky, gather_submatrix, SymMatrix};
use crate::types::{AggregationResult, DeltaTracker, FitDiagnostics, FitOptions};

use crate::types::LN_2PI;

/// Relative jitter added to the diagonal of an assembled sample
/// covariance before it is factored.
const COVARIANCE_JITTER: f64 = 1e-8;

/// Standard deviation of the latent feature initialization, shared with
/// the variational fit.
pub(crate) const FEATURE_INIT_STD: f64 = 0.1;

/// Explicit worker-by-worker noise covariance.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FullCovModel {
    #[cfg_attr(feature = "serde", serde(rename = "Sigma"))]
    pub covariance: SymMatrix,
}

impl FullCovModel {
    pub fn new(covariance: SymMatrix) -> Self {
        FullCovModel { covariance }
    }

    pub fn num_workers(&self) -> usize {
        self.covariance.order()
    }
}

/// Low-rank noise covariance `sigma_u^2 * V V^T + sigma^2 * I`.
///
/// `worker_features` holds one rank-`rank` row per worker. The prior
/// variances `sigma_v2` and `sigma_y2` only matter to the variational fit
/// and stay at one when the model comes out of the ML path.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LatentNoiseModel {
    #[cfg_attr(feature = "serde", serde(rename = "D"))]
    pub rank: usize,
    #[cfg_attr(feature = "serde", serde(rename = "V"))]
    pub worker_features: Vec<Vec<f64>>,
    pub sigma2: f64,
    pub sigma_u2: f64,
    pub sigma_v2: f64,
    pub sigma_y2: f64,
}

impl LatentNoiseModel {
    /// Zero features with unit variances everywhere.
    pub fn isotropic(num_workers: usize, rank: usize) -> Self {
        LatentNoiseModel {
            rank,
            worker_features: vec![vec![0.0; rank]; num_workers],
            sigma2: 1.0,
            sigma_u2: 1.0,
            sigma_v2: 1.0,
            sigma_y2: 1.0,
        }
    }

    pub fn num_workers(&self) -> usize {
        self.worker_features.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (j, row) in self.worker_features.iter().enumerate() {
            if row.len() != self.rank {
                return Err(Error::DimensionMismatch { expected: self.rank, actual: row.len() });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!("worker {j} has non-finite features")));
            }
        }
        for (name, v) in [
            ("sigma2", self.sigma2),
            ("sigma_u2", self.sigma_u2),
            ("sigma_v2", self.sigma_v2),
            ("sigma_y2", self.sigma_y2),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidData(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// Anything that can materialize the noise covariance of a worker subset.
pub trait WorkerCovariance {
    fn num_workers(&self) -> usize;

    /// Covariance block of the given workers; indices must be strictly
    /// ascending and in range.
    fn submatrix(&self, workers: &[usize]) -> Result<SymMatrix>;
}

impl WorkerCovariance for FullCovModel {
    fn num_workers(&self) -> usize {
        self.covariance.order()
    }

    fn submatrix(&self, workers: &[usize]) -> Result<SymMatrix> {
        gather_submatrix(&self.covariance, workers)
    }
}

impl WorkerCovariance for LatentNoiseModel {
    fn num_workers(&self) -> usize {
        self.worker_features.len()
    }

    fn submatrix(&self, workers: &[usize]) -> Result<SymMatrix> {
        check_ascending(workers, self.num_workers())?;
        let k = workers.len();
        let mut sigma = SymMatrix::scaled_identity(k, self.sigma2);
        for (a, &ja) in workers.iter().enumerate() {
            let row_a = &self.worker_features[ja];
            for (b, &jb) in workers.iter().enumerate().skip(a) {
                let row_b = &self.worker_features[jb];
                let mut dot = 0.0;
                for (x, y) in row_a.iter().zip(row_b.iter()) {
                    dot += x * y;
                }
                let v = sigma.get(a, b) + self.sigma_u2 * dot;
                sigma.set(a, b, v);
            }
        }
        Ok(sigma)
    }
}

pub(crate) fn check_ascending(workers: &[usize], bound: usize) -> Result<()> {
    for w in workers.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::InvalidData(format!(
                "worker indices must be strictly ascending, got {} before {}",
                w[0], w[1]
            )));
        }
    }
    if let Some(&last) = workers.last() {
        if last >= bound {
            return Err(Error::IndexOutOfRange { index: last, bound });
        }
    }
    Ok(())
}

/// Generalized least squares estimate of one task's truth.
///
/// Solves against the covariance block of the observing workers rather
/// than inverting it. Correlated workers are effectively down-weighted as
/// a group; with a diagonal block this reduces exactly to the
/// inverse-variance weighted mean.
pub fn aggregate_icov<C: WorkerCovariance + ?Sized>(
    values: &[f64],
    workers: &[usize],
    cov: &C,
) -> Result<f64> {
    if values.len() != workers.len() {
        return Err(Error::DimensionMismatch { expected: workers.len(), actual: values.len() });
    }
    if values.is_empty() {
        return Err(Error::InvalidData("cannot aggregate a task with no observations".into()));
    }
    let sigma = cov.submatrix(workers)?;
    let factor = cholesky(&sigma)?;
    let solved_x = factor.solve(values)?;
    let ones = vec![1.0; values.len()];
    let solved_1 = factor.solve(&ones)?;
    let num: f64 = solved_x.iter().sum();
    let den: f64 = solved_1.iter().sum();
    Ok(num / den)
}

/// Joint log-likelihood of all tasks under a covariance source.
fn loglik_icov<C: WorkerCovariance>(data: &ObservationSet, y: &[f64], cov: &C) -> Result<f64> {
    let mut ll = 0.0;
    for i in 0..data.num_tasks() {
        let block = data.task_entries(i);
        if block.is_empty() {
            continue;
        }
        let workers: Vec<usize> = block.iter().map(|e| e.worker).collect();
        let delta: Vec<f64> = block.iter().map(|e| e.value - y[i]).collect();
        let sigma = cov.submatrix(&workers)?;
        let factor = cholesky(&sigma)?;
        let solved = factor.solve(&delta)?;
        let quad: f64 = delta.iter().zip(solved.iter()).map(|(a, b)| a * b).sum();
        ll += -0.5 * (block.len() as f64 * LN_2PI + factor.logdet() + quad);
    }
    Ok(ll)
}

/// Fits the full worker covariance by alternating the GLS truth step with
/// a pairwise residual covariance update.
///
/// Residuals are centered per worker before the pairwise products, worker
/// pairs that never share a task keep covariance zero, and the assembled
/// matrix gets a relative diagonal jitter before factorization. The jitter
/// cannot rescue a covariance that is identically zero; that case
/// surfaces as a pivot error.
pub fn fit_icov_full(
    data: &ObservationSet,
    opts: &FitOptions,
) -> Result<(AggregationResult, FullCovModel)> {
    opts.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidData("no observations to fit".into()));
    }
    data.require_estimable()?;

    let i_count = data.num_tasks();
    let j_count = data.num_workers();
    let untrained: Vec<usize> = (0..j_count).filter(|&j| data.worker_load(j) == 0).collect();

    // Initial truths: plain task means, truths clamped where known.
    let mut y = vec![0.0; i_count];
    for i in 0..i_count {
        y[i] = match data.truth(i) {
            Some(t) => t,
            None => {
                let block = data.task_entries(i);
                block.iter().map(|e| e.value).sum::<f64>() / block.len() as f64
            }
        };
    }

    let mut sigma = SymMatrix::identity(j_count);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iters {
        iterations += 1;
        let mut delta = DeltaTracker::default();

        // Pairwise residual covariance, centered per worker.
        let mut res_mean = vec![0.0; j_count];
        for j in 0..j_count {
            let n = data.worker_load(j);
            if n > 0 {
                res_mean[j] =
                    data.worker_entries(j).map(|e| e.value - y[e.task]).sum::<f64>() / n as f64;
            }
        }
        let mut sums = vec![0.0; j_count * j_count];
        let mut counts = vec![0u32; j_count * j_count];
        for i in 0..i_count {
            let block = data.task_entries(i);
            for a in block {
                let ra = a.value - y[i] - res_mean[a.worker];
                for b in block {
                    if b.worker < a.worker {
                        continue;
                    }
                    let rb = b.value - y[i] - res_mean[b.worker];
                    sums[a.worker * j_count + b.worker] += ra * rb;
                    counts[a.worker * j_count + b.worker] += 1;
                }
            }
        }
        let mut new_sigma = SymMatrix::zeros(j_count);
        for a in 0..j_count {
            for b in a..j_count {
                let c = counts[a * j_count + b];
                if c > 0 {
                    new_sigma.set(a, b, sums[a * j_count + b] / c as f64);
                }
            }
        }
        let jitter = COVARIANCE_JITTER * new_sigma.trace() / j_count as f64;
        new_sigma.add_diagonal(jitter);
        for a in 0..j_count {
            for b in a..j_count {
                delta.observe(sigma.get(a, b), new_sigma.get(a, b));
            }
        }
        sigma = new_sigma;
        let model = FullCovModel::new(sigma.clone());

        // GLS truth step against the fresh covariance.
        for i in 0..i_count {
            if data.truth(i).is_some() {
                continue;
            }
            let block = data.task_entries(i);
            let workers: Vec<usize> = block.iter().map(|e| e.worker).collect();
            let values: Vec<f64> = block.iter().map(|e| e.value).collect();
            let new_y = aggregate_icov(&values, &workers, &model)?;
            delta.observe(y[i], new_y);
            y[i] = new_y;
        }

        let ll = loglik_icov(data, &y, &model)?;
        if !ll.is_finite() {
            return Err(Error::NonFinite(format!("log-likelihood diverged at sweep {iterations}")));
        }
        trace.push(ll);

        if delta.max() <= opts.rel_tolerance {
            converged = true;
            break;
        }
    }

    let result = AggregationResult {
        estimates: y,
        posterior_variance: None,
        diagnostics: FitDiagnostics {
            objective_trace: trace,
            iterations,
            converged,
            floored_workers: Vec::new(),
            untrained_workers: untrained,
            mean_shift: 0.0,
        },
    };
    Ok((result, FullCovModel::new(sigma)))
}

/// Per-task log-likelihood term `-log |Sigma_w| - delta^T Sigma_w^-1 delta`
/// with `delta = x - y * 1`, the objective the stochastic fit ascends.
pub fn task_loglik(
    values: &[f64],
    workers: &[usize],
    y: f64,
    model: &LatentNoiseModel,
) -> Result<f64> {
    if values.len() != workers.len() {
        return Err(Error::DimensionMismatch { expected: workers.len(), actual: values.len() });
    }
    if values.is_empty() {
        return Err(Error::InvalidData("task log-likelihood needs at least one observation".into()));
    }
    let sigma = model.submatrix(workers)?;
    let factor = cholesky(&sigma)?;
    let delta: Vec<f64> = values.iter().map(|x| x - y).collect();
    let solved = factor.solve(&delta)?;
    let quad: f64 = delta.iter().zip(solved.iter()).map(|(a, b)| a * b).sum();
    Ok(-factor.logdet() - quad)
}

/// Gradient of [`task_loglik`] in the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGrad {
    /// One row per observing worker, aligned with the `workers` argument:
    /// the derivative in that worker's feature row.
    pub v_rows: Vec<Vec<f64>>,
    /// Derivative in `sigma2`.
    pub sigma2: f64,
    /// Derivative in `sigma_u2`.
    pub sigma_u2: f64,
}

/// Analytic gradient of the per-task objective.
///
/// With `G = Sigma^-1 delta delta^T Sigma^-1 - Sigma^-1` the blocks are
/// `2 * sigma_u^2 * G * W` for the feature rows, `tr(G)` for `sigma2`,
/// and `tr(G W W^T)` for `sigma_u2`. Checked against
/// [`crate::numkern::fd_gradient`] in the tests.
pub fn task_grad(
    values: &[f64],
    workers: &[usize],
    y: f64,
    model: &LatentNoiseModel,
) -> Result<TaskGrad> {
    if values.len() != workers.len() {
        return Err(Error::DimensionMismatch { expected: workers.len(), actual: values.len() });
    }
    if values.is_empty() {
        return Err(Error::InvalidData("task gradient needs at least one observation".into()));
    }
    let k = values.len();
    let d = model.rank;
    let sigma = model.submatrix(workers)?;
    let factor = cholesky(&sigma)?;
    let delta: Vec<f64> = values.iter().map(|x| x - y).collect();
    let s = factor.solve(&delta)?;
    let mut g = factor.inverse();
    g.scale(-1.0);
    g.rank_one_update(&s, 1.0);

    // Rows of W are the observing workers' feature rows.
    let mut gw = vec![vec![0.0; d]; k];
    for a in 0..k {
        for b in 0..k {
            let gab = g.get(a, b);
            let row_b = &model.worker_features[workers[b]];
            for c in 0..d {
                gw[a][c] += gab * row_b[c];
            }
        }
    }
    let mut sigma_u2_grad = 0.0;
    for a in 0..k {
        let row_a = &model.worker_features[workers[a]];
        for c in 0..d {
            sigma_u2_grad += gw[a][c] * row_a[c];
        }
    }
    let v_rows = gw
        .into_iter()
        .map(|row| row.into_iter().map(|v| 2.0 * model.sigma_u2 * v).collect())
        .collect();
    Ok(TaskGrad { v_rows, sigma2: g.trace(), sigma_u2: sigma_u2_grad })
}

/// Stochastic-ascent controls for [`fit_latent_ml`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SgdOptions {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Tasks processed between refreshes of the truth estimates; `None`
    /// refreshes once per epoch.
    pub y_refresh_period: Option<usize>,
}

impl Default for SgdOptions {
    fn default() -> Self {
        SgdOptions { learning_rate: 1e-3, epochs: 50, y_refresh_period: None }
    }
}

impl SgdOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be positive and finite".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.y_refresh_period == Some(0) {
            return Err(Error::InvalidConfig("y_refresh_period must be at least 1".into()));
        }
        Ok(())
    }
}

/// Fits the latent covariance by stochastic gradient ascent over tasks.
///
/// Tasks are visited in a seeded shuffle each epoch. The scale parameters
/// move in log space so they stay positive, with `opts.variance_floor` as
/// the lower bound. Truth estimates are refreshed by GLS against the
/// current model every `y_refresh_period` tasks. The diagnostics trace
/// holds the per-epoch mean of the task objective.
pub fn fit_latent_ml(
    data: &ObservationSet,
    rank: usize,
    sgd: &SgdOptions,
    opts: &FitOptions,
) -> Result<(AggregationResult, LatentNoiseModel)> {
    opts.validate()?;
    sgd.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidData("no observations to fit".into()));
    }
    data.require_estimable()?;

    let i_count = data.num_tasks();
    let j_count = data.num_workers();
    let untrained: Vec<usize> = (0..j_count).filter(|&j| data.worker_load(j) == 0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut y = vec![0.0; i_count];
    for i in 0..i_count {
        y[i] = match data.truth(i) {
            Some(t) => t,
            None => {
                let block = data.task_entries(i);
                block.iter().map(|e| e.value).sum::<f64>() / block.len() as f64
            }
        };
    }

    // Pooled residual variance around the initial truths seeds sigma2.
    let pooled: f64 = data
        .entries()
        .iter()
        .map(|e| {
            let r = e.value - y[e.task];
            r * r
        })
        .sum::<f64>()
        / data.num_entries() as f64;

    let mut model = LatentNoiseModel {
        rank,
        worker_features: (0..j_count)
            .map(|_| {
                (0..rank)
                    .map(|_| FEATURE_INIT_STD * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect(),
        sigma2: pooled.max(opts.variance_floor),
        sigma_u2: 1.0,
        sigma_v2: 1.0,
        sigma_y2: 1.0,
    };
    let mut log_sigma2 = libm::log(model.sigma2);
    let mut log_sigma_u2 = libm::log(model.sigma_u2);

    let refresh_period = sgd.y_refresh_period.unwrap_or(i_count).max(1);
    let refresh = |y: &mut [f64], model: &LatentNoiseModel| -> Result<()> {
        for i in 0..i_count {
            if data.truth(i).is_some() {
                continue;
            }
            let block = data.task_entries(i);
            if block.is_empty() {
                continue;
            }
            let workers: Vec<usize> = block.iter().map(|e| e.worker).collect();
            let values: Vec<f64> = block.iter().map(|e| e.value).collect();
            y[i] = aggregate_icov(&values, &workers, model)?;
        }
        Ok(())
    };

    let mut order: Vec<usize> = (0..i_count).collect();
    let mut trace: Vec<f64> = Vec::new();
    let mut since_refresh = 0usize;
    let lr = sgd.learning_rate;

    for epoch in 0..sgd.epochs {
        order.shuffle(&mut rng);
        let mut objective_sum = 0.0;
        let mut objective_count = 0usize;

        for &i in &order {
            let block = data.task_entries(i);
            if block.is_empty() {
                continue;
            }
            let workers: Vec<usize> = block.iter().map(|e| e.worker).collect();
            let values: Vec<f64> = block.iter().map(|e| e.value).collect();

            objective_sum += task_loglik(&values, &workers, y[i], &model)?;
            objective_count += 1;

            let grad = task_grad(&values, &workers, y[i], &model)?;
            for (row, &j) in grad.v_rows.iter().zip(workers.iter()) {
                let features = &mut model.worker_features[j];
                for (fv, gv) in features.iter_mut().zip(row.iter()) {
                    *fv += lr * gv;
                }
            }
            // Log-space step: d/d log s = s * d/d s keeps both scales
            // positive.
            log_sigma2 += lr * model.sigma2 * grad.sigma2;
            log_sigma_u2 += lr * model.sigma_u2 * grad.sigma_u2;
            model.sigma2 = libm::exp(log_sigma2).max(opts.variance_floor);
            model.sigma_u2 = libm::exp(log_sigma_u2).max(opts.variance_floor);
            log_sigma2 = libm::log(model.sigma2);
            log_sigma_u2 = libm::log(model.sigma_u2);

            since_refresh += 1;
            if since_refresh >= refresh_period {
                refresh(&mut y, &model)?;
                since_refresh = 0;
            }
        }

        let epoch_mean = objective_sum / objective_count as f64;
        if !epoch_mean.is_finite() {
            return Err(Error::NonFinite(format!(
                "task objective diverged in epoch {}; last finite epoch was {}",
                epoch + 1,
                trace.len()
            )));
        }
        trace.push(epoch_mean);
    }

    refresh(&mut y, &model)?;

    let converged = match trace.as_slice() {
        [.., a, b] => libm::fabs(b - a) / (1.0 + libm::fabs(*a)) <= opts.rel_tolerance,
        _ => false,
    };
    let result = AggregationResult {
        estimates: y,
        posterior_variance: None,
        diagnostics: FitDiagnostics {
            objective_trace: trace,
            iterations: sgd.epochs,
            converged,
            floored_workers: Vec::new(),
            untrained_workers: untrained,
            mean_shift: 0.0,
        },
    };
    Ok((result, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticConfig};
    use crate::ind_ml::{aggregate_ind, IndependentNoiseModel};
    use crate::numkern::fd_gradient;
    use alloc::collections::BTreeMap;
    use rand::Rng;

    /// Plain Gaussian elimination, kept independent of the Cholesky path
    /// so it can serve as an oracle.
    fn solve_dense(matrix: &SymMatrix, rhs: &[f64]) -> Vec<f64> {
        let n = matrix.order();
        let mut a: Vec<Vec<f64>> = matrix.to_rows();
        let mut b = rhs.to_vec();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&r, &s| a[r][col].abs().partial_cmp(&a[s][col].abs()).unwrap())
                .unwrap();
            a.swap(col, pivot);
            b.swap(col, pivot);
            for r in (col + 1)..n {
                let f = a[r][col] / a[col][col];
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let mut s = b[r];
            for c in (r + 1)..n {
                s -= a[r][c] * x[c];
            }
            x[r] = s / a[r][r];
        }
        x
    }

    fn two_by_two(rows: [[f64; 2]; 2]) -> FullCovModel {
        FullCovModel::new(
            SymMatrix::from_rows(&[rows[0].to_vec(), rows[1].to_vec()]).unwrap(),
        )
    }

    #[test]
    fn diagonal_covariance_reduces_to_inverse_variance() {
        // Power-of-two variances keep both arithmetic paths exact, so the
        // reduction is an equality, not an approximation.
        let mut cov = SymMatrix::zeros(3);
        cov.set(0, 0, 0.25);
        cov.set(1, 1, 1.0);
        cov.set(2, 2, 4.0);
        let model = FullCovModel::new(cov);
        let ind = IndependentNoiseModel {
            worker_variances: vec![0.25, 1.0, 4.0],
            prior_variance: 1.0,
        };
        let values = [1.5, -0.75, 2.0];
        let via_cov = aggregate_icov(&values, &[0, 1, 2], &model).unwrap();
        let (via_ind, _) = aggregate_ind(&values, &[0, 1, 2], &ind).unwrap();
        assert_eq!(via_cov, via_ind);
    }

    #[test]
    fn symmetric_correlation_splits_the_difference() {
        let model = two_by_two([[1.0, 0.5], [0.5, 1.0]]);
        let est = aggregate_icov(&[0.0, 4.0], &[0, 1], &model).unwrap();
        assert!((est - 2.0).abs() < 1e-14);
    }

    #[test]
    fn unequal_variances_tilt_the_estimate() {
        // Sigma = [[1, 0.5], [0.5, 4]] gives weights proportional to
        // (3.5, 0.5), so the estimate of (0, 3) is 1.5 / 4.
        let model = two_by_two([[1.0, 0.5], [0.5, 4.0]]);
        let est = aggregate_icov(&[0.0, 3.0], &[0, 1], &model).unwrap();
        assert!((est - 0.375).abs() < 1e-14);
    }

    #[test]
    fn aggregate_rejects_singular_blocks() {
        let model = two_by_two([[1.0, 1.0], [1.0, 1.0]]);
        assert!(matches!(
            aggregate_icov(&[1.0, 2.0], &[0, 1], &model),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn perfectly_correlated_workers_are_recovered() {
        // Both workers observe every task and their residuals are
        // proportional, so the off-diagonal must come out at the geometric
        // mean of the variances.
        let mut entries = Vec::new();
        let mut truth = BTreeMap::new();
        for i in 0..50 {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            entries.push((i, 0usize, sign * 1.0));
            entries.push((i, 1usize, sign * 2.0));
            truth.insert(i, 0.0);
        }
        let obs: Vec<crate::dataset::Observation> = entries
            .iter()
            .map(|&(task, worker, value)| crate::dataset::Observation { task, worker, value })
            .collect();
        let data = ObservationSet::with_truth(50, 2, obs, truth).unwrap();
        let (_, model) = fit_icov_full(&data, &FitOptions::default()).unwrap();
        let sigma = &model.covariance;
        assert!((sigma.get(0, 0) - 1.0).abs() < 1e-6);
        assert!((sigma.get(1, 1) - 4.0).abs() < 1e-6);
        assert!((sigma.get(0, 1) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn disjoint_workers_stay_uncorrelated() {
        let mut triples = Vec::new();
        for i in 0..20 {
            if i % 2 == 0 {
                triples.push((i, 0usize, i as f64 % 3.0));
                triples.push((i, 1usize, -(i as f64 % 3.0)));
            } else {
                triples.push((i, 2usize, i as f64 % 5.0));
                triples.push((i, 3usize, 1.0 - i as f64 % 5.0));
            }
        }
        let data = ObservationSet::from_triples(20, 4, &triples).unwrap();
        let (_, model) = fit_icov_full(&data, &FitOptions::default()).unwrap();
        assert_eq!(model.covariance.get(0, 2), 0.0);
        assert_eq!(model.covariance.get(0, 3), 0.0);
        assert_eq!(model.covariance.get(1, 2), 0.0);
    }

    #[test]
    fn single_worker_covariance_is_its_residual_variance() {
        // Truths are clamped at zero and the residuals are symmetric, so
        // centering changes nothing: the 1x1 covariance equals the mean
        // squared residual.
        let mut truth = BTreeMap::new();
        for i in 0..4 {
            truth.insert(i, 0.0);
        }
        let obs: Vec<crate::dataset::Observation> = [1.0, -1.0, 2.0, -2.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| crate::dataset::Observation { task: i, worker: 0, value: v })
            .collect();
        let data = ObservationSet::with_truth(4, 1, obs, truth).unwrap();
        let (_, model) = fit_icov_full(&data, &FitOptions::default()).unwrap();
        assert!((model.covariance.get(0, 0) - 2.5).abs() < 1e-6);
    }

    #[test]
    fn task_loglik_hand_values() {
        let model = LatentNoiseModel::isotropic(2, 0);
        // Unit variance, zero residual: -log 1 - 0.
        assert_eq!(task_loglik(&[0.0], &[0], 0.0, &model).unwrap(), 0.0);
        // Residual 2 under unit variance: 0 - 4.
        assert_eq!(task_loglik(&[2.0], &[0], 0.0, &model).unwrap(), -4.0);
    }

    #[test]
    fn task_loglik_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let k = rng.gen_range(1..=6);
            let d = rng.gen_range(0..=3);
            let model = random_model(&mut rng, 8, d);
            let workers: Vec<usize> = (0..8).filter(|_| rng.gen_bool(0.6)).take(k).collect();
            if workers.is_empty() {
                continue;
            }
            let values: Vec<f64> = workers.iter().map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y = rng.gen_range(-1.0..1.0);

            let sigma = model.submatrix(&workers).unwrap();
            let delta: Vec<f64> = values.iter().map(|x| x - y).collect();
            let solved = solve_dense(&sigma, &delta);
            let quad: f64 = delta.iter().zip(solved.iter()).map(|(a, b)| a * b).sum();
            let logdet = crate::numkern::spd_logdet(&sigma).unwrap();
            let expected = -logdet - quad;

            let got = task_loglik(&values, &workers, y, &model).unwrap();
            assert!((got - expected).abs() < 1e-9, "oracle {expected} vs {got}");
        }
    }

    fn random_model(rng: &mut ChaCha8Rng, workers: usize, rank: usize) -> LatentNoiseModel {
        LatentNoiseModel {
            rank,
            worker_features: (0..workers)
                .map(|_| (0..rank).map(|_| rng.gen_range(-0.8..0.8)).collect())
                .collect(),
            sigma2: rng.gen_range(0.3..2.0),
            sigma_u2: rng.gen_range(0.3..2.0),
            sigma_v2: 1.0,
            sigma_y2: 1.0,
        }
    }

    #[test]
    fn zero_residual_gradient_matches_closed_form() {
        // With delta = 0 the gradient in sigma2 is -tr(Sigma^-1), which is
        // -k / sigma2 for an isotropic model.
        let mut model = LatentNoiseModel::isotropic(3, 2);
        model.sigma2 = 0.5;
        let grad = task_grad(&[1.0, 1.0, 1.0], &[0, 1, 2], 1.0, &model).unwrap();
        assert!((grad.sigma2 + 3.0 / 0.5).abs() < 1e-12);
        assert!(grad.v_rows.iter().all(|row| row.iter().all(|v| v.abs() < 1e-12)));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let k = rng.gen_range(2..=6);
            let d = rng.gen_range(1..=3);
            let model = random_model(&mut rng, k, d);
            let workers: Vec<usize> = (0..k).collect();
            let values: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y = rng.gen_range(-1.0..1.0);

            let grad = task_grad(&values, &workers, y, &model).unwrap();

            // Pack (feature rows, sigma2, sigma_u2) into one vector for the
            // oracle.
            let mut x0 = Vec::new();
            for &j in &workers {
                x0.extend_from_slice(&model.worker_features[j]);
            }
            x0.push(model.sigma2);
            x0.push(model.sigma_u2);
            let objective = |params: &[f64]| {
                let mut m = model.clone();
                for (slot, &j) in workers.iter().enumerate() {
                    m.worker_features[j] =
                        params[slot * d..(slot + 1) * d].to_vec();
                }
                m.sigma2 = params[k * d];
                m.sigma_u2 = params[k * d + 1];
                task_loglik(&values, &workers, y, &m).unwrap()
            };
            let fd = fd_gradient(objective, &x0, 1e-5).unwrap();

            let mut flat = Vec::new();
            for row in &grad.v_rows {
                flat.extend_from_slice(row);
            }
            flat.push(grad.sigma2);
            flat.push(grad.sigma_u2);
            for (a, b) in flat.iter().zip(fd.iter()) {
                assert!(
                    (a - b).abs() <= 1e-4 * b.abs().max(1e-3),
                    "analytic {a} vs finite difference {b}"
                );
            }
        }
    }

    #[test]
    fn rank_zero_fit_reduces_to_task_means() {
        let cfg = SyntheticConfig {
            num_tasks: 40,
            num_workers: 12,
            workers_per_task: 5,
            alpha: 1.0,
            sigma_y: 1.0,
            latent_rank: 0,
            seed: 13,
        };
        let data = generate_synthetic(&cfg).unwrap().without_ground_truth();
        let sgd = SgdOptions { epochs: 5, ..SgdOptions::default() };
        let (result, model) = fit_latent_ml(&data, 0, &sgd, &FitOptions::default()).unwrap();
        assert_eq!(model.rank, 0);
        for i in 0..data.num_tasks() {
            let block = data.task_entries(i);
            let mean = block.iter().map(|e| e.value).sum::<f64>() / block.len() as f64;
            assert!((result.estimates[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_objective_improves_and_is_deterministic() {
        let cfg = SyntheticConfig {
            num_tasks: 150,
            num_workers: 20,
            workers_per_task: 6,
            alpha: 0.0,
            sigma_y: 1.0,
            latent_rank: 2,
            seed: 19,
        };
        let data = generate_synthetic(&cfg).unwrap().without_ground_truth();
        let sgd = SgdOptions { epochs: 20, learning_rate: 5e-3, ..SgdOptions::default() };
        let opts = FitOptions { seed: 4, ..FitOptions::default() };
        let (a_result, a_model) = fit_latent_ml(&data, 2, &sgd, &opts).unwrap();
        let (b_result, b_model) = fit_latent_ml(&data, 2, &sgd, &opts).unwrap();
        assert_eq!(a_model, b_model);
        assert_eq!(a_result.estimates, b_result.estimates);
        let trace = &a_result.diagnostics.objective_trace;
        assert!(
            trace.last().unwrap() > trace.first().unwrap(),
            "objective failed to improve: {trace:?}"
        );
    }

    #[test]
    fn latent_fit_concentrates_spectrum_on_true_rank() {
        let cfg = SyntheticConfig {
            num_tasks: 2000,
            num_workers: 20,
            workers_per_task: 10,
            alpha: 0.0,
            sigma_y: 1.0,
            latent_rank: 2,
            seed: 23,
        };
        let data = generate_synthetic(&cfg).unwrap().without_ground_truth();
        let sgd = SgdOptions { epochs: 30, learning_rate: 2e-3, ..SgdOptions::default() };
        let (_, model) = fit_latent_ml(&data, 2, &sgd, &FitOptions::default()).unwrap();
        // The top-2 eigenvalue mass of sigma_u^2 V V^T + sigma^2 I is the
        // whole factor part plus two floor units; rank-2 structure should
        // dominate the isotropic floor.
        let frob: f64 = model
            .worker_features
            .iter()
            .flat_map(|row| row.iter())
            .map(|v| v * v)
            .sum();
        let factor_mass = model.sigma_u2 * frob;
        let top2 = factor_mass + 2.0 * model.sigma2;
        let total = factor_mass + 20.0 * model.sigma2;
        assert!(
            top2 / total >= 0.8,
            "top-2 mass {} of {} is below 0.8",
            top2,
            total
        );
    }

    #[test]
    fn fit_rejects_bad_options() {
        let data = ObservationSet::from_triples(1, 1, &[(0, 0, 1.0)]).unwrap();
        let bad_sgd = SgdOptions { learning_rate: 0.0, ..SgdOptions::default() };
        assert!(fit_latent_ml(&data, 1, &bad_sgd, &FitOptions::default()).is_err());
        let bad_sgd = SgdOptions { y_refresh_period: Some(0), ..SgdOptions::default() };
        assert!(fit_latent_ml(&data, 1, &bad_sgd, &FitOptions::default()).is_err());
    }
}
