//! Maximum likelihood under independent worker noise.
//!
//! The model is `x_ij ~ N(y_i, sigma_j^2)`: every worker has one variance,
//! errors are independent across workers and tasks. Fitting alternates two
//! exact coordinate maximizations, so the log-likelihood never decreases:
//!
//! * truth step: `y_i` becomes the inverse-variance weighted mean of the
//!   task's observations,
//! * variance step: `sigma_j^2` becomes the mean squared residual of the
//!   worker's observations.
//!
//! Tasks with known truth keep `y_i` clamped to it. Variances are floored
//! to keep weights finite when a worker agrees perfectly with the
//! estimates; floored workers are flagged in the diagnostics.

use alloc::vec;
use alloc::vec::Vec;

use crate::dataset::ObservationSet;
use crate::error::{Error, Result};
use crate::types::{AggregationResult, DeltaTracker, FitDiagnostics, FitOptions};

use crate::types::LN_2PI;

/// Independent Gaussian noise: one variance per worker plus the prior
/// variance on truths used by the variational fit.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IndependentNoiseModel {
    /// `sigma_j^2`, strictly positive.
    pub worker_variances: Vec<f64>,
    /// Prior variance `tau^2` of the truths; ignored by the ML fit.
    pub prior_variance: f64,
}

impl IndependentNoiseModel {
    /// Unit variances for `num_workers` workers and a unit prior.
    pub fn uniform(num_workers: usize) -> Self {
        IndependentNoiseModel { worker_variances: vec![1.0; num_workers], prior_variance: 1.0 }
    }

    pub fn num_workers(&self) -> usize {
        self.worker_variances.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (j, &v) in self.worker_variances.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidData(alloc::format!(
                    "worker {j} variance must be positive and finite, got {v}"
                )));
            }
        }
        if !(self.prior_variance > 0.0) || !self.prior_variance.is_finite() {
            return Err(Error::InvalidData(alloc::format!(
                "prior variance must be positive and finite, got {}",
                self.prior_variance
            )));
        }
        Ok(())
    }
}

/// Inverse-variance weighted mean of one task's observations.
///
/// Returns the estimate together with the weight sum `sum_j 1/sigma_j^2`,
/// whose reciprocal is the estimator variance.
pub fn aggregate_ind(
    values: &[f64],
    workers: &[usize],
    model: &IndependentNoiseModel,
) -> Result<(f64, f64)> {
    if values.len() != workers.len() {
        return Err(Error::DimensionMismatch { expected: workers.len(), actual: values.len() });
    }
    if values.is_empty() {
        return Err(Error::InvalidData("cannot aggregate a task with no observations".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&x, &j) in values.iter().zip(workers.iter()) {
        let variance = *model
            .worker_variances
            .get(j)
            .ok_or(Error::IndexOutOfRange { index: j, bound: model.num_workers() })?;
        if !(variance > 0.0) {
            return Err(Error::InvalidData(alloc::format!(
                "worker {j} has non-positive variance {variance}"
            )));
        }
        let w = 1.0 / variance;
        num += w * x;
        den += w;
    }
    Ok((num / den, den))
}

/// Joint log-likelihood of the data under the model at truths `y`.
pub fn loglik_ind(data: &ObservationSet, y: &[f64], model: &IndependentNoiseModel) -> f64 {
    let mut ll = 0.0;
    for e in data.entries() {
        let v = model.worker_variances[e.worker];
        let r = e.value - y[e.task];
        ll += -0.5 * (LN_2PI + libm::log(v)) - r * r / (2.0 * v);
    }
    ll
}

/// Fits truths and worker variances by block coordinate ascent.
///
/// Every task needs at least one observation or a known truth. Workers
/// without observations keep their initial unit variance and are reported
/// as untrained.
pub fn fit_ind_ml(
    data: &ObservationSet,
    opts: &FitOptions,
) -> Result<(AggregationResult, IndependentNoiseModel)> {
    opts.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidData("no observations to fit".into()));
    }
    data.require_estimable()?;

    let i_count = data.num_tasks();
    let j_count = data.num_workers();
    let untrained: Vec<usize> = (0..j_count).filter(|&j| data.worker_load(j) == 0).collect();

    let mut variances = vec![1.0; j_count];
    let mut y = vec![0.0; i_count];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iters {
        iterations += 1;
        let mut delta = DeltaTracker::default();

        let model = IndependentNoiseModel { worker_variances: variances.clone(), prior_variance: 1.0 };
        for i in 0..i_count {
            let new_y = match data.truth(i) {
                Some(t) => t,
                None => {
                    let block = data.task_entries(i);
                    let values: Vec<f64> = block.iter().map(|e| e.value).collect();
                    let workers: Vec<usize> = block.iter().map(|e| e.worker).collect();
                    aggregate_ind(&values, &workers, &model)?.0
                }
            };
            delta.observe(y[i], new_y);
            y[i] = new_y;
        }

        for j in 0..j_count {
            let n = data.worker_load(j);
            if n == 0 {
                continue;
            }
            let ss: f64 = data.worker_entries(j).map(|e| {
                let r = e.value - y[e.task];
                r * r
            }).sum();
            let new_v = (ss / n as f64).max(opts.variance_floor);
            delta.observe(variances[j], new_v);
            variances[j] = new_v;
        }

        let model = IndependentNoiseModel { worker_variances: variances.clone(), prior_variance: 1.0 };
        let ll = loglik_ind(data, &y, &model);
        if !ll.is_finite() {
            return Err(Error::NonFinite(alloc::format!(
                "log-likelihood diverged at sweep {iterations}"
            )));
        }
        trace.push(ll);

        if delta.max() <= opts.rel_tolerance {
            converged = true;
            break;
        }
    }

    let floored: Vec<usize> = (0..j_count)
        .filter(|&j| data.worker_load(j) > 0 && variances[j] <= opts.variance_floor)
        .collect();
    let model = IndependentNoiseModel { worker_variances: variances, prior_variance: 1.0 };
    let result = AggregationResult {
        estimates: y,
        posterior_variance: None,
        diagnostics: FitDiagnostics {
            objective_trace: trace,
            iterations,
            converged,
            floored_workers: floored,
            untrained_workers: untrained,
            mean_shift: 0.0,
        },
    };
    Ok((result, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, Observation, SyntheticConfig};
    use alloc::collections::BTreeMap;

    #[test]
    fn weighted_mean_honours_variances() {
        // Variances (1, 4) on values (0, 5): weights (1, 1/4) give
        // (0 + 1.25) / 1.25 = 1.
        let model = IndependentNoiseModel {
            worker_variances: vec![1.0, 4.0],
            prior_variance: 1.0,
        };
        let (estimate, weight) = aggregate_ind(&[0.0, 5.0], &[0, 1], &model).unwrap();
        assert_eq!(estimate, 1.0);
        assert_eq!(weight, 1.25);
    }

    #[test]
    fn aggregate_rejects_empty_and_unknown_workers() {
        let model = IndependentNoiseModel::uniform(2);
        assert!(aggregate_ind(&[], &[], &model).is_err());
        assert!(matches!(
            aggregate_ind(&[1.0], &[5], &model),
            Err(Error::IndexOutOfRange { index: 5, bound: 2 })
        ));
    }

    #[test]
    fn single_sweep_with_equal_variances_is_the_plain_mean() {
        let data = ObservationSet::from_triples(
            2,
            3,
            &[(0, 0, 1.0), (0, 1, 2.0), (0, 2, 6.0), (1, 0, -1.0), (1, 2, 3.0)],
        )
        .unwrap();
        let opts = FitOptions { max_iters: 1, ..FitOptions::default() };
        let (result, _) = fit_ind_ml(&data, &opts).unwrap();
        assert_eq!(result.estimates[0], 3.0);
        assert_eq!(result.estimates[1], 1.0);
    }

    #[test]
    fn symmetric_pair_lands_in_the_middle() {
        let data = ObservationSet::from_triples(1, 2, &[(0, 0, 2.0), (0, 1, 4.0)]).unwrap();
        let (result, _) = fit_ind_ml(&data, &FitOptions::default()).unwrap();
        assert!((result.estimates[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn consensus_data_collapses_to_consensus() {
        let mut triples = Vec::new();
        for i in 0..4 {
            for j in 0..3 {
                triples.push((i, j, 7.25));
            }
        }
        let data = ObservationSet::from_triples(4, 3, &triples).unwrap();
        let (result, model) = fit_ind_ml(&data, &FitOptions::default()).unwrap();
        for &e in &result.estimates {
            assert_eq!(e, 7.25);
        }
        for &v in &model.worker_variances {
            assert_eq!(v, FitOptions::default().variance_floor);
        }
        assert_eq!(result.diagnostics.floored_workers, vec![0, 1, 2]);
        assert!(result.diagnostics.converged);
    }

    #[test]
    fn known_truths_stay_clamped() {
        let mut truth = BTreeMap::new();
        truth.insert(0usize, 10.0);
        let entries = vec![
            Observation { task: 0, worker: 0, value: 0.0 },
            Observation { task: 1, worker: 0, value: 2.0 },
            Observation { task: 1, worker: 1, value: 4.0 },
        ];
        let data = ObservationSet::with_truth(2, 2, entries, truth).unwrap();
        let (result, model) = fit_ind_ml(&data, &FitOptions::default()).unwrap();
        assert_eq!(result.estimates[0], 10.0);
        // Worker 0 erred by 10 on the clamped task, which dominates its
        // variance estimate.
        assert!(model.worker_variances[0] > 10.0);
    }

    #[test]
    fn loglik_never_decreases_across_sweeps() {
        for seed in 0..5 {
            let cfg = SyntheticConfig {
                num_tasks: 60,
                num_workers: 25,
                workers_per_task: 6,
                alpha: 1.0,
                sigma_y: 1.0,
                latent_rank: 0,
                seed,
            };
            let data = generate_synthetic(&cfg).unwrap().without_ground_truth();
            let (result, _) = fit_ind_ml(&data, &FitOptions::default()).unwrap();
            let trace = &result.diagnostics.objective_trace;
            for w in trace.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0),
                    "log-likelihood decreased: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn estimates_are_translation_equivariant() {
        let cfg = SyntheticConfig {
            num_tasks: 40,
            num_workers: 12,
            workers_per_task: 5,
            alpha: 1.0,
            sigma_y: 1.0,
            latent_rank: 0,
            seed: 3,
        };
        let data = generate_synthetic(&cfg).unwrap().without_ground_truth();
        let shifted_entries: Vec<Observation> = data
            .entries()
            .iter()
            .map(|e| Observation { value: e.value + 100.0, ..*e })
            .collect();
        let shifted =
            ObservationSet::new(data.num_tasks(), data.num_workers(), shifted_entries).unwrap();
        let (base, _) = fit_ind_ml(&data, &FitOptions::default()).unwrap();
        let (moved, _) = fit_ind_ml(&shifted, &FitOptions::default()).unwrap();
        for (a, b) in base.estimates.iter().zip(moved.estimates.iter()) {
            assert!((b - a - 100.0).abs() < 1e-6);
        }
    }

    #[test]
    fn estimates_stay_inside_the_observed_range() {
        let cfg = SyntheticConfig {
            num_tasks: 50,
            num_workers: 15,
            workers_per_task: 4,
            alpha: 0.7,
            sigma_y: 2.0,
            latent_rank: 2,
            seed: 11,
        };
        let data = generate_synthetic(&cfg).unwrap().without_ground_truth();
        let (result, _) = fit_ind_ml(&data, &FitOptions::default()).unwrap();
        for i in 0..data.num_tasks() {
            let block = data.task_entries(i);
            let lo = block.iter().map(|e| e.value).fold(f64::INFINITY, f64::min);
            let hi = block.iter().map(|e| e.value).fold(f64::NEG_INFINITY, f64::max);
            let est = result.estimates[i];
            assert!(est >= lo - 1e-12 && est <= hi + 1e-12, "estimate {est} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn fit_rejects_degenerate_inputs() {
        let empty = ObservationSet::from_triples(2, 2, &[]).unwrap();
        assert!(fit_ind_ml(&empty, &FitOptions::default()).is_err());

        let orphan_task = ObservationSet::from_triples(2, 2, &[(0, 0, 1.0)]).unwrap();
        assert!(matches!(
            fit_ind_ml(&orphan_task, &FitOptions::default()),
            Err(Error::InvalidData(_))
        ));

        let data = ObservationSet::from_triples(1, 1, &[(0, 0, 1.0)]).unwrap();
        let bad_opts = FitOptions { rel_tolerance: 0.0, ..FitOptions::default() };
        assert!(matches!(fit_ind_ml(&data, &bad_opts), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn untrained_workers_are_flagged() {
        let data = ObservationSet::from_triples(2, 3, &[(0, 0, 1.0), (1, 0, 2.0), (0, 2, 1.5)])
            .unwrap();
        let (result, model) = fit_ind_ml(&data, &FitOptions::default()).unwrap();
        assert_eq!(result.diagnostics.untrained_workers, vec![1]);
        assert_eq!(model.worker_variances[1], 1.0);
    }
}
