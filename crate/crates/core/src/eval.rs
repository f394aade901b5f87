//! Synthetic benchmarks: multi-seed sweeps over the generator grid and
//! train/holdout evaluation.
//!
//! A sweep crosses every aggregation method with a grid of generator
//! settings, fits each method on freshly drawn instances with the ground
//! truth stripped, and scores root-mean-square error against the withheld
//! truths. Instance `k` of every cell uses seed `base.seed + k`, so
//! methods see identical data and their scores are paired.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::cov_ml::{fit_latent_ml, SgdOptions};
use crate::dataset::{generate_synthetic, Observation, ObservationSet, SyntheticConfig};
use crate::error::{Error, Result};
use crate::ind_ml::{aggregate_ind, fit_ind_ml};
use crate::ind_vb::fit_ind_vb;
use crate::latent_vb::{fit_latent_vb, predict_closed_form, predict_via_icov};
use crate::types::FitOptions;

/// The aggregation methods the benchmarks compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Method {
    /// Plain per-task mean.
    Average,
    /// Independent noise, maximum likelihood.
    IndMl,
    /// Independent noise, variational Bayes.
    IndVb,
    /// Latent low-rank covariance, stochastic maximum likelihood.
    LatentMl,
    /// Latent low-rank covariance, variational Bayes.
    LatentVb,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::Average, Method::IndMl, Method::IndVb, Method::LatentMl, Method::LatentVb];

    pub fn name(self) -> &'static str {
        match self {
            Method::Average => "average",
            Method::IndMl => "ind_ml",
            Method::IndVb => "ind_vb",
            Method::LatentMl => "latent_ml",
            Method::LatentVb => "latent_vb",
        }
    }
}

impl core::fmt::Display for Method {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

/// Per-method fitting knobs used by sweeps, holdout evaluation, and the
/// command line.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct MethodParams {
    /// Fitted latent rank; only the latent methods read it.
    pub rank: usize,
    pub fit: FitOptions,
    pub sgd: SgdOptions,
}

impl Default for MethodParams {
    fn default() -> Self {
        MethodParams { rank: 3, fit: FitOptions::default(), sgd: SgdOptions::default() }
    }
}

impl MethodParams {
    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        self.sgd.validate()
    }
}

/// Root-mean-square error between estimates and truths.
pub fn rmse(estimates: &[f64], truth: &[f64]) -> Result<f64> {
    if estimates.len() != truth.len() {
        return Err(Error::DimensionMismatch { expected: truth.len(), actual: estimates.len() });
    }
    if estimates.is_empty() {
        return Err(Error::InvalidData("rmse of empty vectors".into()));
    }
    let sum: f64 = estimates.iter().zip(truth.iter()).map(|(e, t)| (e - t) * (e - t)).sum();
    Ok(libm::sqrt(sum / estimates.len() as f64))
}

/// Full-data estimates of one method; the common path of every benchmark.
pub fn method_estimates(
    data: &ObservationSet,
    method: Method,
    params: &MethodParams,
) -> Result<Vec<f64>> {
    params.validate()?;
    match method {
        Method::Average => {
            data.require_estimable()?;
            Ok((0..data.num_tasks())
                .map(|i| match data.truth(i) {
                    Some(t) => t,
                    None => {
                        let block = data.task_entries(i);
                        block.iter().map(|e| e.value).sum::<f64>() / block.len() as f64
                    }
                })
                .collect())
        }
        Method::IndMl => fit_ind_ml(data, &params.fit).map(|(r, _)| r.estimates),
        Method::IndVb => fit_ind_vb(data, &params.fit).map(|(post, _, _)| post.mean),
        Method::LatentMl => {
            fit_latent_ml(data, params.rank, &params.sgd, &params.fit).map(|(r, _)| r.estimates)
        }
        Method::LatentVb => {
            fit_latent_vb(data, params.rank, &params.fit).map(|(post, _, _)| post.estimates())
        }
    }
}

/// Grid definition for [`run_sweep`].
///
/// `alpha_grid` and `sigma_y_grid` override the corresponding generator
/// fields cell by cell; `rank_grid` is the rank given to the latent
/// fits, while the generator keeps `base.latent_rank` throughout (fitting
/// a rank other than the true one is itself an experiment of interest).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SweepSpec {
    pub methods: Vec<Method>,
    pub alpha_grid: Vec<f64>,
    pub sigma_y_grid: Vec<f64>,
    pub rank_grid: Vec<usize>,
    /// Instances per cell; instance `k` uses seed `base.seed + k`.
    pub seeds: usize,
    pub base: SyntheticConfig,
    pub fit: FitOptions,
    pub sgd: SgdOptions,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            methods: Method::ALL.to_vec(),
            alpha_grid: vec![0.0, 0.5, 1.0],
            sigma_y_grid: vec![1.0],
            rank_grid: vec![3],
            seeds: 10,
            base: SyntheticConfig::default(),
            fit: FitOptions::default(),
            sgd: SgdOptions::default(),
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("sweep needs at least one method".into()));
        }
        if self.alpha_grid.is_empty() || self.sigma_y_grid.is_empty() || self.rank_grid.is_empty()
        {
            return Err(Error::InvalidConfig("sweep grids must be non-empty".into()));
        }
        if self.seeds == 0 {
            return Err(Error::InvalidConfig("sweep needs at least one seed".into()));
        }
        self.base.validate()?;
        self.fit.validate()?;
        self.sgd.validate()
    }
}

/// One method at one grid point, aggregated over seeds.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepCell {
    pub method: Method,
    pub alpha: f64,
    pub sigma_y: f64,
    pub rank: usize,
    pub mean_rmse: f64,
    /// Standard error of the mean across seeds.
    pub stderr: f64,
    /// 95% confidence half-width, `1.96 * stderr`.
    pub ci95: f64,
    /// Seeds whose fit failed; their scores are excluded from the mean.
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    /// Cells as CSV, one row per (grid point, method).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,alpha,sigma_y,D,mean_rmse,stderr,ci95,failed\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.method, c.alpha, c.sigma_y, c.rank, c.mean_rmse, c.stderr, c.ci95, c.failed
            ));
        }
        out
    }
}

/// Mean and standard error of the mean; NaN mean for an empty slice.
fn mean_and_stderr(scores: &[f64]) -> (f64, f64) {
    if scores.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    if scores.len() == 1 {
        return (mean, 0.0);
    }
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var / n))
}

/// Runs the full benchmark grid.
///
/// Every cell fits on data with the generator truths stripped; the
/// truths only score the result. Fit failures are counted in the cell
/// and excluded from its mean rather than aborting the sweep. The result
/// depends only on the grid definition, not on method order or any
/// global state.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepResult> {
    spec.validate()?;
    let mut cells = Vec::new();
    for &alpha in &spec.alpha_grid {
        for &sigma_y in &spec.sigma_y_grid {
            for &rank in &spec.rank_grid {
                let mut scores: Vec<Vec<f64>> = vec![Vec::new(); spec.methods.len()];
                let mut failed = vec![0usize; spec.methods.len()];
                for k in 0..spec.seeds {
                    let cfg = SyntheticConfig {
                        alpha,
                        sigma_y,
                        seed: spec.base.seed + k as u64,
                        ..spec.base.clone()
                    };
                    let drawn = generate_synthetic(&cfg)?;
                    let truth: Vec<f64> =
                        (0..drawn.num_tasks()).map(|i| drawn.truth(i).unwrap()).collect();
                    let data = drawn.without_ground_truth();
                    let params =
                        MethodParams { rank, fit: spec.fit.clone(), sgd: spec.sgd.clone() };
                    for (slot, &method) in spec.methods.iter().enumerate() {
                        match method_estimates(&data, method, &params) {
                            Ok(est) => scores[slot].push(rmse(&est, &truth)?),
                            Err(_) => failed[slot] += 1,
                        }
                    }
                }
                for (slot, &method) in spec.methods.iter().enumerate() {
                    let (mean_rmse, stderr) = mean_and_stderr(&scores[slot]);
                    cells.push(SweepCell {
                        method,
                        alpha,
                        sigma_y,
                        rank,
                        mean_rmse,
                        stderr,
                        ci95: 1.96 * stderr,
                        failed: failed[slot],
                    });
                }
            }
        }
    }
    Ok(SweepResult { cells })
}

/// Holdout evaluation outcome.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HoldoutReport {
    /// RMSE over the scored test tasks.
    pub rmse: f64,
    /// Test observations dropped because their worker never appears in
    /// the training set.
    pub dropped_observations: usize,
    /// Test tasks scored.
    pub scored_tasks: usize,
}

/// Fits on `train` and predicts the held-out tasks of `test`.
///
/// Both sets must share one task index space (equal counts) and one
/// worker population; a task with observations in both sets violates the
/// holdout. Observations by workers absent from training carry no
/// learned parameters and are dropped before prediction; a test task
/// left without observations, or without a recorded truth, is an error.
pub fn evaluate_holdout(
    train: &ObservationSet,
    test: &ObservationSet,
    method: Method,
    params: &MethodParams,
) -> Result<HoldoutReport> {
    params.validate()?;
    if train.num_tasks() != test.num_tasks() {
        return Err(Error::DimensionMismatch {
            expected: train.num_tasks(),
            actual: test.num_tasks(),
        });
    }
    if train.num_workers() != test.num_workers() {
        return Err(Error::DimensionMismatch {
            expected: train.num_workers(),
            actual: test.num_workers(),
        });
    }
    if test.is_empty() {
        return Err(Error::InvalidData("empty test set".into()));
    }
    for i in 0..train.num_tasks() {
        if !train.task_entries(i).is_empty() && !test.task_entries(i).is_empty() {
            return Err(Error::InvalidData(format!(
                "task {i} appears in both the training and the test set"
            )));
        }
    }

    // The estimators require every task to carry data or truth, so the
    // fit sees the training tasks compacted into their own index space.
    // Predictions depend only on worker-side parameters, which the
    // re-indexing leaves untouched.
    let kept: Vec<usize> = (0..train.num_tasks())
        .filter(|&i| !train.task_entries(i).is_empty() || train.truth(i).is_some())
        .collect();
    if kept.is_empty() {
        return Err(Error::InvalidData("empty training set".into()));
    }
    let mut remap = vec![usize::MAX; train.num_tasks()];
    for (new, &old) in kept.iter().enumerate() {
        remap[old] = new;
    }
    let entries: Vec<Observation> = train
        .entries()
        .iter()
        .map(|e| Observation { task: remap[e.task], worker: e.worker, value: e.value })
        .collect();
    let truths: BTreeMap<usize, f64> =
        kept.iter().filter_map(|&old| train.truth(old).map(|t| (remap[old], t))).collect();
    let train = &ObservationSet::with_truth(kept.len(), train.num_workers(), entries, truths)?;

    // Fit once on the training data; prediction reuses the learned
    // parameters task by task.
    enum Fitted {
        Average,
        IndMl(crate::ind_ml::IndependentNoiseModel),
        IndVb { model: crate::ind_ml::IndependentNoiseModel, shift: f64 },
        LatentMl(crate::cov_ml::LatentNoiseModel),
        LatentVb { post: crate::latent_vb::LatentPosteriorState, model: crate::cov_ml::LatentNoiseModel },
    }
    let fitted = match method {
        Method::Average => Fitted::Average,
        Method::IndMl => Fitted::IndMl(fit_ind_ml(train, &params.fit)?.1),
        Method::IndVb => {
            let (post, model, _) = fit_ind_vb(train, &params.fit)?;
            Fitted::IndVb { model, shift: post.shift }
        }
        Method::LatentMl => {
            Fitted::LatentMl(fit_latent_ml(train, params.rank, &params.sgd, &params.fit)?.1)
        }
        Method::LatentVb => {
            let (post, model, _) = fit_latent_vb(train, params.rank, &params.fit)?;
            Fitted::LatentVb { post, model }
        }
    };

    let mut dropped = 0usize;
    let mut predictions = Vec::new();
    let mut truths = Vec::new();
    for i in 0..test.num_tasks() {
        let block = test.task_entries(i);
        if block.is_empty() {
            continue;
        }
        let truth = test.truth(i).ok_or_else(|| {
            Error::InvalidData(format!("test task {i} has no truth to score against"))
        })?;
        let mut values = Vec::with_capacity(block.len());
        let mut workers = Vec::with_capacity(block.len());
        for e in block {
            if train.worker_load(e.worker) == 0 {
                dropped += 1;
            } else {
                values.push(e.value);
                workers.push(e.worker);
            }
        }
        if values.is_empty() {
            return Err(Error::InvalidData(format!(
                "every observation of test task {i} is by an untrained worker"
            )));
        }
        let pred = match &fitted {
            Fitted::Average => values.iter().sum::<f64>() / values.len() as f64,
            Fitted::IndMl(model) => aggregate_ind(&values, &workers, model)?.0,
            Fitted::IndVb { model, shift } => {
                let mut precision = 1.0 / model.prior_variance;
                let mut weighted = 0.0;
                for (v, &j) in values.iter().zip(workers.iter()) {
                    precision += 1.0 / model.worker_variances[j];
                    weighted += (v - shift) / model.worker_variances[j];
                }
                weighted / precision + shift
            }
            Fitted::LatentMl(model) => predict_via_icov(&values, &workers, model)?,
            Fitted::LatentVb { post, model } => {
                predict_closed_form(&values, &workers, post, model)?
            }
        };
        predictions.push(pred);
        truths.push(truth);
    }

    Ok(HoldoutReport {
        rmse: rmse(&predictions, &truths)?,
        dropped_observations: dropped,
        scored_tasks: predictions.len(),
    })
}
