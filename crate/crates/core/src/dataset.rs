//! Observation storage, the synthetic benchmark generator, and the
//! multi-target stacking transform.
//!
//! An [`ObservationSet`] is a sparse task-by-worker matrix of continuous
//! judgements. Both orientations are indexed up front: per task the worker
//! block (ascending worker ids), per worker the task list. Entries are
//! immutable after construction so the two views can never drift apart.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// One judgement: `worker` assigned `value` to `task`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub task: usize,
    pub worker: usize,
    pub value: f64,
}

/// Sparse collection of continuous judgements with optional known truths.
///
/// Tasks and workers are dense indices `0..num_tasks` and `0..num_workers`;
/// either side may have indices that never occur in an entry. Ground truth
/// is a sparse map and marks tasks whose value is known exactly (estimators
/// clamp those tasks instead of inferring them).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    num_tasks: usize,
    num_workers: usize,
    /// Sorted by `(task, worker)`; this ordering is what makes the
    /// per-task worker blocks ascend.
    entries: Vec<Observation>,
    /// CSR-style offsets: entries of task `i` live in
    /// `entries[task_offsets[i]..task_offsets[i + 1]]`.
    task_offsets: Vec<usize>,
    /// Entry indices per worker, ascending by task.
    worker_entries: Vec<Vec<usize>>,
    ground_truth: BTreeMap<usize, f64>,
}

impl ObservationSet {
    /// Builds a set without ground truth.
    pub fn new(num_tasks: usize, num_workers: usize, entries: Vec<Observation>) -> Result<Self> {
        Self::with_truth(num_tasks, num_workers, entries, BTreeMap::new())
    }

    /// Builds a set, validating index ranges, finiteness, and uniqueness of
    /// `(task, worker)` pairs.
    pub fn with_truth(
        num_tasks: usize,
        num_workers: usize,
        mut entries: Vec<Observation>,
        ground_truth: BTreeMap<usize, f64>,
    ) -> Result<Self> {
        for e in &entries {
            if e.task >= num_tasks {
                return Err(Error::IndexOutOfRange { index: e.task, bound: num_tasks });
            }
            if e.worker >= num_workers {
                return Err(Error::IndexOutOfRange { index: e.worker, bound: num_workers });
            }
            if !e.value.is_finite() {
                return Err(Error::InvalidData(format!(
                    "observation ({}, {}) has non-finite value",
                    e.task, e.worker
                )));
            }
        }
        for (&task, &value) in &ground_truth {
            if task >= num_tasks {
                return Err(Error::IndexOutOfRange { index: task, bound: num_tasks });
            }
            if !value.is_finite() {
                return Err(Error::InvalidData(format!("ground truth for task {task} is non-finite")));
            }
        }
        entries.sort_unstable_by(|a, b| (a.task, a.worker).cmp(&(b.task, b.worker)));
        for w in entries.windows(2) {
            if w[0].task == w[1].task && w[0].worker == w[1].worker {
                return Err(Error::InvalidData(format!(
                    "duplicate observation for task {} and worker {}",
                    w[0].task, w[0].worker
                )));
            }
        }
        let mut task_offsets = vec![0usize; num_tasks + 1];
        for e in &entries {
            task_offsets[e.task + 1] += 1;
        }
        for i in 0..num_tasks {
            task_offsets[i + 1] += task_offsets[i];
        }
        let mut worker_entries = vec![Vec::new(); num_workers];
        for (idx, e) in entries.iter().enumerate() {
            worker_entries[e.worker].push(idx);
        }
        Ok(ObservationSet {
            num_tasks,
            num_workers,
            entries,
            task_offsets,
            worker_entries,
            ground_truth,
        })
    }

    /// Convenience constructor from `(task, worker, value)` triples.
    pub fn from_triples(
        num_tasks: usize,
        num_workers: usize,
        triples: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let entries = triples
            .iter()
            .map(|&(task, worker, value)| Observation { task, worker, value })
            .collect();
        Self::new(num_tasks, num_workers, entries)
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn num_workers(&self) -> usize {
        self.num_workers
    }

    pub fn num_entries(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All entries, sorted by `(task, worker)`.
    pub fn entries(&self) -> &[Observation] {
        &self.entries
    }

    /// Entries of one task; worker ids ascend within the block.
    pub fn task_entries(&self, task: usize) -> &[Observation] {
        &self.entries[self.task_offsets[task]..self.task_offsets[task + 1]]
    }

    /// Number of judgements task `task` received.
    pub fn task_degree(&self, task: usize) -> usize {
        self.task_offsets[task + 1] - self.task_offsets[task]
    }

    /// Entries of one worker, ascending by task.
    pub fn worker_entries(&self, worker: usize) -> impl Iterator<Item = &Observation> + '_ {
        self.worker_entries[worker].iter().map(move |&idx| &self.entries[idx])
    }

    /// Number of judgements worker `worker` produced.
    pub fn worker_load(&self, worker: usize) -> usize {
        self.worker_entries[worker].len()
    }

    /// Known truth for a task, if any.
    pub fn truth(&self, task: usize) -> Option<f64> {
        self.ground_truth.get(&task).copied()
    }

    pub fn ground_truth(&self) -> &BTreeMap<usize, f64> {
        &self.ground_truth
    }

    /// Copy of the set with the truth map removed. Benchmarks fit on this
    /// so generator truths stay evaluation-only instead of clamping every
    /// task.
    pub fn without_ground_truth(&self) -> Self {
        ObservationSet { ground_truth: BTreeMap::new(), ..self.clone() }
    }

    /// Mean of all observed values, `0.0` when there are none.
    pub fn value_mean(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.entries.iter().map(|e| e.value).sum();
        sum / self.entries.len() as f64
    }

    /// Variance of all observed values around their mean, `0.0` when there
    /// are none.
    pub fn value_variance(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        let mean = self.value_mean();
        let ss: f64 = self.entries.iter().map(|e| (e.value - mean) * (e.value - mean)).sum();
        ss / self.entries.len() as f64
    }

    /// Errors unless every task either has at least one entry or a known
    /// truth. Estimators call this before aggregating all tasks.
    pub fn require_estimable(&self) -> Result<()> {
        for i in 0..self.num_tasks {
            if self.task_degree(i) == 0 && !self.ground_truth.contains_key(&i) {
                return Err(Error::InvalidData(format!(
                    "task {i} has no observations and no known truth"
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic benchmark generator.
///
/// `alpha` blends independent worker noise against a shared low-rank
/// component; `1.0` is purely independent noise, `0.0` purely low-rank.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticConfig {
    pub num_tasks: usize,
    pub num_workers: usize,
    pub workers_per_task: usize,
    pub alpha: f64,
    pub sigma_y: f64,
    pub latent_rank: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_tasks: 1000,
            num_workers: 500,
            workers_per_task: 10,
            alpha: 0.5,
            sigma_y: 1.0,
            latent_rank: 3,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::InvalidConfig("num_tasks must be at least 1".into()));
        }
        if self.num_workers == 0 {
            return Err(Error::InvalidConfig("num_workers must be at least 1".into()));
        }
        if self.workers_per_task == 0 || self.workers_per_task > self.num_workers {
            return Err(Error::InvalidConfig(format!(
                "workers_per_task must lie in 1..={}, got {}",
                self.num_workers, self.workers_per_task
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.sigma_y >= 0.0) || !self.sigma_y.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "sigma_y must be non-negative, got {}",
                self.sigma_y
            )));
        }
        Ok(())
    }
}

/// Worker noise variance levels; rescaled by their mean so the average
/// independent variance over workers is one.
pub const VARIANCE_LEVELS: [f64; 3] = [0.164, 1.64, 16.4];

fn rescaled_levels() -> [f64; 3] {
    let mean = (VARIANCE_LEVELS[0] + VARIANCE_LEVELS[1] + VARIANCE_LEVELS[2]) / 3.0;
    [
        VARIANCE_LEVELS[0] / mean,
        VARIANCE_LEVELS[1] / mean,
        VARIANCE_LEVELS[2] / mean,
    ]
}

/// Draws a synthetic benchmark instance.
///
/// Each task gets `workers_per_task` distinct workers chosen uniformly.
/// An observation is `sigma_y * y_i + sqrt(alpha) * eps_ij +
/// sqrt(1 - alpha) * xi_ij` where `y_i ~ N(0, 1)`, `eps_ij` carries the
/// worker's independent variance, and `xi = A * B^T` is a shared rank-`D`
/// component with unit marginal variance. The scaled truths
/// `sigma_y * y_i` are stored in the ground-truth map for every task; they
/// are the evaluation targets, so benchmark fits strip them first (see
/// [`ObservationSet::without_ground_truth`]).
///
/// The draw order is fixed (truths, worker levels, `A`, `B`, then
/// per-task assignments and noise), making output a pure function of the
/// config.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<ObservationSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let i_count = cfg.num_tasks;
    let j_count = cfg.num_workers;
    let d = cfg.latent_rank;

    let y: Vec<f64> = (0..i_count).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();

    let levels = rescaled_levels();
    let worker_var: Vec<f64> = (0..j_count).map(|_| levels[rng.gen_range(0..3)]).collect();

    // Entries of both factors are N(0, 1/sqrt(D)), so each product term
    // has variance 1/D and the rank-D sum has unit variance.
    let factor_std = if d > 0 { libm::pow(d as f64, -0.25) } else { 0.0 };
    let a: Vec<f64> = (0..i_count * d)
        .map(|_| factor_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let b: Vec<f64> = (0..j_count * d)
        .map(|_| factor_std * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let ind_scale = libm::sqrt(cfg.alpha);
    let latent_scale = libm::sqrt(1.0 - cfg.alpha);
    let mut entries = Vec::with_capacity(i_count * cfg.workers_per_task);
    for i in 0..i_count {
        let mut chosen: Vec<usize> = sample(&mut rng, j_count, cfg.workers_per_task).into_vec();
        chosen.sort_unstable();
        for &j in &chosen {
            let eps = libm::sqrt(worker_var[j]) * rng.sample::<f64, _>(StandardNormal);
            let mut xi = 0.0;
            for k in 0..d {
                xi += a[i * d + k] * b[j * d + k];
            }
            let value = cfg.sigma_y * y[i] + ind_scale * eps + latent_scale * xi;
            entries.push(Observation { task: i, worker: j, value });
        }
    }

    let truth: BTreeMap<usize, f64> = y.iter().enumerate().map(|(i, &v)| (i, cfg.sigma_y * v)).collect();
    ObservationSet::with_truth(i_count, j_count, entries, truth)
}

/// Bijection between `(task, target)` pairs and stacked task indices, used
/// to run the scalar estimators on vector-valued truths.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTargetSpec {
    num_tasks: usize,
    num_targets: usize,
    /// `map[task * num_targets + target]` is the stacked index.
    map: Vec<usize>,
    /// Inverse of `map`: stacked index back to `(task, target)`.
    inverse: Vec<(usize, usize)>,
}

impl MultiTargetSpec {
    /// Canonical layout: `(task, target)` lands at `task * K + target`.
    pub fn interleaved(num_tasks: usize, num_targets: usize) -> Self {
        let map: Vec<usize> = (0..num_tasks * num_targets).collect();
        let inverse = (0..num_tasks * num_targets)
            .map(|s| (s / num_targets, s % num_targets))
            .collect();
        MultiTargetSpec { num_tasks, num_targets, map, inverse }
    }

    /// Custom layout; `map` must be a bijection onto `0..num_tasks * K`.
    pub fn from_map(num_tasks: usize, num_targets: usize, map: Vec<usize>) -> Result<Self> {
        let total = num_tasks * num_targets;
        if map.len() != total {
            return Err(Error::DimensionMismatch { expected: total, actual: map.len() });
        }
        let mut inverse = vec![(usize::MAX, usize::MAX); total];
        for (flat, &stacked) in map.iter().enumerate() {
            if stacked >= total {
                return Err(Error::IndexOutOfRange { index: stacked, bound: total });
            }
            if inverse[stacked] != (usize::MAX, usize::MAX) {
                return Err(Error::InvalidData(format!(
                    "multi-target map is not a bijection: stacked index {stacked} used twice"
                )));
            }
            inverse[stacked] = (flat / num_targets, flat % num_targets);
        }
        Ok(MultiTargetSpec { num_tasks, num_targets, map, inverse })
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn num_targets(&self) -> usize {
        self.num_targets
    }

    pub fn num_stacked(&self) -> usize {
        self.map.len()
    }

    /// Stacked task index of `(task, target)`.
    pub fn stacked_index(&self, task: usize, target: usize) -> usize {
        self.map[task * self.num_targets + target]
    }

    /// `(task, target)` pair that occupies a stacked index.
    pub fn source_of(&self, stacked: usize) -> (usize, usize) {
        self.inverse[stacked]
    }
}

/// Stacks `K` per-target observation sets into one scalar problem.
///
/// All sets must share the task count and worker population; entry
/// `(i, j)` of target `k` lands at stacked task `spec.stacked_index(i, k)`
/// with the same worker. Ground truths are carried along.
pub fn stack_multitarget(sets: &[ObservationSet], spec: &MultiTargetSpec) -> Result<ObservationSet> {
    if sets.len() != spec.num_targets() {
        return Err(Error::DimensionMismatch { expected: spec.num_targets(), actual: sets.len() });
    }
    let first = sets.first().ok_or_else(|| Error::InvalidData("no target sets given".into()))?;
    let num_workers = first.num_workers();
    let mut entries = Vec::new();
    let mut truth = BTreeMap::new();
    for (k, set) in sets.iter().enumerate() {
        if set.num_tasks() != spec.num_tasks() {
            return Err(Error::InvalidData(format!(
                "target {k} has {} tasks, expected {}",
                set.num_tasks(),
                spec.num_tasks()
            )));
        }
        if set.num_workers() != num_workers {
            return Err(Error::InvalidData(format!(
                "target {k} has an inconsistent worker population: {} vs {}",
                set.num_workers(),
                num_workers
            )));
        }
        for e in set.entries() {
            entries.push(Observation {
                task: spec.stacked_index(e.task, k),
                worker: e.worker,
                value: e.value,
            });
        }
        for (&task, &value) in set.ground_truth() {
            truth.insert(spec.stacked_index(task, k), value);
        }
    }
    ObservationSet::with_truth(spec.num_stacked(), num_workers, entries, truth)
}

/// Splits a stacked set back into its `K` per-target sets; inverse of
/// [`stack_multitarget`].
pub fn unstack_multitarget(stacked: &ObservationSet, spec: &MultiTargetSpec) -> Result<Vec<ObservationSet>> {
    if stacked.num_tasks() != spec.num_stacked() {
        return Err(Error::DimensionMismatch {
            expected: spec.num_stacked(),
            actual: stacked.num_tasks(),
        });
    }
    let mut entries: Vec<Vec<Observation>> = vec![Vec::new(); spec.num_targets()];
    let mut truths: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); spec.num_targets()];
    for e in stacked.entries() {
        let (task, target) = spec.source_of(e.task);
        entries[target].push(Observation { task, worker: e.worker, value: e.value });
    }
    for (&stacked_task, &value) in stacked.ground_truth() {
        let (task, target) = spec.source_of(stacked_task);
        truths[target].insert(task, value);
    }
    entries
        .into_iter()
        .zip(truths)
        .map(|(ent, tr)| ObservationSet::with_truth(spec.num_tasks(), stacked.num_workers(), ent, tr))
        .collect()
}

/// Regroups per-stacked-task estimates into one vector per target.
pub fn unstack_estimates(estimates: &[f64], spec: &MultiTargetSpec) -> Result<Vec<Vec<f64>>> {
    if estimates.len() != spec.num_stacked() {
        return Err(Error::DimensionMismatch {
            expected: spec.num_stacked(),
            actual: estimates.len(),
        });
    }
    let mut out = vec![vec![0.0; spec.num_tasks()]; spec.num_targets()];
    for (stacked, &value) in estimates.iter().enumerate() {
        let (task, target) = spec.source_of(stacked);
        out[target][task] = value;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            num_tasks: 40,
            num_workers: 15,
            workers_per_task: 5,
            alpha: 0.5,
            sigma_y: 1.0,
            latent_rank: 3,
            seed: 9,
        }
    }

    #[test]
    fn construction_validates_entries() {
        assert!(matches!(
            ObservationSet::from_triples(2, 2, &[(2, 0, 1.0)]),
            Err(Error::IndexOutOfRange { index: 2, bound: 2 })
        ));
        assert!(matches!(
            ObservationSet::from_triples(2, 2, &[(0, 3, 1.0)]),
            Err(Error::IndexOutOfRange { index: 3, bound: 2 })
        ));
        assert!(ObservationSet::from_triples(2, 2, &[(0, 0, f64::NAN)]).is_err());
        assert!(ObservationSet::from_triples(2, 2, &[(0, 0, 1.0), (0, 0, 2.0)]).is_err());
    }

    #[test]
    fn both_index_orientations_agree() {
        let set = ObservationSet::from_triples(
            3,
            3,
            &[(0, 1, 1.0), (0, 0, 2.0), (1, 2, 3.0), (2, 1, 4.0), (2, 2, 5.0)],
        )
        .unwrap();
        let workers0: Vec<usize> = set.task_entries(0).iter().map(|e| e.worker).collect();
        assert_eq!(workers0, vec![0, 1], "worker ids ascend within a task block");
        let tasks1: Vec<usize> = set.worker_entries(1).map(|e| e.task).collect();
        assert_eq!(tasks1, vec![0, 2]);
        assert_eq!(set.task_degree(1), 1);
        assert_eq!(set.worker_load(2), 2);
        let per_task: usize = (0..set.num_tasks()).map(|i| set.task_degree(i)).sum();
        let per_worker: usize = (0..set.num_workers()).map(|j| set.worker_load(j)).sum();
        assert_eq!(per_task, set.num_entries());
        assert_eq!(per_worker, set.num_entries());
    }

    #[test]
    fn generator_produces_expected_shape() {
        let cfg = SyntheticConfig {
            num_tasks: 1000,
            num_workers: 500,
            workers_per_task: 10,
            seed: 42,
            ..SyntheticConfig::default()
        };
        let set = generate_synthetic(&cfg).unwrap();
        assert_eq!(set.num_entries(), 10_000);
        assert_eq!(set.ground_truth().len(), 1000);
        for i in 0..set.num_tasks() {
            let block = set.task_entries(i);
            assert_eq!(block.len(), 10);
            for w in block.windows(2) {
                assert!(w[0].worker < w[1].worker, "workers must be distinct and ascending");
            }
        }
    }

    #[test]
    fn generator_is_deterministic_per_seed() {
        let cfg = small_cfg();
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_config_reproduces_truth_exactly() {
        // alpha = 0 removes independent noise and rank 0 removes the shared
        // component, so every observation equals the scaled truth.
        let cfg = SyntheticConfig {
            num_tasks: 30,
            num_workers: 10,
            workers_per_task: 4,
            alpha: 0.0,
            sigma_y: 2.5,
            latent_rank: 0,
            seed: 3,
        };
        let set = generate_synthetic(&cfg).unwrap();
        for e in set.entries() {
            assert_eq!(e.value, set.truth(e.task).unwrap());
        }
    }

    #[test]
    fn worker_sample_variances_cluster_at_levels() {
        let cfg = SyntheticConfig {
            num_tasks: 1000,
            num_workers: 50,
            workers_per_task: 10,
            alpha: 1.0,
            sigma_y: 1.0,
            latent_rank: 3,
            seed: 17,
        };
        let set = generate_synthetic(&cfg).unwrap();
        let levels = rescaled_levels();
        for j in 0..set.num_workers() {
            let residuals: Vec<f64> = set
                .worker_entries(j)
                .map(|e| e.value - set.truth(e.task).unwrap())
                .collect();
            let n = residuals.len();
            if n < 30 {
                continue;
            }
            let var = residuals.iter().map(|r| r * r).sum::<f64>() / n as f64;
            // Nearest level in log space must be the worker's own; the
            // levels are a factor of ten apart while the sample variance of
            // n draws wanders by roughly sqrt(2 / n) in log scale.
            let nearest = levels
                .iter()
                .min_by(|a, b| {
                    let da = libm::fabs(libm::log(var / **a));
                    let db = libm::fabs(libm::log(var / **b));
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            let within = levels.iter().any(|l| libm::fabs(libm::log(var / l)) < 0.7);
            assert!(within, "worker {j} sample variance {var} sits between levels");
            let _ = nearest;
        }
    }

    #[test]
    fn noise_variance_is_normalized_to_one() {
        for &alpha in &[0.0, 0.5, 1.0] {
            let cfg = SyntheticConfig {
                num_tasks: 1000,
                num_workers: 500,
                workers_per_task: 10,
                alpha,
                sigma_y: 1.0,
                latent_rank: 3,
                seed: 29,
            };
            let set = generate_synthetic(&cfg).unwrap();
            let mean_sq: f64 = set
                .entries()
                .iter()
                .map(|e| {
                    let r = e.value - set.truth(e.task).unwrap();
                    r * r
                })
                .sum::<f64>()
                / set.num_entries() as f64;
            assert!(
                (0.85..=1.15).contains(&mean_sq),
                "alpha {alpha}: mean noise variance {mean_sq} escaped [0.85, 1.15]"
            );
        }
    }

    #[test]
    fn independent_noise_has_diagonal_covariance() {
        let cfg = SyntheticConfig {
            num_tasks: 5000,
            num_workers: 20,
            workers_per_task: 10,
            alpha: 1.0,
            sigma_y: 1.0,
            latent_rank: 3,
            seed: 7,
        };
        let set = generate_synthetic(&cfg).unwrap();
        let j_count = set.num_workers();
        // Residuals per worker, indexed by task, for pairwise covariance.
        let mut per_worker: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); j_count];
        for e in set.entries() {
            per_worker[e.worker].insert(e.task, e.value - set.truth(e.task).unwrap());
        }
        let var: Vec<f64> = per_worker
            .iter()
            .map(|m| m.values().map(|r| r * r).sum::<f64>() / m.len() as f64)
            .collect();
        for a in 0..j_count {
            for b in (a + 1)..j_count {
                let mut n = 0usize;
                let mut cov = 0.0;
                for (task, ra) in &per_worker[a] {
                    if let Some(rb) = per_worker[b].get(task) {
                        cov += ra * rb;
                        n += 1;
                    }
                }
                assert!(n > 100, "pair ({a}, {b}) shares too few tasks to test");
                cov /= n as f64;
                // The bound is 5 standard errors because 190 pairs are
                // tested at once; genuine latent correlation would sit
                // hundreds of standard errors out.
                let se = libm::sqrt(var[a] * var[b] / n as f64);
                assert!(
                    libm::fabs(cov) <= 5.0 * se,
                    "pair ({a}, {b}) covariance {cov} exceeds 5 standard errors {se}"
                );
            }
        }
    }

    #[test]
    fn stacking_single_target_is_identity() {
        let set = generate_synthetic(&small_cfg()).unwrap();
        let spec = MultiTargetSpec::interleaved(set.num_tasks(), 1);
        let stacked = stack_multitarget(core::slice::from_ref(&set), &spec).unwrap();
        assert_eq!(stacked, set);
    }

    #[test]
    fn stacking_places_entries_by_spec() {
        let t0 = ObservationSet::from_triples(2, 5, &[(0, 1, 1.0), (1, 4, 2.0)]).unwrap();
        let t1 = ObservationSet::from_triples(2, 5, &[(1, 4, 7.0)]).unwrap();
        let spec = MultiTargetSpec::interleaved(2, 2);
        let stacked = stack_multitarget(&[t0, t1], &spec).unwrap();
        assert_eq!(stacked.num_tasks(), 4);
        // Entry (task 1, target 1, worker 4) occupies stacked task 1*2+1.
        let block = stacked.task_entries(3);
        assert_eq!(block.len(), 1);
        assert_eq!(block[0].worker, 4);
        assert_eq!(block[0].value, 7.0);
    }

    #[test]
    fn stack_then_unstack_round_trips() {
        let a = generate_synthetic(&small_cfg()).unwrap();
        let b = generate_synthetic(&SyntheticConfig { seed: 10, ..small_cfg() }).unwrap();
        let spec = MultiTargetSpec::interleaved(a.num_tasks(), 2);
        let stacked = stack_multitarget(&[a.clone(), b.clone()], &spec).unwrap();
        let back = unstack_multitarget(&stacked, &spec).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn stacking_rejects_mismatched_populations() {
        let t0 = ObservationSet::from_triples(2, 5, &[(0, 1, 1.0)]).unwrap();
        let t1 = ObservationSet::from_triples(2, 6, &[(0, 1, 1.0)]).unwrap();
        let spec = MultiTargetSpec::interleaved(2, 2);
        assert!(matches!(stack_multitarget(&[t0, t1], &spec), Err(Error::InvalidData(_))));
    }

    #[test]
    fn custom_map_must_be_bijective() {
        assert!(MultiTargetSpec::from_map(2, 2, vec![0, 1, 2, 3]).is_ok());
        assert!(matches!(
            MultiTargetSpec::from_map(2, 2, vec![0, 1, 1, 3]),
            Err(Error::InvalidData(_))
        ));
        assert!(matches!(
            MultiTargetSpec::from_map(2, 2, vec![0, 1, 2, 4]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn unstack_estimates_inverts_layout() {
        let spec = MultiTargetSpec::interleaved(3, 2);
        let estimates: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let per_target = unstack_estimates(&estimates, &spec).unwrap();
        assert_eq!(per_target, vec![vec![0.0, 2.0, 4.0], vec![1.0, 3.0, 5.0]]);
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let good = small_cfg();
        assert!(good.validate().is_ok());
        assert!(SyntheticConfig { workers_per_task: 0, ..good.clone() }.validate().is_err());
        assert!(SyntheticConfig { workers_per_task: 16, ..good.clone() }.validate().is_err());
        assert!(SyntheticConfig { alpha: 1.5, ..good.clone() }.validate().is_err());
        // A zero truth scale is a legitimate degenerate generator.
        assert!(SyntheticConfig { sigma_y: 0.0, ..good.clone() }.validate().is_ok());
        assert!(SyntheticConfig { sigma_y: -0.5, ..good }.validate().is_err());
    }
}
