//! Options and result types shared by all fitters.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// `ln(2 * pi)`, the Gaussian normalization constant.
pub(crate) const LN_2PI: f64 = 1.8378770664093453;

/// Iteration controls shared by every iterative fit.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct FitOptions {
    /// Sweep cap.
    pub max_iters: usize,
    /// Convergence threshold on the largest `|delta| / (1 + |value|)`
    /// across all parameters.
    pub rel_tolerance: f64,
    /// Variance estimates never drop below this.
    pub variance_floor: f64,
    /// Seed for any randomized initialization or ordering.
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iters: 500,
            rel_tolerance: 1e-8,
            variance_floor: 1e-8,
            seed: 0,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.rel_tolerance > 0.0) || !self.rel_tolerance.is_finite() {
            return Err(Error::InvalidConfig("rel_tolerance must be positive and finite".into()));
        }
        if !(self.variance_floor > 0.0) || !self.variance_floor.is_finite() {
            return Err(Error::InvalidConfig("variance_floor must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Trace and flags accumulated over a fit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitDiagnostics {
    /// Objective value per sweep (log-likelihood or per-epoch mean,
    /// depending on the fitter).
    pub objective_trace: Vec<f64>,
    /// Sweeps actually run.
    pub iterations: usize,
    /// Whether the relative-change criterion was met before `max_iters`.
    pub converged: bool,
    /// Workers whose variance hit the floor at the final sweep.
    pub floored_workers: Vec<usize>,
    /// Workers with no observations; their parameters stay at
    /// initialization and carry no information.
    pub untrained_workers: Vec<usize>,
    /// Mean subtracted from the data before fitting, zero for fitters
    /// that do not center.
    pub mean_shift: f64,
}

/// Per-task output every fitter produces.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationResult {
    /// Point estimate per task, in the original data units.
    pub estimates: Vec<f64>,
    /// Posterior variance per task where the method provides one.
    pub posterior_variance: Option<Vec<f64>>,
    pub diagnostics: FitDiagnostics,
}

/// Relative change of one parameter, the quantity the convergence
/// criterion maximizes over.
#[inline]
pub(crate) fn rel_delta(old: f64, new: f64) -> f64 {
    libm::fabs(new - old) / (1.0 + libm::fabs(old))
}

/// Tracks the largest relative parameter change within a sweep.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct DeltaTracker {
    max: f64,
}

impl DeltaTracker {
    pub(crate) fn observe(&mut self, old: f64, new: f64) {
        let d = rel_delta(old, new);
        if d > self.max {
            self.max = d;
        }
    }

    pub(crate) fn max(&self) -> f64 {
        self.max
    }
}
