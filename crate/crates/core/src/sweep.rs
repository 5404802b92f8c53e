//! Flush-period sweep: the whole four-dimension suite at each Δt.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{evaluate, require_accuracy, MetricsError, MetricsReport, DEFAULT_BC_BINS};
use crate::policy::PolicySpec;
use crate::scenarios::{dimension_seed, generate_scenarios, run_trials, Dimension, ScenarioConfig, ScenarioError, Trial};

pub const DEFAULT_GRID_MS: [u64; 6] = [300, 600, 900, 1200, 1500, 1800];

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("empty Δt grid")]
    EmptyGrid,
    #[error("Δt must be positive")]
    NonPositiveDeltaT,
    #[error("Δt = {delta_t_ms} ms: {source}")]
    Scenario {
        delta_t_ms: u64,
        #[source]
        source: ScenarioError,
    },
    #[error("Δt = {delta_t_ms} ms: {source}")]
    Metrics {
        delta_t_ms: u64,
        #[source]
        source: MetricsError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub delta_t_ms: u64,
    pub trials: Vec<Trial>,
    pub report: MetricsReport,
}

/// `n` trials per dimension at `cfg.delta_t_ms`. Each dimension's scripts
/// come from a seed derived from `(seed, Δt, dimension)`.
pub fn run_suite(policy: &PolicySpec, n: usize, seed: u64, cfg: &ScenarioConfig) -> Result<SuiteResult, SweepError> {
    let delta_t_ms = cfg.delta_t_ms;
    let mut trials = Vec::with_capacity(4 * n);
    for d in Dimension::ALL {
        let s = dimension_seed(seed, delta_t_ms, d);
        let scripts = generate_scenarios(d, n, s, cfg);
        trials.extend(
            run_trials(&scripts, policy, cfg, s).map_err(|source| SweepError::Scenario { delta_t_ms, source })?,
        );
    }
    let report = evaluate(&trials, cfg.takeover_window_ms, DEFAULT_BC_BINS)
        .map_err(|source| SweepError::Metrics { delta_t_ms, source })?;
    Ok(SuiteResult { delta_t_ms, trials, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta_t_ms: u64,
    pub averaged_accuracy: f64,
    /// Mean; `None` if no smooth trial was answered.
    pub smooth_latency_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub policy: PolicySpec,
    pub n_trials: usize,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "delta_t_ms,averaged_accuracy,smooth_latency_ms")?;
        for r in &self.rows {
            let lat = r.smooth_latency_ms.map(|v| v.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{}", r.delta_t_ms, r.averaged_accuracy, lat)?;
        }
        Ok(())
    }

    pub fn latency_strictly_increasing(&self) -> bool {
        self.rows.windows(2).all(|w| match (w[0].smooth_latency_ms, w[1].smooth_latency_ms) {
            (Some(a), Some(b)) => a < b,
            _ => false,
        })
    }
}

/// Grid points run in parallel; rows come back sorted with duplicates removed.
pub fn run_sweep(
    grid: &[u64],
    policy: &PolicySpec,
    n: usize,
    seed: u64,
    base: &ScenarioConfig,
) -> Result<SweepResult, SweepError> {
    if grid.is_empty() {
        return Err(SweepError::EmptyGrid);
    }
    if grid.contains(&0) {
        return Err(SweepError::NonPositiveDeltaT);
    }
    let mut grid = grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let rows = grid
        .par_iter()
        .map(|&delta_t_ms| {
            let cfg = ScenarioConfig { delta_t_ms, ..base.clone() };
            let suite = run_suite(policy, n, seed, &cfg)?;
            let averaged_accuracy =
                require_accuracy(&suite.report).map_err(|source| SweepError::Metrics { delta_t_ms, source })?;
            Ok(SweepRow { delta_t_ms, averaged_accuracy, smooth_latency_ms: suite.report.smooth_latency_ms() })
        })
        .collect::<Result<Vec<_>, SweepError>>()?;
    Ok(SweepResult { policy: policy.clone(), n_trials: n, seed, rows })
}
