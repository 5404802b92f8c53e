//! Turn-taking metrics over simulated trials.
//!
//! TOR counts a trial as a takeover when an `EmitSpeech` lands in
//! `[cue, min(cue + window, limit))`. For the two dimensions where taking the
//! floor is wrong the limit is the user's real end of turn, so answering the
//! finished question does not count as grabbing the floor at the pause.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::RecordKind;
use crate::scenarios::{CueKind, Dimension, Trial};

pub const DEFAULT_TAKEOVER_WINDOW_MS: u64 = 3000;
pub const DEFAULT_BC_BINS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no trials to evaluate")]
    EmptyTrialSet,
    #[error("trials mix dimensions {0} and {1}")]
    MixedDimensions(Dimension, Dimension),
    #[error("{metric} does not apply to {dimension} trials")]
    WrongDimension { metric: &'static str, dimension: Dimension },
    #[error("{name} = {value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("averaged accuracy needs {0} trials")]
    MissingDimension(Dimension),
    #[error("histogram needs at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("trial {id} has no {cue:?} cue")]
    MissingCue { id: String, cue: CueKind },
}

fn dimension_of(trials: &[Trial]) -> Result<Dimension, MetricsError> {
    let first = trials.first().ok_or(MetricsError::EmptyTrialSet)?.script.dimension;
    match trials.iter().find(|t| t.script.dimension != first) {
        Some(t) => Err(MetricsError::MixedDimensions(first, t.script.dimension)),
        None => Ok(first),
    }
}

fn emit_times(trial: &Trial) -> impl Iterator<Item = u64> + '_ {
    trial.transcript.of_kind(RecordKind::EmitSpeech).map(|r| r.t_ms)
}

fn cue_kind(dimension: Dimension) -> CueKind {
    match dimension {
        Dimension::PauseHandling => CueKind::PauseOnset,
        Dimension::Backchannel => CueKind::BackchannelCue,
        Dimension::SmoothTurnTaking => CueKind::UserEnd,
        Dimension::UserInterruption => CueKind::InterruptOnset,
    }
}

fn first_user_end(trial: &Trial) -> Option<u64> {
    trial.script.truth.cues_of(CueKind::UserEnd).min()
}

/// Whether the system took the floor after any of the trial's cues.
pub fn took_over(trial: &Trial, window_ms: u64) -> Result<bool, MetricsError> {
    let dim = trial.script.dimension;
    let kind = cue_kind(dim);
    let missing = || MetricsError::MissingCue { id: trial.script.id.clone(), cue: kind };
    let cues: Vec<u64> = match dim {
        // the question the interruption answers is a UserEnd too; use only the first
        Dimension::SmoothTurnTaking => vec![first_user_end(trial).ok_or_else(missing)?],
        _ => trial.script.truth.cues_of(kind).collect(),
    };
    if cues.is_empty() {
        return Err(missing());
    }
    let limit = if dim.takeover_desired() {
        u64::MAX
    } else {
        trial.script.truth.t_user_end_ms().unwrap_or(u64::MAX)
    };
    Ok(cues.iter().any(|&cue| {
        let end = cue.saturating_add(window_ms).min(limit);
        emit_times(trial).any(|t| cue <= t && t < end)
    }))
}

pub fn compute_tor(trials: &[Trial], window_ms: u64) -> Result<f64, MetricsError> {
    dimension_of(trials)?;
    let mut hits = 0usize;
    for t in trials {
        hits += usize::from(took_over(t, window_ms)?);
    }
    Ok(hits as f64 / trials.len() as f64)
}

/// Mean of `[1-a, 1-b, 1-c, d, e]`: three lower-is-better rates followed by
/// two higher-is-better ones.
pub fn averaged_accuracy(
    tor_pause_syn: f64,
    tor_pause_candor: f64,
    tor_bc: f64,
    tor_smooth: f64,
    tor_interrupt: f64,
) -> Result<f64, MetricsError> {
    let inputs = [
        ("tor_pause_syn", tor_pause_syn),
        ("tor_pause_candor", tor_pause_candor),
        ("tor_bc", tor_bc),
        ("tor_smooth", tor_smooth),
        ("tor_interrupt", tor_interrupt),
    ];
    for (name, value) in inputs {
        if !(0.0..=1.0).contains(&value) {
            return Err(MetricsError::OutOfRange { name, value });
        }
    }
    let sum = (1.0 - tor_pause_syn) + (1.0 - tor_pause_candor) + (1.0 - tor_bc) + tor_smooth + tor_interrupt;
    Ok(sum / 5.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: Option<f64>,
    pub median_ms: Option<f64>,
    /// Trials that contributed a latency.
    pub n: usize,
    /// Trials with no qualifying action after the cue.
    pub excluded: usize,
}

/// Smooth turn-taking: first `EmitSpeech` at or after the user's end.
/// Interruption: first abort at or after the onset.
pub fn compute_latency(trials: &[Trial]) -> Result<LatencyStats, MetricsError> {
    let dim = dimension_of(trials)?;
    let mut samples = Vec::new();
    let mut excluded = 0;
    for t in trials {
        let (cue, kind) = match dim {
            Dimension::SmoothTurnTaking => (first_user_end(t), RecordKind::EmitSpeech),
            Dimension::UserInterruption => (t.script.truth.t_interrupt_onset_ms(), RecordKind::Abort),
            d => return Err(MetricsError::WrongDimension { metric: "latency", dimension: d }),
        };
        let cue = cue.ok_or_else(|| MetricsError::MissingCue { id: t.script.id.clone(), cue: cue_kind(dim) })?;
        match t.transcript.of_kind(kind).map(|r| r.t_ms).find(|&a| a >= cue) {
            Some(a) => samples.push((a - cue) as f64),
            None => excluded += 1,
        }
    }
    Ok(LatencyStats { mean_ms: mean(&samples), median_ms: median(&mut samples), n: samples.len(), excluded })
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn median(xs: &mut [f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { (xs[n / 2 - 1] + xs[n / 2]) / 2.0 })
}

/// Jensen–Shannon divergence with base-2 logs, in `[0, 1]`. Inputs are
/// normalized here; an all-zero input counts as uniform.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "histograms must have the same number of bins");
    let p = normalize(p);
    let q = normalize(q);
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter().zip(m).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).log2()).sum()
    };
    let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
    (0.5 * kl(&p, &m) + 0.5 * kl(&q, &m)).clamp(0.0, 1.0)
}

fn normalize(h: &[f64]) -> Vec<f64> {
    let total: f64 = h.iter().sum();
    if total > 0.0 {
        h.iter().map(|x| x / total).collect()
    } else {
        vec![1.0 / h.len() as f64; h.len()]
    }
}

/// Histogram of `t / horizon` over `n_bins` uniform bins.
pub fn time_histogram(points: impl IntoIterator<Item = (u64, u64)>, n_bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; n_bins];
    for (t, horizon) in points {
        let x = t as f64 / horizon.max(1) as f64;
        let bin = ((x * n_bins as f64) as usize).min(n_bins - 1);
        h[bin] += 1.0;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackchannelStats {
    /// System backchannel clips per minute of user speech. Not an ICC score.
    pub bc_freq: f64,
    pub bc_jsd: f64,
    pub n_emitted: usize,
}

/// Clip times and cue times are pooled across trials, each scaled by its own
/// horizon. No emitted clips means an emitted histogram that is uniform.
pub fn compute_bc_stats(trials: &[Trial], n_bins: usize) -> Result<BackchannelStats, MetricsError> {
    let dim = dimension_of(trials)?;
    if dim != Dimension::Backchannel {
        return Err(MetricsError::WrongDimension { metric: "backchannel stats", dimension: dim });
    }
    if n_bins < 2 {
        return Err(MetricsError::TooFewBins(n_bins));
    }
    let emitted: Vec<(u64, u64)> = trials
        .iter()
        .flat_map(|t| {
            let h = t.script.horizon_ms;
            t.transcript.of_kind(RecordKind::BackchannelClip).map(move |r| (r.t_ms, h))
        })
        .collect();
    let cues = trials.iter().flat_map(|t| {
        let h = t.script.horizon_ms;
        t.script.truth.cues_of(CueKind::BackchannelCue).map(move |c| (c, h))
    });
    let speaking_min: f64 = trials.iter().map(|t| t.script.truth.speaking_ms() as f64).sum::<f64>() / 60_000.0;
    let bc_freq = if speaking_min > 0.0 { emitted.len() as f64 / speaking_min } else { 0.0 };
    let n_emitted = emitted.len();
    let bc_jsd = jsd(&time_histogram(emitted, n_bins), &time_histogram(cues, n_bins));
    Ok(BackchannelStats { bc_freq, bc_jsd, n_emitted })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionReport {
    pub dimension: Dimension,
    pub n_trials: usize,
    pub tor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backchannel: Option<BackchannelStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub takeover_window_ms: u64,
    pub bc_bins: usize,
    pub zero_backchannel_convention: String,
    pub dimensions: Vec<DimensionReport>,
    /// Present only when all four dimensions were evaluated.
    pub averaged_turn_taking_accuracy: Option<f64>,
}

impl MetricsReport {
    pub fn dimension(&self, d: Dimension) -> Option<&DimensionReport> {
        self.dimensions.iter().find(|r| r.dimension == d)
    }

    pub fn smooth_latency_ms(&self) -> Option<f64> {
        self.dimension(Dimension::SmoothTurnTaking)?.latency.as_ref()?.mean_ms
    }

    /// One row per dimension plus an aggregate row; empty cells for metrics
    /// that do not apply.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        fn cell(x: Option<f64>) -> String {
            x.map(|v| v.to_string()).unwrap_or_default()
        }
        writeln!(w, "dimension,n_trials,tor,latency_mean_ms,latency_median_ms,latency_excluded,bc_freq,bc_jsd")?;
        for d in &self.dimensions {
            let lat = d.latency.as_ref();
            let bc = d.backchannel.as_ref();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                d.dimension,
                d.n_trials,
                d.tor,
                cell(lat.and_then(|l| l.mean_ms)),
                cell(lat.and_then(|l| l.median_ms)),
                lat.map(|l| l.excluded.to_string()).unwrap_or_default(),
                cell(bc.map(|b| b.bc_freq)),
                cell(bc.map(|b| b.bc_jsd)),
            )?;
        }
        writeln!(w, "averaged_turn_taking_accuracy,,{},,,,,", cell(self.averaged_turn_taking_accuracy))
    }
}

/// Per-dimension metrics and, when all four dimensions are present, the
/// averaged accuracy. The one simulated pause dimension fills both pause slots.
pub fn evaluate(trials: &[Trial], window_ms: u64, n_bins: usize) -> Result<MetricsReport, MetricsError> {
    if trials.is_empty() {
        return Err(MetricsError::EmptyTrialSet);
    }
    let mut groups: BTreeMap<Dimension, Vec<Trial>> = BTreeMap::new();
    for t in trials {
        groups.entry(t.script.dimension).or_default().push(t.clone());
    }
    let mut dimensions = Vec::new();
    for (dim, group) in &groups {
        let latency = match dim {
            Dimension::SmoothTurnTaking | Dimension::UserInterruption => Some(compute_latency(group)?),
            _ => None,
        };
        let backchannel = match dim {
            Dimension::Backchannel => Some(compute_bc_stats(group, n_bins)?),
            _ => None,
        };
        dimensions.push(DimensionReport {
            dimension: *dim,
            n_trials: group.len(),
            tor: compute_tor(group, window_ms)?,
            latency,
            backchannel,
        });
    }
    let tor = |d| dimensions.iter().find(|r: &&DimensionReport| r.dimension == d).map(|r| r.tor);
    let averaged = match (
        tor(Dimension::PauseHandling),
        tor(Dimension::Backchannel),
        tor(Dimension::SmoothTurnTaking),
        tor(Dimension::UserInterruption),
    ) {
        (Some(p), Some(b), Some(s), Some(i)) => Some(averaged_accuracy(p, p, b, s, i)?),
        _ => None,
    };
    Ok(MetricsReport {
        takeover_window_ms: window_ms,
        bc_bins: n_bins,
        zero_backchannel_convention: "no emitted backchannels: emitted histogram is uniform".into(),
        dimensions,
        averaged_turn_taking_accuracy: averaged,
    })
}

/// Averaged accuracy for a report that may lack a dimension.
pub fn require_accuracy(report: &MetricsReport) -> Result<f64, MetricsError> {
    if let Some(a) = report.averaged_turn_taking_accuracy {
        return Ok(a);
    }
    let missing = Dimension::ALL.into_iter().find(|d| report.dimension(*d).is_none());
    Err(MetricsError::MissingDimension(missing.unwrap_or(Dimension::PauseHandling)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::{SessionTranscript, TranscriptRecord};
    use crate::policy::PolicySpec;
    use crate::scenarios::{generate_scenarios, run_trials, ScenarioConfig};
    use proptest::prelude::*;

    fn record(t_ms: u64, kind: RecordKind) -> TranscriptRecord {
        serde_json::from_value(serde_json::json!({ "t_ms": t_ms, "kind": kind })).unwrap()
    }

    fn smooth_trial(emits: &[u64]) -> Trial {
        let script = generate_scenarios(Dimension::SmoothTurnTaking, 1, 0, &ScenarioConfig::default()).remove(0);
        let end = script.truth.t_user_end_ms().unwrap();
        let records = emits.iter().map(|&d| record(end + d, RecordKind::EmitSpeech)).collect();
        Trial { script, transcript: SessionTranscript { records } }
    }

    #[test]
    fn tor_counts_trials() {
        let mut trials: Vec<Trial> = (0..8).map(|_| smooth_trial(&[])).collect();
        trials.push(smooth_trial(&[100]));
        trials.push(smooth_trial(&[2999]));
        assert_eq!(compute_tor(&trials, 3000).unwrap(), 0.2);
        let late = vec![smooth_trial(&[3000])];
        assert_eq!(compute_tor(&late, 3000).unwrap(), 0.0);
        let all: Vec<_> = (0..4).map(|_| smooth_trial(&[0])).collect();
        assert_eq!(compute_tor(&all, 3000).unwrap(), 1.0);
        assert_eq!(compute_tor(&[], 3000), Err(MetricsError::EmptyTrialSet));
    }

    #[test]
    fn latency_subtraction() {
        let l = compute_latency(&[smooth_trial(&[0])]).unwrap();
        assert_eq!(l.mean_ms, Some(0.0));
        let l = compute_latency(&[smooth_trial(&[724]), smooth_trial(&[]), smooth_trial(&[100])]).unwrap();
        assert_eq!((l.mean_ms, l.median_ms, l.n, l.excluded), (Some(412.0), Some(412.0), 2, 1));
        assert_eq!(compute_latency(&[]), Err(MetricsError::EmptyTrialSet));
    }

    #[test]
    fn mixed_dimensions_rejected() {
        let cfg = ScenarioConfig::default();
        let mut trials = vec![smooth_trial(&[])];
        let s = generate_scenarios(Dimension::PauseHandling, 1, 0, &cfg).remove(0);
        trials.push(Trial { script: s, transcript: SessionTranscript::default() });
        assert!(matches!(compute_tor(&trials, 3000), Err(MetricsError::MixedDimensions(..))));
    }

    #[test]
    fn table_rows() {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-3;
        assert!(close(averaged_accuracy(0.058, 0.222, 0.218, 0.832, 0.955).unwrap(), 0.858));
        assert!(close(averaged_accuracy(0.985, 0.980, 1.000, 0.941, 1.000).unwrap(), 0.395));
        assert!(close(averaged_accuracy(0.642, 0.481, 0.636, 0.336, 0.867).unwrap(), 0.489));
        assert!(matches!(
            averaged_accuracy(1.2, 0.0, 0.0, 0.0, 0.0),
            Err(MetricsError::OutOfRange { name: "tor_pause_syn", .. })
        ));
        assert!(averaged_accuracy(0.0, f64::NAN, 0.0, 0.0, 0.0).is_err());
        assert_eq!(averaged_accuracy(0.0, 0.0, 0.0, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(averaged_accuracy(1.0, 1.0, 1.0, 0.0, 0.0).unwrap(), 0.0);
    }

    /// Direct evaluation in nats, converted; independent of `jsd`.
    fn jsd_oracle(p: &[f64], q: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..p.len() {
            let m = (p[i] + q[i]) / 2.0;
            if p[i] > 0.0 {
                total += 0.5 * p[i] * (p[i] / m).ln();
            }
            if q[i] > 0.0 {
                total += 0.5 * q[i] * (q[i] / m).ln();
            }
        }
        total / std::f64::consts::LN_2
    }

    #[test]
    fn jsd_reference_values() {
        let mut point = vec![0.0; 10];
        point[3] = 1.0;
        let uniform = vec![0.1; 10];
        // frozen from jsd_oracle
        let frozen = 0.7582766571931676;
        assert!((jsd_oracle(&point, &uniform) - frozen).abs() < 1e-12);
        assert!((jsd(&point, &uniform) - frozen).abs() < 1e-12);
        assert_eq!(jsd(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(jsd(&uniform, &uniform), 0.0);
        // all-zero emitted histogram is uniform
        assert!((jsd(&[0.0; 10], &point) - frozen).abs() < 1e-12);
    }

    #[test]
    fn histogram_binning() {
        let h = time_histogram([(0, 1000), (99, 1000), (100, 1000), (999, 1000), (1000, 1000)], 10);
        assert_eq!(h, vec![2.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn oracle_smooth_latency_is_one_to_two_flushes() {
        for delta in [300u64, 600, 1200] {
            let cfg = ScenarioConfig { delta_t_ms: delta, ..Default::default() };
            let scripts = generate_scenarios(Dimension::SmoothTurnTaking, 60, 21, &cfg);
            let trials = run_trials(&scripts, &PolicySpec::Oracle, &cfg, 21).unwrap();
            // brute force over phases: the word at e is flushed at the first
            // multiple of Δt above e, the answer comes one silent flush later
            let expected: Vec<f64> = scripts
                .iter()
                .map(|s| {
                    let e = s.truth.t_user_end_ms().unwrap();
                    let mut f = 0;
                    while f <= e {
                        f += delta;
                    }
                    (f + delta - e) as f64
                })
                .collect();
            let l = compute_latency(&trials).unwrap();
            assert_eq!(l.excluded, 0);
            let m = l.mean_ms.unwrap();
            assert!(m > delta as f64 && m <= 2.0 * delta as f64);
            assert!((m - expected.iter().sum::<f64>() / expected.len() as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn report_outputs() {
        let cfg = ScenarioConfig::default();
        let mut trials = Vec::new();
        for d in Dimension::ALL {
            let scripts = generate_scenarios(d, 10, 2, &cfg);
            trials.extend(run_trials(&scripts, &PolicySpec::Oracle, &cfg, 2).unwrap());
        }
        let report = evaluate(&trials, 3000, 10).unwrap();
        assert_eq!(report.averaged_turn_taking_accuracy, Some(1.0));
        let bc = report.dimension(Dimension::Backchannel).unwrap().backchannel.as_ref().unwrap();
        assert!(bc.n_emitted > 0 && bc.bc_freq > 0.0);
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.lines().last().unwrap().starts_with("averaged_turn_taking_accuracy,,1,"));
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), report);

        let partial = evaluate(&trials[..10], 3000, 10).unwrap();
        assert_eq!(partial.averaged_turn_taking_accuracy, None);
        assert!(matches!(require_accuracy(&partial), Err(MetricsError::MissingDimension(_))));
        assert_eq!(evaluate(&[], 3000, 10), Err(MetricsError::EmptyTrialSet));
    }

    proptest! {
        #[test]
        fn accuracy_permutation_invariance(a in 0.0..=1.0f64, b in 0.0..=1.0f64, c in 0.0..=1.0f64, d in 0.0..=1.0f64, e in 0.0..=1.0f64) {
            let x = averaged_accuracy(a, b, c, d, e).unwrap();
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert!((x - averaged_accuracy(b, a, c, d, e).unwrap()).abs() < 1e-12);
            prop_assert!((x - averaged_accuracy(a, b, c, e, d).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn jsd_symmetric_and_bounded(p in prop::collection::vec(0.0..10.0f64, 10), q in prop::collection::vec(0.0..10.0f64, 10)) {
            let a = jsd(&p, &q);
            prop_assert!((a - jsd(&q, &p)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(jsd(&p, &p).abs() < 1e-12);
            prop_assert!((a - jsd_oracle(&normalize(&p), &normalize(&q))).abs() < 1e-9);
        }

        #[test]
        fn tor_is_monotone(hits in prop::collection::vec(any::<bool>(), 1..20)) {
            let trials: Vec<Trial> = hits.iter().map(|&h| smooth_trial(if h { &[10] } else { &[] })).collect();
            let before = compute_tor(&trials, 3000).unwrap();
            let mut more = trials.clone();
            more.push(smooth_trial(&[10]));
            prop_assert!(compute_tor(&more, 3000).unwrap() >= before);
        }
    }
}
