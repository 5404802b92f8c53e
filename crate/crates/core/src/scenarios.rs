//! Seeded, timed benchmark scenarios for the four turn-taking dimensions and
//! the runner that replays them through the engine.
//!
//! A script is a list of ASR partial events (one per word) plus ground truth:
//! labeled intervals tiling `[0, horizon)`, cue instants, and the utterances
//! with the response the system is expected to give. Cue instants are the
//! timestamps of the ASR events that carry them, so the flush that first sees
//! a cue is the first flush strictly after it.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{AsrPartialEvent, FlushClock};
use crate::orchestrator::{run_session, EngineConfig, PlaybackModel, SessionError, SessionTranscript};
use crate::policy::{PolicyError, PolicyOptions, PolicySpec};
use crate::rng::{derive_seed, stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    PauseHandling,
    Backchannel,
    SmoothTurnTaking,
    UserInterruption,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::PauseHandling,
        Dimension::Backchannel,
        Dimension::SmoothTurnTaking,
        Dimension::UserInterruption,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::PauseHandling => "pause_handling",
            Dimension::Backchannel => "backchannel",
            Dimension::SmoothTurnTaking => "smooth_turn_taking",
            Dimension::UserInterruption => "user_interruption",
        }
    }

    /// Whether taking the floor after this dimension's cue is the desired outcome.
    pub fn takeover_desired(self) -> bool {
        matches!(self, Dimension::SmoothTurnTaking | Dimension::UserInterruption)
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dimension {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Dimension::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| format!("unknown dimension {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalLabel {
    Silence,
    Speaking,
    Pause,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledInterval {
    pub label: IntervalLabel,
    pub start_ms: u64,
    pub end_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueKind {
    /// Last word before a mid-utterance silence.
    PauseOnset,
    /// End of a sentence where a listener backchannel fits.
    BackchannelCue,
    /// Last word of an utterance that expects a response.
    UserEnd,
    /// First word of speech that barges in on the system.
    InterruptOnset,
    /// A short acknowledgment spoken over the system.
    UserBackchannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cue {
    pub kind: CueKind,
    pub t_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub start_ms: u64,
    /// Timestamp of the utterance's last word.
    pub end_ms: u64,
    /// What the system should say once the user yields; `None` if nothing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truth {
    pub horizon_ms: u64,
    pub intervals: Vec<LabeledInterval>,
    pub cues: Vec<Cue>,
    pub utterances: Vec<Utterance>,
}

impl Truth {
    /// Whether some labeled interval contains `t_ms`.
    pub fn covers(&self, t_ms: u64) -> bool {
        self.intervals.iter().any(|i| i.start_ms <= t_ms && t_ms < i.end_ms)
    }

    pub fn cue_in(&self, kind: CueKind, lo: u64, hi: u64) -> bool {
        self.cues.iter().any(|c| c.kind == kind && lo <= c.t_ms && c.t_ms < hi)
    }

    pub fn cues_of(&self, kind: CueKind) -> impl Iterator<Item = u64> + '_ {
        self.cues.iter().filter(move |c| c.kind == kind).map(|c| c.t_ms)
    }

    /// End of the last utterance that expects a response.
    pub fn t_user_end_ms(&self) -> Option<u64> {
        self.cues_of(CueKind::UserEnd).max()
    }

    pub fn t_interrupt_onset_ms(&self) -> Option<u64> {
        self.cues_of(CueKind::InterruptOnset).next()
    }

    pub fn speaking_ms(&self) -> u64 {
        self.intervals
            .iter()
            .filter(|i| i.label == IntervalLabel::Speaking)
            .map(|i| i.end_ms - i.start_ms)
            .sum()
    }

    /// Intervals are contiguous, non-empty, and span exactly `[0, horizon)`.
    pub fn tiles_horizon(&self) -> bool {
        let mut t = 0;
        for i in &self.intervals {
            if i.start_ms != t || i.end_ms <= i.start_ms {
                return false;
            }
            t = i.end_ms;
        }
        t == self.horizon_ms
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub id: String,
    pub dimension: Dimension,
    pub horizon_ms: u64,
    pub events: Vec<AsrPartialEvent>,
    pub truth: Truth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub script: ScenarioScript,
    pub transcript: SessionTranscript,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub delta_t_ms: u64,
    pub playback: PlaybackModel,
    pub takeover_window_ms: u64,
    pub pause_gap_min_ms: u64,
    pub pause_gap_max_ms: u64,
    /// Fixes every pause gap when set.
    pub forced_pause_gap_ms: Option<u64>,
    pub word_gap_min_ms: u64,
    pub word_gap_max_ms: u64,
    pub sentence_gap_min_ms: u64,
    pub sentence_gap_max_ms: u64,
    pub lead_silence_min_ms: u64,
    pub lead_silence_max_ms: u64,
    /// Length of the response that the interruption scenario cuts short.
    pub long_response_min_tokens: usize,
    pub long_response_max_tokens: usize,
    /// The oracle emits `<system backchannel>` at backchannel cues.
    pub system_backchannel: bool,
    pub max_system_tokens: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            delta_t_ms: 600,
            playback: PlaybackModel::default(),
            takeover_window_ms: 3000,
            pause_gap_min_ms: 500,
            pause_gap_max_ms: 2000,
            forced_pause_gap_ms: None,
            word_gap_min_ms: 150,
            word_gap_max_ms: 350,
            sentence_gap_min_ms: 300,
            sentence_gap_max_ms: 600,
            lead_silence_min_ms: 200,
            lead_silence_max_ms: 1200,
            long_response_min_tokens: 24,
            long_response_max_tokens: 36,
            system_backchannel: true,
            max_system_tokens: crate::policy::DEFAULT_MAX_SYSTEM_TOKENS,
        }
    }
}

impl ScenarioConfig {
    pub fn engine_config(&self, seed: u64) -> EngineConfig {
        EngineConfig {
            delta_t_ms: self.delta_t_ms,
            playback: self.playback.clone(),
            max_system_tokens: self.max_system_tokens,
            seed,
            ..EngineConfig::default()
        }
    }

    /// Trailing silence long enough for any response to land inside the window.
    fn tail_ms(&self) -> u64 {
        self.takeover_window_ms + 2 * self.delta_t_ms + self.playback.policy_latency_ms
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("script {id}: {source}")]
    Session {
        id: String,
        #[source]
        source: SessionError,
    },
    #[error("script {id}: {source}")]
    Policy {
        id: String,
        #[source]
        source: PolicyError,
    },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const FRAGMENTS: &[&str] = &[
    "so I was wondering whether",
    "the thing I keep thinking about is",
    "last week my sister and I",
    "I am trying to figure out how",
    "what I really want to know is",
    "my manager asked me to",
];

const CONTINUATIONS: &[&str] = &[
    "you could help me plan it?",
    "this is a good idea?",
    "we should book the train early?",
    "I can fix it before friday?",
    "the new version is faster?",
];

const QUESTIONS: &[&str] = &[
    "what is the capital of australia?",
    "can you recommend a good book on history?",
    "how do I make fresh pasta at home?",
    "why is the sky blue during the day?",
    "what should I pack for a weekend hike?",
    "how long does it take to learn rust?",
];

const INTERJECTIONS: &[&str] = &["wait what about paris?", "sorry how about tea?", "no stop", "actually never mind"];

const SENTENCES: &[&str] = &[
    "yesterday I went to the old market downtown.",
    "there was a man selling handmade wooden toys.",
    "my daughter picked a small painted horse.",
    "then it started raining really hard.",
    "we waited under the bridge for an hour.",
    "a street musician kept playing the whole time.",
    "in the end we got home soaked but happy.",
];

const RESPONSE_WORDS: &[&str] = &[
    "sure", "here", "is", "what", "I", "think", "about", "that", "it", "depends", "on", "a", "few",
    "things", "first", "of", "all", "you", "should", "consider", "the", "time", "and", "place",
];

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn response(rng: &mut Rng, min: usize, max: usize) -> Vec<String> {
    let n = rng.random_range(min..=max.max(min));
    (0..n).map(|_| RESPONSE_WORDS.choose(rng).copied().unwrap_or("ok").to_string()).collect()
}

struct Builder<'a> {
    cfg: &'a ScenarioConfig,
    events: Vec<AsrPartialEvent>,
    intervals: Vec<LabeledInterval>,
    cues: Vec<Cue>,
    utterances: Vec<Utterance>,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Self {
        Self { cfg, events: Vec::new(), intervals: Vec::new(), cues: Vec::new(), utterances: Vec::new() }
    }

    fn cursor(&self) -> u64 {
        self.intervals.last().map_or(0, |i| i.end_ms)
    }

    fn gap(&mut self, label: IntervalLabel, until: u64) {
        let start = self.cursor();
        if until > start {
            self.intervals.push(LabeledInterval { label, start_ms: start, end_ms: until });
        }
    }

    /// Speak `ws` starting at `start`; returns (first, last) event times.
    fn speak(&mut self, ws: &[String], start: u64, rng: &mut Rng) -> (u64, u64) {
        let mut t = start;
        for (i, w) in ws.iter().enumerate() {
            if i > 0 {
                t += rng.random_range(self.cfg.word_gap_min_ms..=self.cfg.word_gap_max_ms);
            }
            self.events.push(AsrPartialEvent::new(t, w.clone()));
        }
        (start, t)
    }

    fn speaking(&mut self, first: u64, last: u64) {
        self.gap(IntervalLabel::Silence, first);
        let start = self.cursor().max(first);
        self.intervals.push(LabeledInterval { label: IntervalLabel::Speaking, start_ms: start, end_ms: last + 1 });
    }

    fn finish(mut self, id: String, dimension: Dimension, horizon_ms: u64) -> ScenarioScript {
        self.gap(IntervalLabel::Silence, horizon_ms);
        self.cues.sort_by_key(|c| c.t_ms);
        ScenarioScript {
            id,
            dimension,
            horizon_ms,
            events: self.events,
            truth: Truth { horizon_ms, intervals: self.intervals, cues: self.cues, utterances: self.utterances },
        }
    }
}

fn lead(cfg: &ScenarioConfig, rng: &mut Rng) -> u64 {
    rng.random_range(cfg.lead_silence_min_ms..=cfg.lead_silence_max_ms)
}

fn pause_handling(id: String, cfg: &ScenarioConfig, rng: &mut Rng) -> ScenarioScript {
    let mut b = Builder::new(cfg);
    let part_a = words(FRAGMENTS.choose(rng).unwrap());
    let part_b = words(CONTINUATIONS.choose(rng).unwrap());
    let start = lead(cfg, rng);
    let (a0, a1) = b.speak(&part_a, start, rng);
    b.speaking(a0, a1);
    let gap = cfg
        .forced_pause_gap_ms
        .unwrap_or_else(|| rng.random_range(cfg.pause_gap_min_ms..=cfg.pause_gap_max_ms));
    let (b0, b1) = b.speak(&part_b, a1 + gap, rng);
    b.gap(IntervalLabel::Pause, b0);
    b.speaking(b0, b1);
    b.cues.push(Cue { kind: CueKind::PauseOnset, t_ms: a1 });
    b.cues.push(Cue { kind: CueKind::UserEnd, t_ms: b1 });
    let reply = response(rng, 6, 12);
    b.utterances.push(Utterance { start_ms: a0, end_ms: b1, response: Some(reply) });
    let horizon = b1 + cfg.tail_ms();
    b.finish(id, Dimension::PauseHandling, horizon)
}

fn backchannel(id: String, cfg: &ScenarioConfig, rng: &mut Rng) -> ScenarioScript {
    let mut b = Builder::new(cfg);
    let n = rng.random_range(3..=5);
    let mut t = lead(cfg, rng);
    let first = t;
    let mut last = t;
    for k in 0..n {
        let sentence = words(SENTENCES.choose(rng).unwrap());
        let (_, end) = b.speak(&sentence, t, rng);
        last = end;
        if k + 1 < n {
            b.cues.push(Cue { kind: CueKind::BackchannelCue, t_ms: end });
            t = end + rng.random_range(cfg.sentence_gap_min_ms..=cfg.sentence_gap_max_ms);
        }
    }
    b.speaking(first, last);
    b.cues.push(Cue { kind: CueKind::UserEnd, t_ms: last });
    let reply = response(rng, 6, 12);
    b.utterances.push(Utterance { start_ms: first, end_ms: last, response: Some(reply) });
    let horizon = last + cfg.tail_ms();
    b.finish(id, Dimension::Backchannel, horizon)
}

fn smooth_turn_taking(id: String, cfg: &ScenarioConfig, rng: &mut Rng) -> ScenarioScript {
    let mut b = Builder::new(cfg);
    let q = words(QUESTIONS.choose(rng).unwrap());
    let start = lead(cfg, rng);
    let (q0, q1) = b.speak(&q, start, rng);
    b.speaking(q0, q1);
    b.cues.push(Cue { kind: CueKind::UserEnd, t_ms: q1 });
    let reply = response(rng, 6, 12);
    b.utterances.push(Utterance { start_ms: q0, end_ms: q1, response: Some(reply) });
    let horizon = q1 + cfg.tail_ms();
    b.finish(id, Dimension::SmoothTurnTaking, horizon)
}

fn user_interruption(id: String, cfg: &ScenarioConfig, rng: &mut Rng) -> ScenarioScript {
    let mut b = Builder::new(cfg);
    let q = words(QUESTIONS.choose(rng).unwrap());
    let start = lead(cfg, rng);
    let (q0, q1) = b.speak(&q, start, rng);
    b.speaking(q0, q1);

    // the flush carrying the last word is followed by a silent one, which starts the answer
    let playback_start =
        FlushClock::flush_after(cfg.delta_t_ms, q1) + cfg.delta_t_ms + cfg.playback.policy_latency_ms;
    let mut reply = response(rng, cfg.long_response_min_tokens, cfg.long_response_max_tokens);
    // still playing when the flush after the onset arrives
    while playback_start + cfg.playback.offset_ms(reply.len().saturating_sub(1))
        < playback_start + cfg.delta_t_ms + 2
    {
        reply.push("and".into());
    }
    let playback_end = playback_start + cfg.playback.offset_ms(reply.len() - 1);
    let onset = rng.random_range(playback_start + 1..=playback_end - cfg.delta_t_ms - 1);
    b.utterances.push(Utterance { start_ms: q0, end_ms: q1, response: Some(reply) });

    let q2 = words(INTERJECTIONS.choose(rng).unwrap());
    let (i0, i1) = b.speak(&q2, onset, rng);
    b.speaking(i0, i1);
    b.cues.push(Cue { kind: CueKind::UserEnd, t_ms: q1 });
    b.cues.push(Cue { kind: CueKind::InterruptOnset, t_ms: onset });
    b.cues.push(Cue { kind: CueKind::UserEnd, t_ms: i1 });
    let reply = response(rng, 6, 12);
    b.utterances.push(Utterance { start_ms: i0, end_ms: i1, response: Some(reply) });
    let horizon = i1 + cfg.tail_ms();
    b.finish(id, Dimension::UserInterruption, horizon)
}

/// Seed used for one dimension's scripts at one flush period.
pub fn dimension_seed(seed: u64, delta_t_ms: u64, dimension: Dimension) -> u64 {
    derive_seed(seed, &["scenarios", &delta_t_ms.to_string(), dimension.as_str()])
}

/// `n` scripts for `dimension`; script `i` draws from its own stream of `seed`.
pub fn generate_scenarios(dimension: Dimension, n: usize, seed: u64, cfg: &ScenarioConfig) -> Vec<ScenarioScript> {
    (0..n)
        .map(|i| {
            let id = format!("{}-{i:04}", dimension.as_str());
            let mut rng = stream(seed, &[&id]);
            match dimension {
                Dimension::PauseHandling => pause_handling(id, cfg, &mut rng),
                Dimension::Backchannel => backchannel(id, cfg, &mut rng),
                Dimension::SmoothTurnTaking => smooth_turn_taking(id, cfg, &mut rng),
                Dimension::UserInterruption => user_interruption(id, cfg, &mut rng),
            }
        })
        .collect()
}

pub fn run_trial(
    script: &ScenarioScript,
    policy: &PolicySpec,
    cfg: &ScenarioConfig,
    seed: u64,
) -> Result<Trial, ScenarioError> {
    let opts = PolicyOptions { system_backchannel: cfg.system_backchannel, ..PolicyOptions::default() };
    let mut p = policy
        .build(Some(&script.truth), &opts)
        .map_err(|source| ScenarioError::Policy { id: script.id.clone(), source })?;
    let engine_cfg = cfg.engine_config(derive_seed(seed, &["engine", &script.id]));
    let transcript = run_session(&script.events, script.horizon_ms, &mut *p, &engine_cfg)
        .map_err(|source| ScenarioError::Session { id: script.id.clone(), source })?;
    Ok(Trial { script: script.clone(), transcript })
}

/// One session per script, in parallel; output order follows `scripts`.
pub fn run_trials(
    scripts: &[ScenarioScript],
    policy: &PolicySpec,
    cfg: &ScenarioConfig,
    seed: u64,
) -> Result<Vec<Trial>, ScenarioError> {
    scripts.par_iter().map(|s| run_trial(s, policy, cfg, seed)).collect()
}

pub fn run_trials_serial(
    scripts: &[ScenarioScript],
    policy: &PolicySpec,
    cfg: &ScenarioConfig,
    seed: u64,
) -> Result<Vec<Trial>, ScenarioError> {
    scripts.iter().map(|s| run_trial(s, policy, cfg, seed)).collect()
}

pub fn write_ndjson<T: Serialize>(mut w: impl Write, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_ndjson<T: serde::de::DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>, ScenarioError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| ScenarioError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}
