//! Turns utterance-level text dialogues into duplex micro-turn training
//! sequences with control tokens, simulated pauses, interruptions,
//! backchannels and thinking silences, plus loss masks and weights.
//!
//! Every dialogue is first segmented into a [`DialoguePlan`]; the injection
//! passes edit the plan and [`DialoguePlan::micro_turns`] renders it.

mod plan;

use std::io::{BufRead, Write};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use plan::{DialoguePlan, Exchange, SystemChunk, UserChunk};

use crate::protocol::{render_micro_turn, ControlToken, MicroTurn, ProtocolError, Role};
use crate::rng::{derive_seed, seeded, Rng};

pub const BC_MARKER: &str = "<BC/>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceTurn {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDialogue {
    pub id: String,
    pub turns: Vec<SourceTurn>,
}

impl SourceDialogue {
    pub fn new(id: impl Into<String>, turns: &[(Role, &str)]) -> Self {
        Self {
            id: id.into(),
            turns: turns.iter().map(|(role, text)| SourceTurn { role: *role, text: text.to_string() }).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstructionConfig {
    pub user_len_min: usize,
    pub user_len_max: usize,
    pub system_len: usize,
    pub p_pause: f64,
    pub pause_turns_min: usize,
    pub pause_turns_max: usize,
    /// Pauses may also follow chunks of an interrupting user turn.
    pub pause_in_interrupts: bool,
    pub p_interrupt: f64,
    pub p_user_backchannel: f64,
    pub thinking_turns_min: usize,
    pub thinking_turns_max: usize,
    pub enable_system_backchannel: bool,
    pub user_backchannel_lexicon: Vec<String>,
    pub seed: u64,
}

impl Default for ConstructionConfig {
    fn default() -> Self {
        Self {
            user_len_min: 1,
            user_len_max: 7,
            system_len: 10,
            p_pause: 0.10,
            pause_turns_min: 1,
            pause_turns_max: 5,
            pause_in_interrupts: true,
            p_interrupt: 0.30,
            p_user_backchannel: 0.01,
            thinking_turns_min: 1,
            thinking_turns_max: 20,
            enable_system_backchannel: true,
            user_backchannel_lexicon: ["yes", "okay", "uh-huh", "right"].map(String::from).to_vec(),
            seed: 0,
        }
    }
}

impl ConstructionConfig {
    pub fn validate(&self) -> Result<(), ConstructError> {
        let bad = |msg: String| Err(ConstructError::InvalidConfig(msg));
        for (name, p) in [
            ("p_pause", self.p_pause),
            ("p_interrupt", self.p_interrupt),
            ("p_user_backchannel", self.p_user_backchannel),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        for (name, lo, hi) in [
            ("user_len", self.user_len_min, self.user_len_max),
            ("pause_turns", self.pause_turns_min, self.pause_turns_max),
            ("thinking_turns", self.thinking_turns_min, self.thinking_turns_max),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} range [{lo}, {hi}] must satisfy 1 <= min <= max"));
            }
        }
        if self.system_len == 0 {
            return bad("system_len must be at least 1".into());
        }
        if self.p_user_backchannel > 0.0 && self.user_backchannel_lexicon.iter().all(|w| w.trim().is_empty()) {
            return bad("user_backchannel_lexicon is empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConstructError {
    #[error("dialogue {id}: turn {turn} has no tokens")]
    EmptyTurn { id: String, turn: usize },
    #[error("dialogue {id}: no turns")]
    EmptyDialogue { id: String },
    #[error("dialogue {id}: turn {turn} breaks user/system alternation")]
    Alternation { id: String, turn: usize },
    #[error("dialogue {id}: last user turn has no system reply")]
    UnansweredUserTurn { id: String },
    #[error("dialogue {id}: turn {turn} contains control token {token}")]
    ControlInText { id: String, turn: usize, token: ControlToken },
    #[error("dialogue {id}: turn {turn}: <BC/> marker inside a word")]
    MisalignedMarker { id: String, turn: usize },
    #[error("dialogue {id}: exchange {exchange} has no following user turn to interrupt with")]
    NoFollowupQuestion { id: String, exchange: usize },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("exchange {exchange}: boundary {boundary} is not inside a {chunks}-chunk response")]
    BoundaryOutOfRange { exchange: usize, boundary: usize, chunks: usize },
    #[error("invalid construction config: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for ConstructError {
    fn from(e: std::io::Error) -> Self {
        ConstructError::Io(e.to_string())
    }
}

/// Counters behind the injection-rate report. Each rate is hits over the
/// number of places the injection was eligible.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructionStats {
    pub dialogues: usize,
    pub user_len_draws: usize,
    pub user_len_sum: usize,
    pub user_len_min_seen: Option<usize>,
    pub user_len_max_seen: Option<usize>,
    pub pause_eligible: usize,
    pub pauses: usize,
    pub pause_pairs: usize,
    pub interrupt_eligible: usize,
    pub interruptions: usize,
    pub user_backchannel_eligible: usize,
    pub user_backchannels: usize,
    pub responses_completed: usize,
    pub thinking_pairs: usize,
    pub markers_applied: usize,
    pub markers_dropped: usize,
}

impl ConstructionStats {
    pub fn merge(&mut self, o: &ConstructionStats) {
        self.dialogues += o.dialogues;
        self.user_len_draws += o.user_len_draws;
        self.user_len_sum += o.user_len_sum;
        self.user_len_min_seen = min_opt(self.user_len_min_seen, o.user_len_min_seen);
        self.user_len_max_seen = self.user_len_max_seen.max(o.user_len_max_seen);
        self.pause_eligible += o.pause_eligible;
        self.pauses += o.pauses;
        self.pause_pairs += o.pause_pairs;
        self.interrupt_eligible += o.interrupt_eligible;
        self.interruptions += o.interruptions;
        self.user_backchannel_eligible += o.user_backchannel_eligible;
        self.user_backchannels += o.user_backchannels;
        self.responses_completed += o.responses_completed;
        self.thinking_pairs += o.thinking_pairs;
        self.markers_applied += o.markers_applied;
        self.markers_dropped += o.markers_dropped;
    }

    pub(crate) fn draw_len(&mut self, len: usize) {
        self.user_len_draws += 1;
        self.user_len_sum += len;
        self.user_len_min_seen = min_opt(self.user_len_min_seen, Some(len));
        self.user_len_max_seen = self.user_len_max_seen.max(Some(len));
    }

    pub fn report(&self) -> StatsReport {
        let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
        StatsReport {
            user_len_mean: ratio(self.user_len_sum, self.user_len_draws),
            pause_rate: ratio(self.pauses, self.pause_eligible),
            pause_len_mean: ratio(self.pause_pairs, self.pauses),
            interrupt_rate: ratio(self.interruptions, self.interrupt_eligible),
            user_backchannel_rate: ratio(self.user_backchannels, self.user_backchannel_eligible),
            thinking_len_mean: ratio(self.thinking_pairs, self.responses_completed),
            counts: self.clone(),
        }
    }
}

fn min_opt(a: Option<usize>, b: Option<usize>) -> Option<usize> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub user_len_mean: Option<f64>,
    pub pause_rate: Option<f64>,
    pub pause_len_mean: Option<f64>,
    pub interrupt_rate: Option<f64>,
    pub user_backchannel_rate: Option<f64>,
    pub thinking_len_mean: Option<f64>,
    pub counts: ConstructionStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSequence {
    pub id: String,
    pub tokens: Vec<String>,
    pub loss_mask: Vec<u8>,
    pub loss_weight: Vec<f64>,
    /// Seed of this dialogue's RNG stream.
    pub seed: u64,
}

/// Weight on a supervised control token; everything else weighs 1.
pub fn control_weight(token: ControlToken) -> f64 {
    match token {
        ControlToken::UserFinishSpeaking => 10.0,
        ControlToken::UserIsInterrupting => 5.0,
        ControlToken::SystemBackchannel => 3.0,
        ControlToken::UserBackchannel => 2.0,
        ControlToken::UserIsSpeaking | ControlToken::UserIsThinking => 1.0,
        ControlToken::NoVoice | ControlToken::Eos => 1.0,
    }
}

/// Flatten micro-turns; only system micro-turns are supervised.
pub fn emit_training_sequence(id: &str, seed: u64, turns: &[MicroTurn]) -> Result<TrainingSequence, ConstructError> {
    let mut seq = TrainingSequence { id: id.to_string(), tokens: vec![], loss_mask: vec![], loss_weight: vec![], seed };
    for turn in turns {
        let system = turn.role == Role::System;
        for tok in render_micro_turn(turn)? {
            let weight = match ControlToken::from_surface(&tok) {
                Some(c) if system => control_weight(c),
                _ => 1.0,
            };
            seq.tokens.push(tok);
            seq.loss_mask.push(u8::from(system));
            seq.loss_weight.push(weight);
        }
    }
    Ok(seq)
}

/// Seed of one dialogue's stream.
pub fn dialogue_seed(seed: u64, id: &str) -> u64 {
    derive_seed(seed, &["construct", id])
}

/// The full pipeline for one dialogue: segment, markers, interruptions,
/// pauses, user backchannels, thinking. Interruptions go before pauses so
/// `pause_in_interrupts` can see which user turns interrupt.
pub fn build_plan(
    d: &SourceDialogue,
    cfg: &ConstructionConfig,
    rng: &mut Rng,
    stats: &mut ConstructionStats,
) -> Result<DialoguePlan, ConstructError> {
    let mut plan = plan::segment_dialogue(d, cfg, rng, stats)?;
    plan::apply_bc_markers(&mut plan, cfg, stats);
    plan::inject_interruptions(&mut plan, cfg, rng, stats);
    plan::inject_pauses(&mut plan, cfg, rng, stats);
    plan::inject_user_backchannels(&mut plan, cfg, rng, stats);
    plan::inject_thinking(&mut plan, cfg, rng, stats);
    stats.dialogues += 1;
    Ok(plan)
}

pub use plan::{
    apply_bc_markers, inject_interruptions, inject_pauses, inject_thinking, inject_user_backchannels, interrupt_at,
    segment_dialogue,
};

pub fn construct_one(
    d: &SourceDialogue,
    cfg: &ConstructionConfig,
) -> Result<(TrainingSequence, ConstructionStats), ConstructError> {
    let seed = dialogue_seed(cfg.seed, &d.id);
    let mut rng = seeded(seed);
    let mut stats = ConstructionStats::default();
    let plan = build_plan(d, cfg, &mut rng, &mut stats)?;
    Ok((emit_training_sequence(&d.id, seed, &plan.micro_turns())?, stats))
}

fn collect(
    results: Vec<Result<(TrainingSequence, ConstructionStats), ConstructError>>,
) -> Result<(Vec<TrainingSequence>, ConstructionStats), ConstructError> {
    let mut out = Vec::with_capacity(results.len());
    let mut stats = ConstructionStats::default();
    for r in results {
        let (seq, s) = r?;
        stats.merge(&s);
        out.push(seq);
    }
    Ok((out, stats))
}

/// Dialogues in parallel, output in input order.
pub fn construct(
    dialogues: &[SourceDialogue],
    cfg: &ConstructionConfig,
) -> Result<(Vec<TrainingSequence>, ConstructionStats), ConstructError> {
    cfg.validate()?;
    collect(dialogues.par_iter().map(|d| construct_one(d, cfg)).collect())
}

pub fn construct_serial(
    dialogues: &[SourceDialogue],
    cfg: &ConstructionConfig,
) -> Result<(Vec<TrainingSequence>, ConstructionStats), ConstructError> {
    cfg.validate()?;
    collect(dialogues.iter().map(|d| construct_one(d, cfg)).collect())
}

pub fn read_dialogues(reader: impl BufRead) -> Result<Vec<SourceDialogue>, ConstructError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d = serde_json::from_str(&line).map_err(|e| ConstructError::Parse { line: i + 1, detail: e.to_string() })?;
        out.push(d);
    }
    Ok(out)
}

pub fn write_sequences(mut w: impl Write, seqs: &[TrainingSequence]) -> std::io::Result<()> {
    for s in seqs {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_sequences(reader: impl BufRead) -> Result<Vec<TrainingSequence>, ConstructError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ConstructError::Parse { line: i + 1, detail: e.to_string() })?);
    }
    Ok(out)
}

/// Seeded synthetic corpus for calibration runs and benchmarks.
pub fn synthetic_corpus(n: usize, exchanges: std::ops::RangeInclusive<usize>, seed: u64) -> Vec<SourceDialogue> {
    const WORDS: &[&str] = &[
        "the", "a", "plan", "train", "weather", "is", "was", "we", "could", "maybe", "tomorrow", "book", "why",
        "how", "good", "really", "think", "garden", "river", "coffee", "and", "then", "so", "because",
    ];
    let mut rng = seeded(derive_seed(seed, &["synthetic-corpus"]));
    let text = |rng: &mut Rng, lo: usize, hi: usize| {
        let n = rng.random_range(lo..=hi);
        (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
    };
    (0..n)
        .map(|i| {
            let k = rng.random_range(exchanges.clone());
            let mut turns = Vec::with_capacity(2 * k);
            for _ in 0..k {
                turns.push(SourceTurn { role: Role::User, text: text(&mut rng, 1, 30) });
                turns.push(SourceTurn { role: Role::System, text: text(&mut rng, 1, 45) });
            }
            SourceDialogue { id: format!("syn-{i:06}"), turns }
        })
        .collect()
}
