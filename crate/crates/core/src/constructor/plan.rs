use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::ingest::AsrPartialEvent;
use crate::protocol::{ControlToken, MicroTurn, Role, TokenModel};
use crate::rng::Rng;
use crate::scenarios::{Cue, CueKind, IntervalLabel, LabeledInterval, Truth, Utterance};

use super::{ConstructError, ConstructionConfig, ConstructionStats, SourceDialogue, BC_MARKER};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserChunk {
    pub tokens: Vec<String>,
    /// A `<BC/>` marker sat right after this chunk in the source.
    pub marker_after: bool,
    /// Supervise `<system backchannel>` after this chunk.
    pub system_backchannel: bool,
    /// Silent (`<no voice>`, `<user is speaking>`) pairs after this chunk.
    pub pause_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemChunk {
    pub tokens: Vec<String>,
    /// User backchannel spoken in place of the `<no voice>` before this chunk.
    pub user_backchannel: Option<Vec<String>>,
}

/// One user turn and the system turn answering it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub user: Vec<UserChunk>,
    /// This user turn barges in on the previous response.
    pub interrupts_previous: bool,
    pub response: Vec<SystemChunk>,
    /// Chunks played before the next user turn cut in; `None` if completed.
    pub cut_after: Option<usize>,
    /// `(<no voice>, <user is thinking>)` pairs after a completed response.
    /// The first pair reuses the `<no voice>` that follows every system chunk.
    pub thinking_pairs: usize,
}

impl Exchange {
    pub fn played(&self) -> &[SystemChunk] {
        &self.response[..self.cut_after.unwrap_or(self.response.len())]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialoguePlan {
    pub id: String,
    pub exchanges: Vec<Exchange>,
}

/// A constructed dialogue laid out on a flush clock: micro-turn pair `i`
/// occupies `[iΔt, (i+1)Δt)` and is flushed at `(i+1)Δt`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Replay {
    pub events: Vec<AsrPartialEvent>,
    pub truth: Truth,
    pub horizon_ms: u64,
    /// System micro-turns the oracle should produce, in order.
    pub expected: Vec<MicroTurn>,
}

impl DialoguePlan {
    /// Render the interleaved micro-turn sequence.
    pub fn micro_turns(&self) -> Vec<MicroTurn> {
        let mut out = Vec::new();
        let n = self.exchanges.len();
        for (ei, e) in self.exchanges.iter().enumerate() {
            let last = e.user.len() - 1;
            for (i, c) in e.user.iter().enumerate() {
                out.push(MicroTurn::user(c.tokens.clone()));
                let control = if i == 0 && e.interrupts_previous {
                    ControlToken::UserIsInterrupting
                } else if c.system_backchannel && i < last {
                    ControlToken::SystemBackchannel
                } else {
                    ControlToken::UserIsSpeaking
                };
                out.push(MicroTurn::system(control));
                if i < last {
                    for _ in 0..c.pause_pairs {
                        out.push(MicroTurn::no_voice());
                        out.push(MicroTurn::system(ControlToken::UserIsSpeaking));
                    }
                }
            }
            for (j, c) in e.played().iter().enumerate() {
                match &c.user_backchannel {
                    Some(word) if j > 0 => out.push(MicroTurn::user(word.clone())),
                    _ => out.push(MicroTurn::no_voice()),
                }
                let control = match (j, &c.user_backchannel) {
                    (0, _) => Some(ControlToken::UserFinishSpeaking),
                    (_, Some(_)) => Some(ControlToken::UserBackchannel),
                    _ => None,
                };
                out.push(MicroTurn::system_with(control, c.tokens.clone()));
            }
            let interrupted = self.exchanges.get(ei + 1).is_some_and(|x| x.interrupts_previous);
            if !interrupted {
                out.push(MicroTurn::no_voice());
                let k = if ei + 1 < n { e.thinking_pairs.max(1) } else { e.thinking_pairs };
                for p in 0..k {
                    if p > 0 {
                        out.push(MicroTurn::no_voice());
                    }
                    out.push(MicroTurn::system(ControlToken::UserIsThinking));
                }
            }
        }
        out
    }

    /// Timed events and ground truth whose oracle replay reproduces
    /// [`DialoguePlan::micro_turns`]. Needs `Δt` above the longest user chunk
    /// in milliseconds (words are 1 ms apart).
    pub fn replay(&self, delta_t_ms: u64) -> Replay {
        let turns = self.micro_turns();
        let mut events = Vec::new();
        let mut cues = Vec::new();
        let mut utterances = Vec::new();
        let mut spans: Vec<(u64, u64)> = Vec::new();
        let mut pair = 0u64;
        let mut say = |pair: u64, tokens: &[String], events: &mut Vec<AsrPartialEvent>| -> (u64, u64) {
            let t0 = pair * delta_t_ms + 1;
            for (j, tok) in tokens.iter().enumerate() {
                events.push(AsrPartialEvent::new(t0 + j as u64, tok.clone()));
            }
            let span = (t0, t0 + tokens.len() as u64 - 1);
            spans.push(span);
            span
        };
        for (ei, e) in self.exchanges.iter().enumerate() {
            let last = e.user.len() - 1;
            let mut first_ms = 0;
            let mut end_ms = 0;
            for (i, c) in e.user.iter().enumerate() {
                let (a, b) = say(pair, &c.tokens, &mut events);
                pair += 1;
                if i == 0 {
                    first_ms = a;
                    if e.interrupts_previous {
                        cues.push(Cue { kind: CueKind::InterruptOnset, t_ms: a });
                    }
                }
                end_ms = b;
                if i < last {
                    if c.system_backchannel && !(i == 0 && e.interrupts_previous) {
                        cues.push(Cue { kind: CueKind::BackchannelCue, t_ms: b });
                    }
                    if c.pause_pairs > 0 {
                        cues.push(Cue { kind: CueKind::PauseOnset, t_ms: b });
                    }
                    pair += c.pause_pairs as u64;
                }
            }
            cues.push(Cue { kind: CueKind::UserEnd, t_ms: end_ms });
            let response: Vec<String> = e.response.iter().flat_map(|c| c.tokens.iter().cloned()).collect();
            utterances.push(Utterance { start_ms: first_ms, end_ms, response: Some(response) });
            for (j, c) in e.played().iter().enumerate() {
                if let (true, Some(word)) = (j > 0, &c.user_backchannel) {
                    let (a, _) = say(pair, word, &mut events);
                    cues.push(Cue { kind: CueKind::UserBackchannel, t_ms: a });
                }
                pair += 1;
            }
            let interrupted = self.exchanges.get(ei + 1).is_some_and(|x| x.interrupts_previous);
            if !interrupted {
                // a trailing dangling <no voice> still gets flushed
                pair += e.thinking_pairs.max(1) as u64;
            }
        }
        let horizon_ms = pair * delta_t_ms;

        // speaking spans, pauses inside an utterance, silence elsewhere
        let mut intervals: Vec<LabeledInterval> = Vec::new();
        let mut t = 0;
        for (a, b) in spans {
            if a > t {
                let inside = utterances.iter().any(|u| u.start_ms < a && u.end_ms > t);
                let label = if inside { IntervalLabel::Pause } else { IntervalLabel::Silence };
                intervals.push(LabeledInterval { label, start_ms: t, end_ms: a });
            }
            intervals.push(LabeledInterval { label: IntervalLabel::Speaking, start_ms: a, end_ms: b + 1 });
            t = b + 1;
        }
        if horizon_ms > t {
            intervals.push(LabeledInterval { label: IntervalLabel::Silence, start_ms: t, end_ms: horizon_ms });
        }
        cues.sort_by_key(|c| c.t_ms);
        let mut expected: Vec<MicroTurn> = turns.into_iter().filter(|t| t.role == Role::System).collect();
        if self.exchanges.last().is_some_and(|e| e.thinking_pairs == 0) {
            expected.push(MicroTurn::system(ControlToken::UserIsThinking));
        }
        Replay {
            events,
            truth: Truth { horizon_ms, intervals, cues, utterances },
            horizon_ms,
            expected,
        }
    }
}

struct ParsedUserTurn {
    tokens: Vec<String>,
    /// Token counts after which a marker sits.
    markers: BTreeSet<usize>,
}

fn parse_user_text(id: &str, turn: usize, text: &str) -> Result<ParsedUserTurn, ConstructError> {
    let mut tokens = Vec::new();
    let mut markers = BTreeSet::new();
    for word in text.split_whitespace() {
        let pieces: Vec<&str> = word.split(BC_MARKER).collect();
        for (k, piece) in pieces.iter().enumerate() {
            if k > 0 {
                if !pieces[k - 1].is_empty() && !piece.is_empty() {
                    return Err(ConstructError::MisalignedMarker { id: id.to_string(), turn });
                }
                markers.insert(tokens.len());
            }
            if !piece.is_empty() {
                tokens.push(piece.to_string());
            }
        }
    }
    Ok(ParsedUserTurn { tokens, markers })
}

fn check_no_controls(id: &str, turn: usize, text: &str) -> Result<(), ConstructError> {
    let found = TokenModel::Whitespace.tokenize(text).iter().find_map(|t| ControlToken::from_surface(t));
    match found {
        Some(token) => Err(ConstructError::ControlInText { id: id.to_string(), turn, token }),
        None => Ok(()),
    }
}

/// Chunk every turn. User chunks draw their length from
/// `[user_len_min, user_len_max]` and end early at a `<BC/>` marker; system
/// chunks are `system_len` tokens. The returned plan already renders to a
/// legal sequence: no pauses, no interruptions, no thinking beyond the
/// mandatory `<no voice>` after each response.
pub fn segment_dialogue(
    d: &SourceDialogue,
    cfg: &ConstructionConfig,
    rng: &mut Rng,
    stats: &mut ConstructionStats,
) -> Result<DialoguePlan, ConstructError> {
    let id = d.id.as_str();
    if d.turns.is_empty() {
        return Err(ConstructError::EmptyDialogue { id: id.to_string() });
    }
    for (i, t) in d.turns.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::User } else { Role::System };
        if t.role != expected {
            return Err(ConstructError::Alternation { id: id.to_string(), turn: i });
        }
        check_no_controls(id, i, &t.text)?;
    }
    if d.turns.len() % 2 == 1 {
        return Err(ConstructError::UnansweredUserTurn { id: id.to_string() });
    }
    let mut exchanges = Vec::with_capacity(d.turns.len() / 2);
    for (k, pair) in d.turns.chunks(2).enumerate() {
        let (ui, si) = (2 * k, 2 * k + 1);
        let parsed = parse_user_text(id, ui, &pair[0].text)?;
        if parsed.tokens.is_empty() {
            return Err(ConstructError::EmptyTurn { id: id.to_string(), turn: ui });
        }
        let n = parsed.tokens.len();
        stats.markers_dropped += parsed.markers.iter().filter(|&&m| m == 0).count();
        let mut user = Vec::new();
        let mut start = 0;
        while start < n {
            let len = rng.random_range(cfg.user_len_min..=cfg.user_len_max);
            stats.draw_len(len);
            let mut end = (start + len).min(n);
            if let Some(&m) = parsed.markers.range(start + 1..end).next() {
                end = m;
            }
            user.push(UserChunk {
                tokens: parsed.tokens[start..end].to_vec(),
                marker_after: parsed.markers.contains(&end),
                system_backchannel: false,
                pause_pairs: 0,
            });
            start = end;
        }

        let sys = TokenModel::Whitespace.tokenize(&pair[1].text);
        if sys.is_empty() {
            return Err(ConstructError::EmptyTurn { id: id.to_string(), turn: si });
        }
        let response = sys
            .chunks(cfg.system_len)
            .map(|c| SystemChunk { tokens: c.to_vec(), user_backchannel: None })
            .collect();
        exchanges.push(Exchange { user, interrupts_previous: false, response, cut_after: None, thinking_pairs: 0 });
    }
    Ok(DialoguePlan { id: id.to_string(), exchanges })
}

/// Markers on non-final chunks become `<system backchannel>` supervision;
/// a marker at the end of a user turn loses to the turn transition.
pub fn apply_bc_markers(plan: &mut DialoguePlan, cfg: &ConstructionConfig, stats: &mut ConstructionStats) {
    for e in &mut plan.exchanges {
        let last = e.user.len() - 1;
        for (i, c) in e.user.iter_mut().enumerate() {
            if !c.marker_after {
                continue;
            }
            if i < last && cfg.enable_system_backchannel {
                c.system_backchannel = true;
                stats.markers_applied += 1;
            } else {
                stats.markers_dropped += 1;
            }
        }
    }
}

/// Cut exchange `exchange`'s response after `boundary` chunks and let the
/// next user turn start there.
pub fn interrupt_at(plan: &mut DialoguePlan, exchange: usize, boundary: usize) -> Result<(), ConstructError> {
    if exchange + 1 >= plan.exchanges.len() {
        return Err(ConstructError::NoFollowupQuestion { id: plan.id.clone(), exchange });
    }
    let chunks = plan.exchanges[exchange].response.len();
    if boundary == 0 || boundary >= chunks {
        return Err(ConstructError::BoundaryOutOfRange { exchange, boundary, chunks });
    }
    plan.exchanges[exchange].cut_after = Some(boundary);
    plan.exchanges[exchange].thinking_pairs = 0;
    plan.exchanges[exchange + 1].interrupts_previous = true;
    Ok(())
}

/// Each response with a following user turn and at least two chunks is cut
/// with probability `p_interrupt` at a uniform boundary in `[1, chunks - 1]`.
pub fn inject_interruptions(
    plan: &mut DialoguePlan,
    cfg: &ConstructionConfig,
    rng: &mut Rng,
    stats: &mut ConstructionStats,
) {
    for ei in 0..plan.exchanges.len().saturating_sub(1) {
        let chunks = plan.exchanges[ei].response.len();
        if chunks < 2 {
            continue;
        }
        stats.interrupt_eligible += 1;
        if rng.random_bool(cfg.p_interrupt) {
            let boundary = rng.random_range(1..chunks);
            interrupt_at(plan, ei, boundary).expect("eligibility checked above");
            stats.interruptions += 1;
        }
    }
}

/// After each non-final user chunk, with probability `p_pause`, insert
/// `[pause_turns_min, pause_turns_max]` silent pairs.
pub fn inject_pauses(plan: &mut DialoguePlan, cfg: &ConstructionConfig, rng: &mut Rng, stats: &mut ConstructionStats) {
    for e in &mut plan.exchanges {
        if e.interrupts_previous && !cfg.pause_in_interrupts {
            continue;
        }
        let last = e.user.len() - 1;
        for c in &mut e.user[..last] {
            stats.pause_eligible += 1;
            if rng.random_bool(cfg.p_pause) {
                c.pause_pairs = rng.random_range(cfg.pause_turns_min..=cfg.pause_turns_max);
                stats.pauses += 1;
                stats.pause_pairs += c.pause_pairs;
            }
        }
    }
}

/// Each played system chunk that has a successor replaces the following
/// `<no voice>` with a lexicon word with probability `p_user_backchannel`.
pub fn inject_user_backchannels(
    plan: &mut DialoguePlan,
    cfg: &ConstructionConfig,
    rng: &mut Rng,
    stats: &mut ConstructionStats,
) {
    let lexicon: Vec<Vec<String>> = cfg
        .user_backchannel_lexicon
        .iter()
        .map(|w| TokenModel::Whitespace.tokenize(w))
        .filter(|w| !w.is_empty())
        .collect();
    for e in &mut plan.exchanges {
        let played = e.cut_after.unwrap_or(e.response.len());
        for c in &mut e.response[1..played] {
            stats.user_backchannel_eligible += 1;
            if rng.random_bool(cfg.p_user_backchannel) {
                c.user_backchannel = lexicon.choose(rng).cloned();
                stats.user_backchannels += 1;
            }
        }
    }
}

/// Every completed response is followed by
/// `[thinking_turns_min, thinking_turns_max]` thinking pairs.
pub fn inject_thinking(plan: &mut DialoguePlan, cfg: &ConstructionConfig, rng: &mut Rng, stats: &mut ConstructionStats) {
    for e in &mut plan.exchanges {
        if e.cut_after.is_some() {
            continue;
        }
        e.thinking_pairs = rng.random_range(cfg.thinking_turns_min..=cfg.thinking_turns_max);
        stats.responses_completed += 1;
        stats.thinking_pairs += e.thinking_pairs;
    }
}
