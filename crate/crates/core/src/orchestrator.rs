//! Duplex state machine.
//!
//! Every flushed user micro-turn goes to the policy together with the history;
//! the control token opening the returned system micro-turn decides what
//! happens to system speech. Speech is a paced token queue standing in for a
//! streaming TTS.
//!
//! [`Engine`] drives the state machine from any clock: replay feeds scripted
//! timestamps, the live server feeds wall time. Identical timings produce
//! identical transcripts.

use std::collections::VecDeque;
use std::io::Write;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{AsrPartialEvent, IngestError, MicroTurnAggregator};
use crate::policy::{Policy, PolicyError, PolicyRequest, DEFAULT_MAX_SYSTEM_TOKENS};
use crate::protocol::{ControlToken, DialogueHistory, MicroTurn, Role, TokenModel};
use crate::rng::{seeded, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Waiting for the user to yield the floor.
    Listening,
    /// System speech is queued or playing.
    Responding,
    /// Response finished playing; nothing queued.
    Idle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlaybackModel {
    pub tokens_per_second: f64,
    /// Added to the flush time before any action takes effect.
    pub policy_latency_ms: u64,
}

impl Default for PlaybackModel {
    fn default() -> Self {
        Self { tokens_per_second: 3.0, policy_latency_ms: 0 }
    }
}

impl PlaybackModel {
    /// Emit offset of the `k`-th token (0-based) of an utterance.
    pub fn offset_ms(&self, k: usize) -> u64 {
        (1000.0 * k as f64 / self.tokens_per_second).round() as u64
    }

    fn check(&self) -> Result<(), SessionError> {
        // below 1 ms per token consecutive emit times would collide
        if !(self.tokens_per_second > 0.0 && self.tokens_per_second <= 1000.0) {
            return Err(SessionError::Config(format!(
                "tokens_per_second must be in (0, 1000], got {}",
                self.tokens_per_second
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    EmitSpeech { tokens: Vec<String>, t_ms: u64 },
    AbortPlayback { t_ms: u64 },
    PlayBackchannelClip { clip_id: String, t_ms: u64 },
    NoOp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueuedToken {
    pub token: String,
    pub t_ms: u64,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("event {index}: {source}")]
    Ingest {
        index: usize,
        #[source]
        source: IngestError,
    },
    #[error("step expects a user micro-turn, got {0:?}")]
    NotAUserTurn(Role),
    #[error("invalid engine config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct OrchestratorState {
    pub phase: Phase,
    pub playback_queue: VecDeque<QueuedToken>,
    pub history: DialogueHistory,
    pub rng_seed: u64,
    rng: Rng,
    utterance_start_ms: u64,
    utterance_len: usize,
    /// A response was started and not aborted; content continuations extend it.
    utterance_open: bool,
    last_advance_ms: u64,
}

/// What one step did: the system micro-turn recorded in history, the
/// resulting actions, and the policy error if the fail-safe kicked in.
#[derive(Debug)]
pub struct StepOutcome {
    pub system_turn: MicroTurn,
    pub actions: Vec<Action>,
    pub error: Option<PolicyError>,
}

impl OrchestratorState {
    pub fn new(delta_t_ms: u64, rng_seed: u64) -> Self {
        Self {
            phase: Phase::Listening,
            playback_queue: VecDeque::new(),
            history: DialogueHistory::new(delta_t_ms),
            rng_seed,
            rng: seeded(rng_seed),
            utterance_start_ms: 0,
            utterance_len: 0,
            utterance_open: false,
            last_advance_ms: 0,
        }
    }

    pub fn next_emit_ms(&self) -> Option<u64> {
        self.playback_queue.front().map(|q| q.t_ms)
    }

    /// One user micro-turn in, one system micro-turn and its actions out.
    pub fn step(
        &mut self,
        user_turn: MicroTurn,
        policy: &mut dyn Policy,
        cfg: &EngineConfig,
    ) -> Result<StepOutcome, SessionError> {
        if user_turn.role != Role::User {
            return Err(SessionError::NotAUserTurn(user_turn.role));
        }
        let t = user_turn.t_start;
        self.history.push(user_turn);
        let started = Instant::now();
        let decided = {
            let req = PolicyRequest {
                history: &self.history,
                delta_t_ms: self.history.delta_t_ms,
                max_system_tokens: cfg.max_system_tokens,
                system_speaking: self.phase == Phase::Responding,
            };
            policy.decide(&req).and_then(|r| r.check().map(|()| r))
        };
        let latency = if cfg.measure_latency {
            started.elapsed().as_millis() as u64
        } else {
            cfg.playback.policy_latency_ms
        };
        let t_act = t + latency;

        let result = decided.and_then(|r| {
            let turn = r.micro_turn;
            let actions = self.dispatch(&turn, t_act, cfg)?;
            Ok((turn, actions))
        });
        let outcome = match result {
            Ok((turn, actions)) => {
                let turn = turn.at(t);
                self.history.push(turn.clone());
                StepOutcome { system_turn: turn, actions, error: None }
            }
            Err(e) => {
                let turn = MicroTurn::system(ControlToken::UserIsSpeaking).at(t);
                self.history.push(turn.clone());
                StepOutcome { system_turn: turn, actions: vec![Action::NoOp], error: Some(e) }
            }
        };
        Ok(outcome)
    }

    fn dispatch(&mut self, turn: &MicroTurn, t: u64, cfg: &EngineConfig) -> Result<Vec<Action>, PolicyError> {
        let responding = self.phase == Phase::Responding;
        let actions = match turn.control {
            Some(ControlToken::UserIsSpeaking) | Some(ControlToken::UserIsThinking) => vec![Action::NoOp],
            Some(ControlToken::UserFinishSpeaking) => {
                let mut out = Vec::new();
                if responding {
                    self.abort();
                    out.push(Action::AbortPlayback { t_ms: t });
                }
                self.start_utterance(&turn.tokens, t, &cfg.playback);
                out.push(Action::EmitSpeech { tokens: turn.tokens.clone(), t_ms: t });
                out
            }
            Some(ControlToken::UserIsInterrupting) => {
                if responding {
                    self.abort();
                    self.phase = Phase::Listening;
                    vec![Action::AbortPlayback { t_ms: t }]
                } else {
                    self.utterance_open = false;
                    vec![Action::NoOp]
                }
            }
            Some(ControlToken::UserBackchannel) | None => {
                if turn.has_content() {
                    self.continue_utterance(&turn.tokens, t, &cfg.playback)?;
                }
                vec![Action::NoOp]
            }
            Some(ControlToken::SystemBackchannel) => {
                let clip = self.rng.random_range(0..cfg.backchannel_clips.max(1));
                vec![Action::PlayBackchannelClip { clip_id: format!("bc{clip}"), t_ms: t }]
            }
            Some(c @ (ControlToken::NoVoice | ControlToken::Eos)) => {
                return Err(PolicyError::Protocol(crate::ProtocolError::IllegalControl {
                    token: c,
                    role: Role::System,
                }))
            }
        };
        Ok(actions)
    }

    fn abort(&mut self) {
        self.playback_queue.clear();
        self.utterance_open = false;
    }

    fn start_utterance(&mut self, tokens: &[String], t: u64, model: &PlaybackModel) {
        self.playback_queue.clear();
        self.utterance_start_ms = t;
        self.utterance_len = 0;
        self.utterance_open = true;
        self.enqueue(tokens, model);
        self.phase = Phase::Responding;
    }

    fn continue_utterance(&mut self, tokens: &[String], t: u64, model: &PlaybackModel) -> Result<(), PolicyError> {
        if !self.utterance_open {
            return Err(PolicyError::MalformedResponse(
                "response content without <user finish speaking>".into(),
            ));
        }
        if self.playback_queue.is_empty() {
            // previous chunk already finished playing; resume from now
            self.utterance_start_ms = t;
            self.utterance_len = 0;
        }
        self.enqueue(tokens, model);
        self.phase = Phase::Responding;
        Ok(())
    }

    fn enqueue(&mut self, tokens: &[String], model: &PlaybackModel) {
        for tok in tokens {
            let t_ms = self.utterance_start_ms + model.offset_ms(self.utterance_len);
            self.playback_queue.push_back(QueuedToken { token: tok.clone(), t_ms });
            self.utterance_len += 1;
        }
    }

    /// Pop every queued token due at or before `now_ms`.
    pub fn advance_playback(&mut self, now_ms: u64) -> Vec<QueuedToken> {
        let now_ms = now_ms.max(self.last_advance_ms);
        self.last_advance_ms = now_ms;
        let mut out = Vec::new();
        while self.playback_queue.front().is_some_and(|q| q.t_ms <= now_ms) {
            out.extend(self.playback_queue.pop_front());
        }
        if self.phase == Phase::Responding && self.playback_queue.is_empty() {
            self.phase = Phase::Idle;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub delta_t_ms: u64,
    pub playback: PlaybackModel,
    pub max_system_tokens: usize,
    pub seed: u64,
    pub backchannel_clips: usize,
    /// Live mode: use measured policy wall time instead of the fixed latency.
    pub measure_latency: bool,
    pub token_model: TokenModel,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            delta_t_ms: 600,
            playback: PlaybackModel::default(),
            max_system_tokens: DEFAULT_MAX_SYSTEM_TOKENS,
            seed: 0,
            backchannel_clips: 4,
            measure_latency: false,
            token_model: TokenModel::Whitespace,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    UserText,
    Flush,
    Policy,
    PolicyError,
    EmitSpeech,
    Speech,
    Abort,
    BackchannelClip,
    NoOp,
}

/// One line of a session transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub t_ms: u64,
    pub kind: RecordKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlToken>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl TranscriptRecord {
    fn bare(t_ms: u64, kind: RecordKind) -> Self {
        Self { t_ms, kind, role: None, control: None, tokens: None, clip_id: None, detail: None }
    }

    fn turn(kind: RecordKind, turn: &MicroTurn) -> Self {
        Self {
            role: Some(turn.role),
            control: turn.control,
            tokens: Some(turn.tokens.clone()),
            ..Self::bare(turn.t_start, kind)
        }
    }

    fn action(action: &Action, t_flush: u64) -> Self {
        match action {
            Action::EmitSpeech { tokens, t_ms } => {
                Self { tokens: Some(tokens.clone()), ..Self::bare(*t_ms, RecordKind::EmitSpeech) }
            }
            Action::AbortPlayback { t_ms } => Self::bare(*t_ms, RecordKind::Abort),
            Action::PlayBackchannelClip { clip_id, t_ms } => {
                Self { clip_id: Some(clip_id.clone()), ..Self::bare(*t_ms, RecordKind::BackchannelClip) }
            }
            Action::NoOp => Self::bare(t_flush, RecordKind::NoOp),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionTranscript {
    pub records: Vec<TranscriptRecord>,
}

impl SessionTranscript {
    pub fn write_ndjson(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> String {
        let mut buf = Vec::new();
        self.write_ndjson(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn of_kind(&self, kind: RecordKind) -> impl Iterator<Item = &TranscriptRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }
}

/// Clock-agnostic session driver: ingestion, flush clock, orchestrator and
/// policy behind a push/advance interface.
pub struct Engine<P: Policy> {
    state: OrchestratorState,
    aggregator: MicroTurnAggregator,
    policy: P,
    cfg: EngineConfig,
    events_seen: usize,
    last_event_ms: Option<u64>,
}

impl<P: Policy> Engine<P> {
    pub fn new(policy: P, cfg: EngineConfig) -> Result<Self, SessionError> {
        cfg.playback.check()?;
        let aggregator = MicroTurnAggregator::new(cfg.delta_t_ms, cfg.token_model.clone())
            .map_err(|e| SessionError::Config(e.to_string()))?;
        Ok(Self {
            state: OrchestratorState::new(cfg.delta_t_ms, cfg.seed),
            aggregator,
            policy,
            cfg,
            events_seen: 0,
            last_event_ms: None,
        })
    }

    pub fn state(&self) -> &OrchestratorState {
        &self.state
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    /// Earliest time at which [`Engine::advance_to`] has work to do.
    pub fn next_deadline(&self) -> u64 {
        let flush = self.aggregator.next_flush_ms();
        self.state.next_emit_ms().map_or(flush, |p| p.min(flush))
    }

    /// Ingest one ASR partial. Flushes due at or before its timestamp run first.
    pub fn push_event(&mut self, ev: &AsrPartialEvent) -> Result<Vec<TranscriptRecord>, SessionError> {
        let index = self.events_seen;
        if let Some(last) = self.last_event_ms {
            if ev.t_ms < last {
                return Err(SessionError::Ingest {
                    index,
                    source: IngestError::OutOfOrderEvent { t_ms: ev.t_ms, last_ms: last },
                });
            }
        }
        let mut out = self.advance_to(ev.t_ms)?;
        self.aggregator.ingest(ev).map_err(|source| SessionError::Ingest { index, source })?;
        self.events_seen += 1;
        self.last_event_ms = Some(ev.t_ms);
        out.push(TranscriptRecord {
            role: Some(Role::User),
            tokens: Some(self.cfg.token_model.tokenize(&ev.text_delta)),
            ..TranscriptRecord::bare(ev.t_ms, RecordKind::UserText)
        });
        Ok(out)
    }

    /// Run every playback emission and flush due at or before `now_ms`, in
    /// time order; a token due on a flush instant plays before the flush.
    pub fn advance_to(&mut self, now_ms: u64) -> Result<Vec<TranscriptRecord>, SessionError> {
        let mut out = Vec::new();
        loop {
            let flush = self.aggregator.next_flush_ms();
            let play = self.state.next_emit_ms();
            match play {
                Some(p) if p <= flush && p <= now_ms => {
                    for q in self.state.advance_playback(p) {
                        out.push(TranscriptRecord {
                            tokens: Some(vec![q.token]),
                            ..TranscriptRecord::bare(q.t_ms, RecordKind::Speech)
                        });
                    }
                }
                _ if flush <= now_ms => {
                    self.state.advance_playback(flush);
                    let user = self.aggregator.flush_next();
                    out.push(TranscriptRecord::turn(RecordKind::Flush, &user));
                    let outcome = self.state.step(user, &mut self.policy, &self.cfg)?;
                    if let Some(err) = &outcome.error {
                        out.push(TranscriptRecord {
                            detail: Some(err.to_string()),
                            ..TranscriptRecord::bare(flush, RecordKind::PolicyError)
                        });
                    }
                    out.push(TranscriptRecord::turn(RecordKind::Policy, &outcome.system_turn));
                    out.extend(outcome.actions.iter().map(|a| TranscriptRecord::action(a, flush)));
                }
                _ => break,
            }
        }
        Ok(out)
    }
}

/// Replay a scripted event stream up to `horizon_ms`.
pub fn run_session(
    events: &[AsrPartialEvent],
    horizon_ms: u64,
    policy: &mut dyn Policy,
    cfg: &EngineConfig,
) -> Result<SessionTranscript, SessionError> {
    let mut engine = Engine::new(policy, cfg.clone())?;
    let mut records = Vec::new();
    for ev in events.iter().filter(|e| e.t_ms <= horizon_ms) {
        records.extend(engine.push_event(ev)?);
    }
    records.extend(engine.advance_to(horizon_ms)?);
    Ok(SessionTranscript { records })
}

impl<P: Policy + ?Sized> Policy for &mut P {
    fn decide(
        &mut self,
        req: &PolicyRequest<'_>,
    ) -> Result<crate::policy::PolicyResponse, PolicyError> {
        (**self).decide(req)
    }

    fn name(&self) -> &'static str {
        (**self).name()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::policy::PolicyResponse;
    use crate::protocol::{toks, validate_turns};

    /// Replies from a fixed list, then `<user is speaking>`.
    struct Scripted(VecDeque<Result<MicroTurn, PolicyError>>);

    impl Scripted {
        fn new(turns: Vec<MicroTurn>) -> Self {
            Self(turns.into_iter().map(Ok).collect())
        }
    }

    impl Policy for Scripted {
        fn decide(&mut self, _: &PolicyRequest<'_>) -> Result<PolicyResponse, PolicyError> {
            self.0
                .pop_front()
                .unwrap_or_else(|| Ok(MicroTurn::system(ControlToken::UserIsSpeaking)))
                .map(PolicyResponse::new)
        }

        fn name(&self) -> &'static str {
            "scripted"
        }
    }

    fn ufs(words: &[&str]) -> MicroTurn {
        MicroTurn::system_with(Some(ControlToken::UserFinishSpeaking), toks(words))
    }

    fn steps(replies: Vec<MicroTurn>, flushes: &[u64]) -> (OrchestratorState, Vec<StepOutcome>) {
        let cfg = EngineConfig::default();
        let mut p = Scripted::new(replies);
        let mut s = OrchestratorState::new(600, 1);
        let out = flushes
            .iter()
            .map(|&t| {
                s.advance_playback(t);
                s.step(MicroTurn::no_voice().at(t), &mut p, &cfg).unwrap()
            })
            .collect();
        (s, out)
    }

    #[test]
    fn finish_speaking_starts_paced_playback() {
        let (s, out) = steps(vec![ufs(&["a", "b", "c", "d"])], &[600]);
        assert_eq!(out[0].actions, vec![Action::EmitSpeech { tokens: toks(&["a", "b", "c", "d"]), t_ms: 600 }]);
        assert_eq!(s.phase, Phase::Responding);
        let times: Vec<u64> = s.playback_queue.iter().map(|q| q.t_ms).collect();
        assert_eq!(times, vec![600, 933, 1267, 1600]);
    }

    #[test]
    fn finish_speaking_while_responding_restarts() {
        let (s, out) = steps(vec![ufs(&["a", "b", "c", "d", "e"]), ufs(&["x"])], &[600, 1200]);
        assert_eq!(
            out[1].actions,
            vec![Action::AbortPlayback { t_ms: 1200 }, Action::EmitSpeech { tokens: toks(&["x"]), t_ms: 1200 }]
        );
        assert_eq!(s.playback_queue.iter().map(|q| q.token.as_str()).collect::<Vec<_>>(), vec!["x"]);
    }

    #[test]
    fn interruption() {
        let uii = MicroTurn::system(ControlToken::UserIsInterrupting);
        let (s, out) = steps(vec![ufs(&["a", "b", "c", "d", "e"]), uii.clone()], &[600, 1200]);
        assert_eq!(out[1].actions, vec![Action::AbortPlayback { t_ms: 1200 }]);
        assert_eq!(s.phase, Phase::Listening);
        assert!(s.playback_queue.is_empty());

        // nothing playing: nothing to stop, but the utterance is closed
        let (s, out) = steps(vec![ufs(&["a"]), uii, MicroTurn::system_with(None, toks(&["more"]))], &[600, 1800, 2400]);
        assert_eq!(out[1].actions, vec![Action::NoOp]);
        assert!(out[2].error.is_some());
        assert_eq!(s.history.last().unwrap().control, Some(ControlToken::UserIsSpeaking));
    }

    #[test]
    fn continuation_extends_or_resumes() {
        let cont = MicroTurn::system_with(None, toks(&["c", "d"]));
        let (s, out) = steps(vec![ufs(&["a", "b", "x", "y"]), cont.clone()], &[600, 1200]);
        assert_eq!(out[1].actions, vec![Action::NoOp]);
        let times: Vec<u64> = s.playback_queue.iter().map(|q| q.t_ms).collect();
        // "a" "b" played; continuation keeps the utterance pace
        assert_eq!(times, vec![1267, 1600, 1933, 2267]);

        let (s, _) = steps(vec![ufs(&["a"]), cont], &[600, 1800]);
        let times: Vec<u64> = s.playback_queue.iter().map(|q| q.t_ms).collect();
        assert_eq!(times, vec![1800, 2133]);
        assert_eq!(s.phase, Phase::Responding);

        let ubc = MicroTurn::system_with(Some(ControlToken::UserBackchannel), toks(&["go"]));
        let (s, out) = steps(vec![ufs(&["a", "b", "c", "d"]), ubc], &[600, 1200]);
        assert_eq!(out[1].actions, vec![Action::NoOp]);
        assert_eq!(s.playback_queue.back().unwrap().token, "go");
    }

    #[test]
    fn content_without_open_utterance_fails_safe() {
        let (s, out) = steps(vec![MicroTurn::system_with(None, toks(&["hi"]))], &[600]);
        assert_eq!(out[0].actions, vec![Action::NoOp]);
        assert!(matches!(out[0].error, Some(PolicyError::MalformedResponse(_))));
        assert_eq!(out[0].system_turn, MicroTurn::system(ControlToken::UserIsSpeaking).at(600));
        assert!(validate_turns(&s.history.turns).is_empty());
        assert!(s.playback_queue.is_empty());
    }

    #[test]
    fn policy_errors_and_illegal_turns_fail_safe() {
        let cfg = EngineConfig::default();
        let mut s = OrchestratorState::new(600, 1);
        let mut p = Scripted(VecDeque::from(vec![
            Err(PolicyError::Transport("down".into())),
            Ok(MicroTurn { role: Role::System, control: Some(ControlToken::NoVoice), tokens: vec![], t_start: 0 }),
            Ok(MicroTurn::user(toks(&["wrong", "role"]))),
        ]));
        for t in [600, 1200, 1800] {
            let o = s.step(MicroTurn::no_voice().at(t), &mut p, &cfg).unwrap();
            assert!(o.error.is_some());
            assert_eq!(o.actions, vec![Action::NoOp]);
        }
        assert!(matches!(
            s.step(MicroTurn::system(ControlToken::UserIsSpeaking), &mut p, &cfg),
            Err(SessionError::NotAUserTurn(Role::System))
        ));
    }

    #[test]
    fn backchannel_clips_are_seeded() {
        let sbc = || MicroTurn::system(ControlToken::SystemBackchannel);
        let clips = |seed| {
            let cfg = EngineConfig::default();
            let mut s = OrchestratorState::new(600, seed);
            let mut p = Scripted::new((0..20).map(|_| sbc()).collect());
            (1..=20)
                .map(|k| match &s.step(MicroTurn::no_voice().at(600 * k), &mut p, &cfg).unwrap().actions[..] {
                    [Action::PlayBackchannelClip { clip_id, t_ms }] if *t_ms == 600 * k => clip_id.clone(),
                    other => panic!("{other:?}"),
                })
                .collect::<Vec<_>>()
        };
        let a = clips(3);
        assert_eq!(a, clips(3));
        assert!(a.iter().all(|c| ["bc0", "bc1", "bc2", "bc3"].contains(&c.as_str())));
        assert_ne!(a, clips(4));
    }

    #[test]
    fn policy_latency_shifts_actions() {
        let cfg = EngineConfig { playback: PlaybackModel { policy_latency_ms: 250, ..Default::default() }, ..Default::default() };
        let mut s = OrchestratorState::new(600, 0);
        let o = s.step(MicroTurn::no_voice().at(600), &mut Scripted::new(vec![ufs(&["a"])]), &cfg).unwrap();
        assert_eq!(o.actions, vec![Action::EmitSpeech { tokens: toks(&["a"]), t_ms: 850 }]);
        assert_eq!(o.system_turn.t_start, 600);
    }

    #[test]
    fn engine_orders_playback_before_flush() {
        let cfg = EngineConfig { playback: PlaybackModel { tokens_per_second: 1000.0 / 600.0, ..Default::default() }, ..Default::default() };
        let mut e = Engine::new(Scripted::new(vec![ufs(&["a", "b", "c"])]), cfg).unwrap();
        assert_eq!(e.next_deadline(), 600);
        let recs = e.advance_to(1200).unwrap();
        let kinds: Vec<(RecordKind, u64)> = recs.iter().map(|r| (r.kind, r.t_ms)).collect();
        assert_eq!(
            kinds,
            vec![
                (RecordKind::Flush, 600),
                (RecordKind::Policy, 600),
                (RecordKind::EmitSpeech, 600),
                (RecordKind::Speech, 600),
                (RecordKind::Speech, 1200),
                (RecordKind::Flush, 1200),
                (RecordKind::Policy, 1200),
                (RecordKind::NoOp, 1200),
            ]
        );
        assert_eq!(e.next_deadline(), 1800);
        e.push_event(&AsrPartialEvent::new(1300, "hey")).unwrap();
        assert!(matches!(
            e.push_event(&AsrPartialEvent::new(1299, "late")),
            Err(SessionError::Ingest { index: 1, source: IngestError::OutOfOrderEvent { .. } })
        ));
    }

    #[test]
    fn engine_config_is_checked() {
        for tps in [0.0, -1.0, 2000.0, f64::NAN] {
            let cfg = EngineConfig { playback: PlaybackModel { tokens_per_second: tps, ..Default::default() }, ..Default::default() };
            assert!(matches!(Engine::new(Scripted::new(vec![]), cfg), Err(SessionError::Config(_))));
        }
        let cfg = EngineConfig { delta_t_ms: 0, ..Default::default() };
        assert!(matches!(Engine::new(Scripted::new(vec![]), cfg), Err(SessionError::Config(_))));
    }

    #[test]
    fn transcript_ndjson_roundtrip() {
        let events = vec![AsrPartialEvent::new(100, "hi there")];
        let tr = run_session(&events, 1800, &mut Scripted::new(vec![ufs(&["yo"])]), &EngineConfig::default()).unwrap();
        let back: Vec<TranscriptRecord> =
            tr.to_ndjson().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, tr.records);
        assert_eq!(tr.of_kind(RecordKind::Flush).count(), 3);
    }

    fn arb_reply() -> impl Strategy<Value = MicroTurn> {
        use ControlToken::*;
        let words = prop::collection::vec("[a-z]{1,4}", 1..12);
        prop_oneof![
            Just(MicroTurn::system(UserIsSpeaking)),
            Just(MicroTurn::system(UserIsThinking)),
            Just(MicroTurn::system(UserIsInterrupting)),
            Just(MicroTurn::system(SystemBackchannel)),
            words.clone().prop_map(|w| MicroTurn::system_with(Some(UserFinishSpeaking), w)),
            words.clone().prop_map(|w| MicroTurn::system_with(None, w)),
            words.prop_map(|w| MicroTurn::system_with(Some(UserBackchannel), w)),
        ]
    }

    proptest! {
        #[test]
        fn any_policy_keeps_history_valid_and_speech_ordered(
            replies in prop::collection::vec(arb_reply(), 1..40),
            words in prop::collection::vec((0u64..30_000, "[a-z]{1,5}"), 0..30),
        ) {
            let mut events: Vec<AsrPartialEvent> = words.into_iter().map(|(t, w)| AsrPartialEvent::new(t, w)).collect();
            events.sort_by_key(|e| e.t_ms);
            let n = replies.len() as u64;
            let mut p = Scripted::new(replies);
            let mut engine = Engine::new(&mut p, EngineConfig::default()).unwrap();
            let mut recs = Vec::new();
            for ev in &events {
                recs.extend(engine.push_event(ev).unwrap());
            }
            recs.extend(engine.advance_to(600 * n + 20_000).unwrap());
            prop_assert!(validate_turns(&engine.state().history.turns).is_empty());
            let speech: Vec<u64> = recs.iter().filter(|r| r.kind == RecordKind::Speech).map(|r| r.t_ms).collect();
            // an abort on a flush instant can follow a token due at that instant
            prop_assert!(speech.windows(2).all(|w| w[0] <= w[1]));
            let times: Vec<u64> = recs.iter().filter(|r| r.kind != RecordKind::EmitSpeech).map(|r| r.t_ms).collect();
            prop_assert!(times.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
