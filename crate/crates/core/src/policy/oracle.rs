use std::collections::VecDeque;

use crate::protocol::{ControlToken, MicroTurn};
use crate::scenarios::{CueKind, Truth};

use super::{chunk, Policy, PolicyError, PolicyRequest, PolicyResponse};

/// Replays ground-truth labels as the control tokens the training-data
/// constructor would supervise for the same interval.
///
/// The decision for a flush at `t` looks at the interval `[t - Δt, t)`.
/// Speech is never answered in the flush that carries its last word: the
/// response starts on the first silent flush after an utterance ends, exactly
/// as in constructed sequences. Among cues in one window, interrupt beats
/// system backchannel beats user backchannel. Responses are delivered
/// `max_system_tokens` at a time over consecutive system micro-turns.
#[derive(Debug, Clone)]
pub struct OraclePolicy {
    truth: Truth,
    system_backchannel: bool,
    pending: VecDeque<Vec<String>>,
    answered: Vec<bool>,
    responded: bool,
}

impl OraclePolicy {
    pub fn new(truth: Truth) -> Self {
        let answered = vec![false; truth.utterances.len()];
        Self { truth, system_backchannel: true, pending: VecDeque::new(), answered, responded: false }
    }

    /// Disable `<system backchannel>` output (the non-backchanneling variant).
    pub fn with_system_backchannel(mut self, enabled: bool) -> Self {
        self.system_backchannel = enabled;
        self
    }

    fn respond(&mut self, i: usize, max_tokens: usize) -> Option<MicroTurn> {
        self.answered[i] = true;
        let response = self.truth.utterances[i].response.as_ref()?;
        let mut chunks: VecDeque<_> = chunk(response, max_tokens).into();
        let first = chunks.pop_front()?;
        self.pending = chunks;
        self.responded = true;
        Some(MicroTurn::system_with(Some(ControlToken::UserFinishSpeaking), first))
    }
}

impl Policy for OraclePolicy {
    fn decide(&mut self, req: &PolicyRequest<'_>) -> Result<PolicyResponse, PolicyError> {
        let user = req.latest_user()?;
        let t = user.t_start;
        let lo = t.saturating_sub(req.delta_t_ms);
        if !self.truth.covers(lo) {
            return Err(PolicyError::MissingAnnotation { t_ms: t });
        }
        let cue_in = |kind| self.truth.cue_in(kind, lo, t);
        let speaking = req.system_speaking || !self.pending.is_empty();

        let turn = if user.has_content() {
            if speaking && cue_in(CueKind::InterruptOnset) {
                self.pending.clear();
                MicroTurn::system(ControlToken::UserIsInterrupting)
            } else if self.system_backchannel && cue_in(CueKind::BackchannelCue) {
                MicroTurn::system(ControlToken::SystemBackchannel)
            } else if speaking && cue_in(CueKind::UserBackchannel) {
                let next = self.pending.pop_front().unwrap_or_default();
                MicroTurn::system_with(Some(ControlToken::UserBackchannel), next)
            } else if speaking {
                return Err(PolicyError::MissingAnnotation { t_ms: t });
            } else {
                MicroTurn::system(ControlToken::UserIsSpeaking)
            }
        } else if let Some(next) = self.pending.pop_front() {
            MicroTurn::system_with(None, next)
        } else if self.truth.utterances.iter().any(|u| u.start_ms < t && u.end_ms >= t) {
            // mid-utterance pause
            MicroTurn::system(ControlToken::UserIsSpeaking)
        } else if let Some(turn) = (0..self.truth.utterances.len())
            .find(|&i| !self.answered[i] && self.truth.utterances[i].end_ms < lo)
            .and_then(|i| self.respond(i, req.max_system_tokens))
        {
            turn
        } else if self.responded {
            MicroTurn::system(ControlToken::UserIsThinking)
        } else {
            MicroTurn::system(ControlToken::UserIsSpeaking)
        };
        Ok(PolicyResponse::new(turn.at(t)))
    }

    fn name(&self) -> &'static str {
        "oracle"
    }
}
