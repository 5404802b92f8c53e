use serde::{Deserialize, Serialize};

use crate::protocol::{ControlToken, MicroTurn, Role, TokenModel};

use super::{Policy, PolicyError, PolicyRequest, PolicyResponse};

/// Tunables for the text-only baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeuristicConfig {
    /// A user micro-turn whose last token ends in one of these is complete.
    pub terminal_punctuation: String,
    /// Speech over the system at least this long is an interruption.
    pub interrupt_min_tokens: usize,
    pub answer: String,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        Self {
            terminal_punctuation: ".?!".into(),
            interrupt_min_tokens: 3,
            answer: "Sure , here is what I think about that .".into(),
        }
    }
}

/// LLM-free baseline: respond after a silent flush that follows a complete
/// sentence, treat long speech over the system as an interruption and short
/// speech as a backchannel.
#[derive(Debug, Clone)]
pub struct HeuristicPolicy {
    cfg: HeuristicConfig,
}

impl HeuristicPolicy {
    pub fn new(cfg: HeuristicConfig) -> Self {
        Self { cfg }
    }

    fn ends_sentence(&self, turn: &MicroTurn) -> bool {
        turn.tokens
            .last()
            .and_then(|t| t.chars().last())
            .is_some_and(|c| self.cfg.terminal_punctuation.contains(c))
    }
}

impl Policy for HeuristicPolicy {
    fn decide(&mut self, req: &PolicyRequest<'_>) -> Result<PolicyResponse, PolicyError> {
        let user = req.latest_user()?;
        let turns = &req.history.turns;
        let last_response = turns
            .iter()
            .rposition(|t| t.role == Role::System && t.control == Some(ControlToken::UserFinishSpeaking));
        let last_content = turns.iter().rposition(|t| t.role == Role::User && t.has_content());
        let unanswered = match (last_content, last_response) {
            (Some(c), Some(r)) => c > r,
            (Some(_), None) => true,
            (None, _) => false,
        };

        let turn = if req.system_speaking {
            if !user.has_content() {
                MicroTurn::system(ControlToken::UserIsThinking)
            } else if user.tokens.len() >= self.cfg.interrupt_min_tokens {
                MicroTurn::system(ControlToken::UserIsInterrupting)
            } else {
                MicroTurn::system(ControlToken::UserBackchannel)
            }
        } else if user.is_silent()
            && unanswered
            && last_content.is_some_and(|i| self.ends_sentence(&turns[i]))
        {
            let mut answer = TokenModel::Whitespace.tokenize(&self.cfg.answer);
            answer.truncate(req.max_system_tokens.max(1));
            MicroTurn::system_with(Some(ControlToken::UserFinishSpeaking), answer)
        } else if last_response.is_some() && !unanswered {
            MicroTurn::system(ControlToken::UserIsThinking)
        } else {
            MicroTurn::system(ControlToken::UserIsSpeaking)
        };
        Ok(PolicyResponse::new(turn.at(user.t_start)))
    }

    fn name(&self) -> &'static str {
        "heuristic"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{parse_canonical, toks, DialogueHistory};

    fn decide(history: &str, speaking: bool) -> MicroTurn {
        let h = DialogueHistory { turns: parse_canonical(history).unwrap(), delta_t_ms: 600 };
        let mut p = HeuristicPolicy::new(HeuristicConfig::default());
        let out = p.decide(&PolicyRequest::new(&h).speaking(speaking)).unwrap();
        out.check().unwrap();
        out.micro_turn
    }

    #[test]
    fn responds_after_silence_following_question() {
        let t = decide("what is rust ? <EOS> <user is speaking> <EOS> <no voice> <EOS>", false);
        assert_eq!(t.control, Some(ControlToken::UserFinishSpeaking));
        assert!(!t.tokens.is_empty() && t.tokens.len() <= 10);
    }

    #[test]
    fn waits_mid_sentence() {
        let t = decide("i was thinking <EOS> <user is speaking> <EOS> <no voice> <EOS>", false);
        assert_eq!(t.control, Some(ControlToken::UserIsSpeaking));
        let t = decide("what is rust ? <EOS>", false);
        assert_eq!(t.control, Some(ControlToken::UserIsSpeaking));
    }

    #[test]
    fn short_speech_over_system_is_backchannel() {
        let t = decide("hi . <EOS> <user finish speaking> hello <EOS> yeah <EOS>", true);
        assert_eq!(t.control, Some(ControlToken::UserBackchannel));
        assert!(t.tokens.is_empty());
    }

    #[test]
    fn long_speech_over_system_interrupts() {
        let t = decide("hi . <EOS> <user finish speaking> hello <EOS> wait stop please <EOS>", true);
        assert_eq!(t, MicroTurn::system(ControlToken::UserIsInterrupting).at(0));
    }

    #[test]
    fn thinks_after_own_response() {
        let t = decide(
            "hi . <EOS> <user finish speaking> hello <EOS> <no voice> <EOS> <user is thinking> <EOS> <no voice> <EOS>",
            false,
        );
        assert_eq!(t.control, Some(ControlToken::UserIsThinking));
        let t = decide("hi . <EOS> <user finish speaking> hello <EOS> <no voice> <EOS>", true);
        assert_eq!(t.control, Some(ControlToken::UserIsThinking));
    }

    #[test]
    fn answer_respects_token_budget() {
        let h = DialogueHistory {
            turns: vec![
                MicroTurn::user(toks(&["go", "."])),
                MicroTurn::system(ControlToken::UserIsSpeaking),
                MicroTurn::no_voice(),
            ],
            delta_t_ms: 600,
        };
        let mut p = HeuristicPolicy::new(HeuristicConfig::default());
        let mut req = PolicyRequest::new(&h);
        req.max_system_tokens = 2;
        assert_eq!(p.decide(&req).unwrap().micro_turn.tokens, toks(&["Sure", ","]));
    }
}
