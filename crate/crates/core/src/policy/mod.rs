//! Decision interface: given the micro-turn history ending in the latest user
//! micro-turn, produce the next system micro-turn.

mod heuristic;
mod oracle;
mod remote;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use heuristic::{HeuristicConfig, HeuristicPolicy};
pub use oracle::OraclePolicy;
pub use remote::{RemotePolicy, WireRequest, WireResponse};

use crate::protocol::{DialogueHistory, MicroTurn, ProtocolError, Role};
use crate::scenarios::Truth;

pub const DEFAULT_MAX_SYSTEM_TOKENS: usize = 10;

#[derive(Debug, Clone)]
pub struct PolicyRequest<'a> {
    /// Ends with the user micro-turn just flushed.
    pub history: &'a DialogueHistory,
    pub delta_t_ms: u64,
    pub max_system_tokens: usize,
    /// Orchestrator context: a system utterance is still playing.
    pub system_speaking: bool,
}

impl<'a> PolicyRequest<'a> {
    pub fn new(history: &'a DialogueHistory) -> Self {
        Self {
            history,
            delta_t_ms: history.delta_t_ms,
            max_system_tokens: DEFAULT_MAX_SYSTEM_TOKENS,
            system_speaking: false,
        }
    }

    pub fn speaking(mut self, speaking: bool) -> Self {
        self.system_speaking = speaking;
        self
    }

    pub fn latest_user(&self) -> Result<&'a MicroTurn, PolicyError> {
        match self.history.last() {
            Some(t) if t.role == Role::User => Ok(t),
            _ => Err(PolicyError::BadRequest("history must end with a user micro-turn".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyResponse {
    pub micro_turn: MicroTurn,
}

impl PolicyResponse {
    pub fn new(micro_turn: MicroTurn) -> Self {
        Self { micro_turn }
    }

    /// Role and per-turn invariants; the engine rejects anything else.
    pub fn check(&self) -> Result<(), PolicyError> {
        if self.micro_turn.role != Role::System {
            return Err(PolicyError::Protocol(ProtocolError::IllegalControl {
                token: self.micro_turn.control.unwrap_or(crate::ControlToken::Eos),
                role: self.micro_turn.role,
            }));
        }
        match self.micro_turn.check().into_iter().next() {
            Some(rule) => Err(PolicyError::Protocol(ProtocolError::InvariantViolation(rule))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy returned an illegal micro-turn: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("malformed policy response: {0}")]
    MalformedResponse(String),
    #[error("no ground-truth label for the interval ending at {t_ms} ms")]
    MissingAnnotation { t_ms: u64 },
    #[error("bad policy request: {0}")]
    BadRequest(String),
    #[error("policy transport failed: {0}")]
    Transport(String),
    #[error("oracle policy needs a scenario script")]
    OracleWithoutScript,
}

pub trait Policy: Send {
    fn decide(&mut self, req: &PolicyRequest<'_>) -> Result<PolicyResponse, PolicyError>;

    fn name(&self) -> &'static str;
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn decide(&mut self, req: &PolicyRequest<'_>) -> Result<PolicyResponse, PolicyError> {
        (**self).decide(req)
    }

    fn name(&self) -> &'static str {
        (**self).name()
    }
}

/// `oracle`, `heuristic`, or `remote:URL`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PolicySpec {
    Oracle,
    Heuristic,
    Remote(String),
}

/// Knobs shared by [`PolicySpec::build`] callers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyOptions {
    /// Oracle only.
    pub system_backchannel: bool,
    pub heuristic: HeuristicConfig,
    /// Remote only; `None` means twice the flush period.
    pub timeout_ms: Option<u64>,
}

impl Default for PolicyOptions {
    fn default() -> Self {
        Self { system_backchannel: true, heuristic: HeuristicConfig::default(), timeout_ms: None }
    }
}

impl PolicySpec {
    /// The oracle needs the ground truth of the script it is replaying.
    pub fn build(&self, truth: Option<&Truth>, opts: &PolicyOptions) -> Result<Box<dyn Policy>, PolicyError> {
        Ok(match self {
            PolicySpec::Oracle => Box::new(
                OraclePolicy::new(truth.ok_or(PolicyError::OracleWithoutScript)?.clone())
                    .with_system_backchannel(opts.system_backchannel),
            ),
            PolicySpec::Heuristic => Box::new(HeuristicPolicy::new(opts.heuristic.clone())),
            PolicySpec::Remote(url) => {
                let p = RemotePolicy::new(url.clone());
                match opts.timeout_ms {
                    Some(ms) => Box::new(p.with_timeout(std::time::Duration::from_millis(ms))),
                    None => Box::new(p),
                }
            }
        })
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Oracle => f.write_str("oracle"),
            PolicySpec::Heuristic => f.write_str("heuristic"),
            PolicySpec::Remote(url) => write!(f, "remote:{url}"),
        }
    }
}

impl FromStr for PolicySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(PolicySpec::Oracle),
            "heuristic" => Ok(PolicySpec::Heuristic),
            _ => match s.strip_prefix("remote:") {
                Some(url) if !url.is_empty() => Ok(PolicySpec::Remote(url.to_string())),
                _ => Err(format!("unknown policy {s:?}; expected oracle, heuristic or remote:URL")),
            },
        }
    }
}

impl TryFrom<String> for PolicySpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<PolicySpec> for String {
    fn from(p: PolicySpec) -> String {
        p.to_string()
    }
}

pub(crate) fn chunk(tokens: &[String], size: usize) -> Vec<Vec<String>> {
    tokens.chunks(size.max(1)).map(<[String]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_parsing() {
        assert_eq!("oracle".parse::<PolicySpec>().unwrap(), PolicySpec::Oracle);
        assert_eq!("heuristic".parse::<PolicySpec>().unwrap(), PolicySpec::Heuristic);
        assert_eq!(
            "remote:http://127.0.0.1:9/decide".parse::<PolicySpec>().unwrap(),
            PolicySpec::Remote("http://127.0.0.1:9/decide".into())
        );
        assert!("remote:".parse::<PolicySpec>().is_err());
        assert!("llm".parse::<PolicySpec>().is_err());
        assert!(matches!(PolicySpec::Oracle.build(None, &PolicyOptions::default()), Err(PolicyError::OracleWithoutScript)));
    }
}
