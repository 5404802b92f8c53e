use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::protocol::{parse_micro_turn, ControlToken, MicroTurn, ParseMode, Role, TokenModel};

use super::{Policy, PolicyError, PolicyRequest, PolicyResponse};

/// Body POSTed to the policy server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRequest {
    /// Canonical token stream of the history, ending with the latest user micro-turn.
    pub history: String,
    pub delta_t_ms: u64,
    pub max_system_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireResponse {
    /// Canonical token stream of one system micro-turn.
    pub micro_turn: String,
}

impl WireRequest {
    pub fn from_request(req: &PolicyRequest<'_>) -> Result<Self, PolicyError> {
        Ok(Self {
            history: req.history.canonical()?,
            delta_t_ms: req.delta_t_ms,
            max_system_tokens: req.max_system_tokens,
        })
    }
}

/// Parse a server reply leniently: cut at the first `<EOS>` and cap the
/// content at `max_tokens`.
pub fn parse_reply(reply: &str, max_tokens: usize) -> Result<MicroTurn, PolicyError> {
    let mut stream = TokenModel::Whitespace.tokenize(reply);
    let eos = ControlToken::Eos.surface();
    let end = stream.iter().position(|t| t == eos).ok_or_else(|| {
        PolicyError::MalformedResponse(format!("no <EOS> in {reply:?}"))
    })?;
    stream.truncate(end);
    let lead = usize::from(stream.first().is_some_and(|t| ControlToken::from_surface(t).is_some()));
    stream.truncate(lead + max_tokens.max(1));
    stream.push(eos.to_string());
    Ok(parse_micro_turn(&stream, Role::System, ParseMode::Tolerant)?)
}

/// Client for an external LLM policy server speaking the JSON schema above
/// over HTTP POST.
pub struct RemotePolicy {
    url: String,
    timeout: Option<Duration>,
    agent: ureq::Agent,
}

impl RemotePolicy {
    pub fn new(url: impl Into<String>) -> Self {
        let config = ureq::Agent::config_builder().http_status_as_error(true).build();
        Self { url: url.into(), timeout: None, agent: ureq::Agent::new_with_config(config) }
    }

    /// Fixed timeout; the default is twice the flush period.
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = Some(timeout);
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl Policy for RemotePolicy {
    fn decide(&mut self, req: &PolicyRequest<'_>) -> Result<PolicyResponse, PolicyError> {
        let t = req.latest_user()?.t_start;
        let body = WireRequest::from_request(req)?;
        let timeout = self.timeout.unwrap_or(Duration::from_millis(2 * req.delta_t_ms));
        let result = self
            .agent
            .post(&self.url)
            .config()
            .timeout_global(Some(timeout))
            .build()
            .send_json(&body);
        let mut response = match result {
            Ok(r) => r,
            Err(ureq::Error::Timeout(kind)) => {
                log::warn!("policy server {} timed out ({kind}); staying silent", self.url);
                return Ok(PolicyResponse::new(MicroTurn::system(ControlToken::UserIsSpeaking).at(t)));
            }
            Err(e) => return Err(PolicyError::Transport(e.to_string())),
        };
        let reply: WireResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| PolicyError::MalformedResponse(e.to_string()))?;
        let turn = parse_reply(&reply.micro_turn, req.max_system_tokens)?;
        let out = PolicyResponse::new(turn.at(t));
        out.check()?;
        Ok(out)
    }

    fn name(&self) -> &'static str {
        "remote"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::toks;

    #[test]
    fn reply_parsing() {
        let t = parse_reply("<user finish speaking> Hello ! <EOS>", 10).unwrap();
        assert_eq!(t, MicroTurn::system_with(Some(ControlToken::UserFinishSpeaking), toks(&["Hello", "!"])));

        let long = (0..14).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let t = parse_reply(&format!("<user finish speaking> {long} <EOS> junk"), 10).unwrap();
        assert_eq!(t.tokens.len(), 10);
        assert_eq!(t.tokens[9], "w9");

        assert!(matches!(parse_reply("hello", 10), Err(PolicyError::MalformedResponse(_))));
        assert!(matches!(parse_reply("<no voice> <EOS>", 10), Err(PolicyError::Protocol(_))));
        assert!(matches!(parse_reply("<user is speaking> oops <EOS>", 10), Err(PolicyError::Protocol(_))));
    }
}
