//! Micro-turn data model, conversational control tokens, and the canonical
//! token-stream serialization shared by the engine, the data constructor and
//! the wire protocol.
//!
//! A micro-turn renders as `[control?] content... <EOS>`. A dialogue history is
//! the concatenation of rendered micro-turns joined by single spaces, starting
//! with a user micro-turn and strictly alternating roles.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Conversational special tokens plus the end-of-micro-turn marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlToken {
    /// User silence for one flush interval.
    NoVoice,
    /// User still holds the floor; stay silent.
    UserIsSpeaking,
    /// User yielded the floor; the response content follows this token.
    UserFinishSpeaking,
    /// User barged in; stop the current utterance.
    UserIsInterrupting,
    /// User acknowledged without taking the floor; keep speaking.
    UserBackchannel,
    /// User is silent after a completed response; take no action.
    UserIsThinking,
    /// Play a short pre-synthesised acknowledgment clip.
    SystemBackchannel,
    /// Terminates every micro-turn.
    Eos,
}

impl ControlToken {
    pub const ALL: [ControlToken; 8] = [
        ControlToken::NoVoice,
        ControlToken::UserIsSpeaking,
        ControlToken::UserFinishSpeaking,
        ControlToken::UserIsInterrupting,
        ControlToken::UserBackchannel,
        ControlToken::UserIsThinking,
        ControlToken::SystemBackchannel,
        ControlToken::Eos,
    ];

    /// The six tokens a system micro-turn may open with.
    pub const SYSTEM: [ControlToken; 6] = [
        ControlToken::UserIsSpeaking,
        ControlToken::UserFinishSpeaking,
        ControlToken::UserIsInterrupting,
        ControlToken::UserBackchannel,
        ControlToken::UserIsThinking,
        ControlToken::SystemBackchannel,
    ];

    pub const fn surface(self) -> &'static str {
        match self {
            ControlToken::NoVoice => "<no voice>",
            ControlToken::UserIsSpeaking => "<user is speaking>",
            ControlToken::UserFinishSpeaking => "<user finish speaking>",
            ControlToken::UserIsInterrupting => "<user is interrupting>",
            ControlToken::UserBackchannel => "<user backchannel>",
            ControlToken::UserIsThinking => "<user is thinking>",
            ControlToken::SystemBackchannel => "<system backchannel>",
            ControlToken::Eos => "<EOS>",
        }
    }

    pub fn from_surface(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.surface() == s)
    }

    /// Whether a micro-turn of `role` may open with this token.
    pub fn legal_for(self, role: Role) -> bool {
        match self {
            ControlToken::Eos => false,
            ControlToken::NoVoice => role == Role::User,
            _ => role == Role::System,
        }
    }

    /// Tokens after which the micro-turn ends immediately.
    pub fn forbids_content(self) -> bool {
        matches!(
            self,
            ControlToken::NoVoice
                | ControlToken::UserIsSpeaking
                | ControlToken::UserIsInterrupting
                | ControlToken::UserIsThinking
                | ControlToken::SystemBackchannel
        )
    }
}

impl fmt::Display for ControlToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.surface())
    }
}

impl FromStr for ControlToken {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_surface(s).ok_or_else(|| ProtocolError::UnknownControl(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    System,
}

impl Role {
    pub fn other(self) -> Role {
        match self {
            Role::User => Role::System,
            Role::System => Role::User,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::User => "user",
            Role::System => "system",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("micro-turn invariant violated: {0}")]
    InvariantViolation(TurnRule),
    #[error("token stream has no <EOS>")]
    MissingEos,
    #[error("tokens follow <EOS>: {0:?}")]
    TrailingTokens(Vec<String>),
    #[error("control token {token} is not legal for a {role} micro-turn")]
    IllegalControl { token: ControlToken, role: Role },
    #[error("control token {0} appears after content")]
    MisplacedControl(ControlToken),
    #[error("empty token stream")]
    EmptyStream,
    #[error("unknown control token {0:?}")]
    UnknownControl(String),
}

/// Per-turn rules checked by [`MicroTurn::check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnRule {
    /// `<EOS>` used as a micro-turn's control token.
    EosAsControl,
    /// Control token not legal for the micro-turn's role.
    RoleLegality,
    /// Control token that ends the micro-turn immediately, followed by content.
    ContentAfterTerminalControl,
    /// `<user finish speaking>` with no response content.
    MissingResponseContent,
    /// Micro-turn with neither control token nor content.
    EmptyTurn,
    /// Content token that is empty, contains whitespace, or spells a control token.
    MalformedToken,
}

impl fmt::Display for TurnRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TurnRule::EosAsControl => "eos_as_control",
            TurnRule::RoleLegality => "role_legality",
            TurnRule::ContentAfterTerminalControl => "content_after_terminal_control",
            TurnRule::MissingResponseContent => "missing_response_content",
            TurnRule::EmptyTurn => "empty_turn",
            TurnRule::MalformedToken => "malformed_token",
        };
        f.write_str(s)
    }
}

/// One flush interval of dialogue from one side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroTurn {
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlToken>,
    #[serde(default)]
    pub tokens: Vec<String>,
    /// Milliseconds since session start.
    #[serde(default)]
    pub t_start: u64,
}

impl MicroTurn {
    pub fn new(role: Role, control: Option<ControlToken>, tokens: Vec<String>) -> Self {
        Self { role, control, tokens, t_start: 0 }
    }

    pub fn user(tokens: Vec<String>) -> Self {
        Self::new(Role::User, None, tokens)
    }

    pub fn no_voice() -> Self {
        Self::new(Role::User, Some(ControlToken::NoVoice), Vec::new())
    }

    pub fn system(control: ControlToken) -> Self {
        Self::new(Role::System, Some(control), Vec::new())
    }

    pub fn system_with(control: Option<ControlToken>, tokens: Vec<String>) -> Self {
        Self::new(Role::System, control, tokens)
    }

    pub fn at(mut self, t_start: u64) -> Self {
        self.t_start = t_start;
        self
    }

    pub fn is_silent(&self) -> bool {
        self.control == Some(ControlToken::NoVoice)
    }

    pub fn has_content(&self) -> bool {
        !self.tokens.is_empty()
    }

    /// Every rule this micro-turn breaks, in a fixed order.
    pub fn check(&self) -> Vec<TurnRule> {
        let mut broken = Vec::new();
        match self.control {
            Some(ControlToken::Eos) => broken.push(TurnRule::EosAsControl),
            Some(c) => {
                if !c.legal_for(self.role) {
                    broken.push(TurnRule::RoleLegality);
                }
                if c.forbids_content() && self.has_content() {
                    broken.push(TurnRule::ContentAfterTerminalControl);
                }
                if c == ControlToken::UserFinishSpeaking && !self.has_content() {
                    broken.push(TurnRule::MissingResponseContent);
                }
            }
            None => {
                if !self.has_content() {
                    broken.push(TurnRule::EmptyTurn);
                }
            }
        }
        if self.tokens.iter().any(|t| !is_content_token(t)) {
            broken.push(TurnRule::MalformedToken);
        }
        broken
    }

    pub fn is_valid(&self) -> bool {
        self.check().is_empty()
    }
}

fn is_content_token(t: &str) -> bool {
    !t.is_empty() && !t.chars().any(char::is_whitespace) && ControlToken::from_surface(t).is_none()
}

/// `[control?] + tokens + ["<EOS>"]`.
pub fn render_micro_turn(turn: &MicroTurn) -> Result<Vec<String>, ProtocolError> {
    if let Some(rule) = turn.check().into_iter().next() {
        return Err(ProtocolError::InvariantViolation(rule));
    }
    let mut out = Vec::with_capacity(turn.tokens.len() + 2);
    if let Some(c) = turn.control {
        out.push(c.surface().to_string());
    }
    out.extend(turn.tokens.iter().cloned());
    out.push(ControlToken::Eos.surface().to_string());
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// The stream must end with its only `<EOS>`.
    #[default]
    Strict,
    /// Truncate at the first `<EOS>` and ignore whatever follows.
    Tolerant,
}

/// Inverse of [`render_micro_turn`]. The returned turn has `t_start = 0`.
pub fn parse_micro_turn<S: AsRef<str>>(
    stream: &[S],
    role: Role,
    mode: ParseMode,
) -> Result<MicroTurn, ProtocolError> {
    if stream.is_empty() {
        return Err(ProtocolError::EmptyStream);
    }
    let eos = stream
        .iter()
        .position(|t| t.as_ref() == ControlToken::Eos.surface())
        .ok_or(ProtocolError::MissingEos)?;
    if mode == ParseMode::Strict && eos + 1 != stream.len() {
        return Err(ProtocolError::TrailingTokens(
            stream[eos + 1..].iter().map(|t| t.as_ref().to_string()).collect(),
        ));
    }
    let body = &stream[..eos];
    let mut control = None;
    let mut tokens = Vec::with_capacity(body.len());
    for (i, tok) in body.iter().enumerate() {
        let tok = tok.as_ref();
        match ControlToken::from_surface(tok) {
            Some(c) if i == 0 => {
                if !c.legal_for(role) {
                    return Err(ProtocolError::IllegalControl { token: c, role });
                }
                control = Some(c);
            }
            Some(c) => return Err(ProtocolError::MisplacedControl(c)),
            None => tokens.push(tok.to_string()),
        }
    }
    let turn = MicroTurn::new(role, control, tokens);
    if let Some(rule) = turn.check().into_iter().next() {
        return Err(ProtocolError::InvariantViolation(rule));
    }
    Ok(turn)
}

/// Desk-scale tokenizer. Control tokens are atomic wherever they appear;
/// other text splits on whitespace. `Custom` further splits each word by
/// greedy longest match against a vocabulary, falling back to single chars.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenModel {
    #[default]
    Whitespace,
    Custom(Vec<String>),
}

impl TokenModel {
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in split_controls(text) {
            match (self, word) {
                (_, Piece::Control(c)) => out.push(c.surface().to_string()),
                (TokenModel::Whitespace, Piece::Text(w)) => out.push(w.to_string()),
                (TokenModel::Custom(vocab), Piece::Text(w)) => split_by_vocab(w, vocab, &mut out),
            }
        }
        out
    }

    pub fn detokenize<S: AsRef<str>>(&self, tokens: &[S]) -> String {
        tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
    }
}

enum Piece<'a> {
    Control(ControlToken),
    Text(&'a str),
}

fn split_controls(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let hit = ControlToken::ALL
            .iter()
            .filter_map(|c| rest.find(c.surface()).map(|p| (p, *c)))
            .min_by_key(|(p, _)| *p);
        let (plain, next) = match hit {
            Some((p, c)) => (&rest[..p], Some((p, c))),
            None => (rest, None),
        };
        out.extend(plain.split_whitespace().map(Piece::Text));
        match next {
            Some((p, c)) => {
                out.push(Piece::Control(c));
                rest = &rest[p + c.surface().len()..];
            }
            None => break,
        }
    }
    out
}

fn split_by_vocab(word: &str, vocab: &[String], out: &mut Vec<String>) {
    let mut rest = word;
    while !rest.is_empty() {
        let best = vocab
            .iter()
            .filter(|v| !v.is_empty() && rest.starts_with(v.as_str()))
            .map(String::len)
            .max()
            .unwrap_or_else(|| rest.chars().next().map_or(1, char::len_utf8));
        out.push(rest[..best].to_string());
        rest = &rest[best..];
    }
}

/// Micro-turns in order plus the flush period that produced them.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DialogueHistory {
    pub turns: Vec<MicroTurn>,
    pub delta_t_ms: u64,
}

impl DialogueHistory {
    pub fn new(delta_t_ms: u64) -> Self {
        Self { turns: Vec::new(), delta_t_ms }
    }

    pub fn push(&mut self, turn: MicroTurn) {
        self.turns.push(turn);
    }

    pub fn last(&self) -> Option<&MicroTurn> {
        self.turns.last()
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Canonical textual form: rendered micro-turns joined by single spaces.
    pub fn canonical(&self) -> Result<String, ProtocolError> {
        serialize_turns(&self.turns)
    }
}

pub fn serialize_turns(turns: &[MicroTurn]) -> Result<String, ProtocolError> {
    let mut parts = Vec::new();
    for t in turns {
        parts.extend(render_micro_turn(t)?);
    }
    Ok(parts.join(" "))
}

/// Split a flat token stream at every `<EOS>` into micro-turns with roles
/// alternating from `first`. A tail without `<EOS>` is an error.
pub fn split_turns<S: AsRef<str>>(
    tokens: &[S],
    first: Role,
) -> Result<Vec<MicroTurn>, (usize, ProtocolError)> {
    let mut turns = Vec::new();
    let mut role = first;
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if t.as_ref() == ControlToken::Eos.surface() {
            let turn = parse_micro_turn(&tokens[start..=i], role, ParseMode::Strict)
                .map_err(|e| (turns.len(), e))?;
            turns.push(turn);
            role = role.other();
            start = i + 1;
        }
    }
    if start != tokens.len() {
        return Err((turns.len(), ProtocolError::MissingEos));
    }
    Ok(turns)
}

/// Parse the canonical textual form back into micro-turns (user first).
pub fn parse_canonical(text: &str) -> Result<Vec<MicroTurn>, (usize, ProtocolError)> {
    let tokens = TokenModel::Whitespace.tokenize(text);
    split_turns(&tokens, Role::User)
}

/// History-level rules reported by [`validate_history`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "detail")]
pub enum HistoryRule {
    FirstTurnNotUser,
    Alternation,
    TimeRegression,
    NonPositiveDeltaT,
    Turn(TurnRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Offending micro-turn; `None` for history-wide rules.
    pub turn: Option<usize>,
    #[serde(flatten)]
    pub rule: HistoryRule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rule = match self.rule {
            HistoryRule::FirstTurnNotUser => "first_turn_not_user".to_string(),
            HistoryRule::Alternation => "alternation".to_string(),
            HistoryRule::TimeRegression => "time_regression".to_string(),
            HistoryRule::NonPositiveDeltaT => "non_positive_delta_t".to_string(),
            HistoryRule::Turn(r) => r.to_string(),
        };
        match self.turn {
            Some(i) => write!(f, "{rule}@{i}"),
            None => f.write_str(&rule),
        }
    }
}

/// Empty iff every history and per-turn invariant holds.
pub fn validate_history(h: &DialogueHistory) -> Vec<Violation> {
    let mut out = Vec::new();
    if h.delta_t_ms == 0 {
        out.push(Violation { turn: None, rule: HistoryRule::NonPositiveDeltaT });
    }
    out.extend(validate_turns(&h.turns));
    out
}

pub fn validate_turns(turns: &[MicroTurn]) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, turn) in turns.iter().enumerate() {
        if i == 0 && turn.role != Role::User {
            out.push(Violation { turn: Some(0), rule: HistoryRule::FirstTurnNotUser });
        }
        if i > 0 {
            let prev = &turns[i - 1];
            if prev.role == turn.role {
                out.push(Violation { turn: Some(i), rule: HistoryRule::Alternation });
            }
            if turn.t_start < prev.t_start {
                out.push(Violation { turn: Some(i), rule: HistoryRule::TimeRegression });
            }
        }
        for rule in turn.check() {
            out.push(Violation { turn: Some(i), rule: HistoryRule::Turn(rule) });
        }
    }
    out
}

#[cfg(test)]
pub(crate) fn toks(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}
