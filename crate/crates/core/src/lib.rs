//! Full-duplex dialogue engine built on clocked micro-turns.
//!
//! User speech arrives as streaming-ASR text, is flushed into fixed-period
//! micro-turns, and a policy answers every user micro-turn with a system
//! micro-turn that opens with a conversational control token (stay silent,
//! respond, stop, ignore a backchannel, wait, or backchannel). The crate also
//! builds duplex training sequences from text dialogues and runs a seeded
//! turn-taking benchmark over simulated scenarios.

pub mod constructor;
pub mod ingest;
pub mod metrics;
pub mod orchestrator;
pub mod policy;
pub mod protocol;
pub mod rng;
pub mod scenarios;
pub mod service;
pub mod sweep;

pub use ingest::{AsrPartialEvent, FlushClock, IngestBuffer, IngestError, MicroTurnAggregator};
pub use orchestrator::{
    run_session, Action, Engine, EngineConfig, OrchestratorState, Phase, PlaybackModel,
    SessionError, TranscriptRecord,
};
pub use policy::{Policy, PolicyError, PolicyOptions, PolicyRequest, PolicyResponse, PolicySpec};
pub use protocol::{
    parse_micro_turn, render_micro_turn, validate_history, ControlToken, DialogueHistory,
    MicroTurn, ParseMode, ProtocolError, Role, TokenModel, Violation,
};
