//! Streaming-ASR partials to user micro-turns on a fixed flush clock.
//!
//! Text arrives as stabilized deltas. Every `delta_t_ms` the pending buffer is
//! flushed into one user micro-turn; an empty buffer becomes `<no voice>`.
//! A partial stamped exactly on a flush instant belongs to the next interval.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{MicroTurn, TokenModel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsrPartialEvent {
    pub t_ms: u64,
    #[serde(rename = "text")]
    pub text_delta: String,
}

impl AsrPartialEvent {
    pub fn new(t_ms: u64, text: impl Into<String>) -> Self {
        Self { t_ms, text_delta: text.into() }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("event at {t_ms} ms precedes previous event at {last_ms} ms")]
    OutOfOrderEvent { t_ms: u64, last_ms: u64 },
    #[error("flush period must be positive")]
    ZeroDeltaT,
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Flush instants at `k * delta_t_ms`, `k >= 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlushClock {
    delta_t_ms: u64,
    next_flush_ms: u64,
}

impl FlushClock {
    pub fn new(delta_t_ms: u64) -> Result<Self, IngestError> {
        if delta_t_ms == 0 {
            return Err(IngestError::ZeroDeltaT);
        }
        Ok(Self { delta_t_ms, next_flush_ms: delta_t_ms })
    }

    pub fn delta_t_ms(&self) -> u64 {
        self.delta_t_ms
    }

    pub fn next_flush_ms(&self) -> u64 {
        self.next_flush_ms
    }

    /// Returns the current flush instant and moves to the next one.
    pub fn tick(&mut self) -> u64 {
        let t = self.next_flush_ms;
        self.next_flush_ms += self.delta_t_ms;
        t
    }

    /// First flush instant strictly after `t_ms`.
    pub fn flush_after(delta_t_ms: u64, t_ms: u64) -> u64 {
        (t_ms / delta_t_ms + 1) * delta_t_ms
    }
}

impl Iterator for FlushClock {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        Some(self.tick())
    }
}

/// Pending user tokens between two flushes.
#[derive(Debug, Clone, Default)]
pub struct IngestBuffer {
    tokens: Vec<String>,
    last_t_ms: Option<u64>,
    model: TokenModel,
}

impl IngestBuffer {
    pub fn new(model: TokenModel) -> Self {
        Self { tokens: Vec::new(), last_t_ms: None, model }
    }

    pub fn pending(&self) -> &[String] {
        &self.tokens
    }

    pub fn last_event_ms(&self) -> Option<u64> {
        self.last_t_ms
    }

    pub fn ingest_partial(&mut self, ev: &AsrPartialEvent) -> Result<(), IngestError> {
        if let Some(last) = self.last_t_ms {
            if ev.t_ms < last {
                return Err(IngestError::OutOfOrderEvent { t_ms: ev.t_ms, last_ms: last });
            }
        }
        self.last_t_ms = Some(ev.t_ms);
        self.tokens.extend(self.model.tokenize(&ev.text_delta));
        Ok(())
    }

    pub fn flush(&mut self, t_flush_ms: u64) -> MicroTurn {
        if self.tokens.is_empty() {
            MicroTurn::no_voice().at(t_flush_ms)
        } else {
            MicroTurn::user(std::mem::take(&mut self.tokens)).at(t_flush_ms)
        }
    }
}

/// Buffer plus clock: feed events in time order, collect one micro-turn per
/// elapsed flush instant.
#[derive(Debug, Clone)]
pub struct MicroTurnAggregator {
    buffer: IngestBuffer,
    clock: FlushClock,
}

impl MicroTurnAggregator {
    pub fn new(delta_t_ms: u64, model: TokenModel) -> Result<Self, IngestError> {
        Ok(Self { buffer: IngestBuffer::new(model), clock: FlushClock::new(delta_t_ms)? })
    }

    pub fn next_flush_ms(&self) -> u64 {
        self.clock.next_flush_ms()
    }

    pub fn delta_t_ms(&self) -> u64 {
        self.clock.delta_t_ms()
    }

    /// Flush every instant `<= t_ms`, then ingest the event.
    pub fn push(&mut self, ev: &AsrPartialEvent) -> Result<Vec<MicroTurn>, IngestError> {
        if let Some(last) = self.buffer.last_event_ms() {
            if ev.t_ms < last {
                return Err(IngestError::OutOfOrderEvent { t_ms: ev.t_ms, last_ms: last });
            }
        }
        let out = self.advance_to(ev.t_ms);
        self.buffer.ingest_partial(ev)?;
        Ok(out)
    }

    pub fn advance_to(&mut self, t_ms: u64) -> Vec<MicroTurn> {
        let mut out = Vec::new();
        while self.clock.next_flush_ms() <= t_ms {
            out.push(self.flush_next());
        }
        out
    }

    /// Flush at the next clock instant regardless of the current time.
    pub fn flush_next(&mut self) -> MicroTurn {
        let t = self.clock.tick();
        self.buffer.flush(t)
    }

    pub fn ingest(&mut self, ev: &AsrPartialEvent) -> Result<(), IngestError> {
        self.buffer.ingest_partial(ev)
    }
}

/// Replay an event stream through the flush clock up to `horizon_ms`.
pub fn aggregate(
    events: &[AsrPartialEvent],
    delta_t_ms: u64,
    horizon_ms: u64,
) -> Result<Vec<MicroTurn>, IngestError> {
    let mut agg = MicroTurnAggregator::new(delta_t_ms, TokenModel::Whitespace)?;
    let mut out = Vec::new();
    for ev in events {
        out.extend(agg.push(ev)?);
    }
    out.extend(agg.advance_to(horizon_ms));
    Ok(out)
}

pub fn read_events(reader: impl BufRead) -> Result<Vec<AsrPartialEvent>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = serde_json::from_str(&line).map_err(|source| IngestError::Parse { line: i + 1, source })?;
        out.push(ev);
    }
    Ok(out)
}

pub fn write_events(mut w: impl Write, events: &[AsrPartialEvent]) -> Result<(), IngestError> {
    for ev in events {
        serde_json::to_writer(&mut w, ev).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
