//! Duplex session server. Each connection gets its own engine clocked by the
//! server; frames are one JSON object each, either newline-delimited over a
//! raw stream or as WebSocket text messages (detected from the first bytes).
//!
//! Time comes from `tokio::time`, so a runtime with paused time drives
//! sessions deterministically.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncRead, AsyncWrite, AsyncWriteExt, BufReader, Lines, ReadHalf, WriteHalf};
use tokio::net::{TcpListener, TcpStream};
use tokio::time::Instant;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::WebSocketStream;

use crate::ingest::AsrPartialEvent;
use crate::orchestrator::{Engine, EngineConfig, PlaybackModel, RecordKind, SessionError, SessionTranscript, TranscriptRecord};
use crate::policy::{Policy, PolicyOptions, PolicySpec};
use crate::protocol::ControlToken;
use crate::scenarios::Truth;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid session config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub delta_t_ms: u64,
    pub policy: PolicySpec,
    pub tokens_per_second: f64,
    pub seed: u64,
    pub takeover_window_ms: u64,
    pub policy_options: PolicyOptions,
    /// Ground truth for the oracle policy.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<Truth>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            delta_t_ms: 600,
            policy: PolicySpec::Heuristic,
            tokens_per_second: PlaybackModel::default().tokens_per_second,
            seed: 0,
            takeover_window_ms: crate::metrics::DEFAULT_TAKEOVER_WINDOW_MS,
            policy_options: PolicyOptions::default(),
            truth: None,
        }
    }
}

impl SessionConfig {
    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            delta_t_ms: self.delta_t_ms,
            playback: PlaybackModel { tokens_per_second: self.tokens_per_second, policy_latency_ms: 0 },
            seed: self.seed,
            ..EngineConfig::default()
        }
    }

    fn build(&self) -> Result<Engine<Box<dyn Policy>>, ServiceError> {
        if self.delta_t_ms == 0 {
            return Err(ServiceError::Config("delta_t_ms must be positive".into()));
        }
        let policy = self
            .policy
            .build(self.truth.as_ref(), &self.policy_options)
            .map_err(|e| ServiceError::Config(e.to_string()))?;
        Engine::new(policy, self.engine_config()).map_err(|e| ServiceError::Config(e.to_string()))
    }

    /// Blocking policies run off the async worker.
    fn blocking_policy(&self) -> bool {
        matches!(self.policy, PolicySpec::Remote(_))
    }
}

/// Partial update; absent fields keep their value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigPatch {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_t_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicySpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens_per_second: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub takeover_window_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<Truth>,
}

impl ConfigPatch {
    pub fn apply(self, cfg: &mut SessionConfig) {
        if let Some(v) = self.delta_t_ms {
            cfg.delta_t_ms = v;
        }
        if let Some(v) = self.policy {
            cfg.policy = v;
        }
        if let Some(v) = self.tokens_per_second {
            cfg.tokens_per_second = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.takeover_window_ms {
            cfg.takeover_window_ms = v;
        }
        if let Some(v) = self.truth {
            cfg.truth = Some(v);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    /// `t_ms` is informational; the server stamps arrival time.
    UserText {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        t_ms: Option<u64>,
        text: String,
    },
    /// Only before the first `user_text`.
    SetConfig(ConfigPatch),
    EndSession,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    SystemMicroTurn { t_ms: u64, control: Option<ControlToken>, tokens: Vec<String> },
    Speech { t_ms: u64, token: String },
    Abort { t_ms: u64 },
    BackchannelClip { t_ms: u64, clip_id: String },
    Error { code: String, detail: String },
}

impl ServerMessage {
    fn error(code: &str, detail: impl Into<String>) -> Self {
        ServerMessage::Error { code: code.into(), detail: detail.into() }
    }

    /// Client-visible form of a transcript record, if it has one.
    pub fn from_record(r: &TranscriptRecord) -> Option<Self> {
        Some(match r.kind {
            RecordKind::Policy => ServerMessage::SystemMicroTurn {
                t_ms: r.t_ms,
                control: r.control,
                tokens: r.tokens.clone().unwrap_or_default(),
            },
            RecordKind::Speech => ServerMessage::Speech {
                t_ms: r.t_ms,
                token: r.tokens.as_ref().and_then(|t| t.first()).cloned().unwrap_or_default(),
            },
            RecordKind::Abort => ServerMessage::Abort { t_ms: r.t_ms },
            RecordKind::BackchannelClip => {
                ServerMessage::BackchannelClip { t_ms: r.t_ms, clip_id: r.clip_id.clone().unwrap_or_default() }
            }
            RecordKind::PolicyError => {
                ServerMessage::error("policy_error", r.detail.clone().unwrap_or_default())
            }
            RecordKind::UserText | RecordKind::Flush | RecordKind::EmitSpeech | RecordKind::NoOp => return None,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    pub session: SessionConfig,
    /// Directory receiving one NDJSON transcript per session.
    pub record_dir: Option<PathBuf>,
}

enum Frames<S> {
    Lines { reader: Lines<BufReader<ReadHalf<S>>>, writer: WriteHalf<S> },
    Ws(Box<WebSocketStream<S>>),
}

enum Incoming {
    Text(String),
    Invalid(String),
    Closed,
}

impl<S: AsyncRead + AsyncWrite + Unpin> Frames<S> {
    /// Cancel safe: both underlying reads are.
    async fn recv(&mut self) -> Incoming {
        match self {
            Frames::Lines { reader, .. } => match reader.next_line().await {
                Ok(Some(line)) => Incoming::Text(line),
                Ok(None) => Incoming::Closed,
                Err(e) => Incoming::Invalid(e.to_string()),
            },
            Frames::Ws(ws) => loop {
                match ws.next().await {
                    Some(Ok(Message::Text(t))) => return Incoming::Text(t.to_string()),
                    Some(Ok(Message::Binary(_))) => return Incoming::Invalid("binary frames are not supported".into()),
                    Some(Ok(Message::Close(_))) | None => return Incoming::Closed,
                    Some(Ok(_)) => continue,
                    Some(Err(_)) => return Incoming::Closed,
                }
            },
        }
    }

    async fn send(&mut self, msg: &ServerMessage) -> std::io::Result<()> {
        let json = serde_json::to_string(msg).map_err(std::io::Error::other)?;
        match self {
            Frames::Lines { writer, .. } => {
                writer.write_all(json.as_bytes()).await?;
                writer.write_all(b"\n").await?;
                writer.flush().await
            }
            Frames::Ws(ws) => ws.send(Message::text(json)).await.map_err(std::io::Error::other),
        }
    }
}

struct Session {
    cfg: SessionConfig,
    engine: Option<Engine<Box<dyn Policy>>>,
    start: Instant,
    started: bool,
    records: Vec<TranscriptRecord>,
}

impl Session {
    fn now_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    fn deadline(&self) -> Instant {
        let ms = self.engine.as_ref().map_or(u64::MAX / 4, |e| e.next_deadline());
        self.start + Duration::from_millis(ms)
    }

    async fn run(&mut self, job: impl FnOnce(&mut Engine<Box<dyn Policy>>) -> Result<Vec<TranscriptRecord>, SessionError> + Send + 'static) -> Result<Vec<TranscriptRecord>, SessionError> {
        let mut engine = self.engine.take().expect("engine present between steps");
        let out = if self.cfg.blocking_policy() {
            let (engine_back, out) = tokio::task::spawn_blocking(move || {
                let out = job(&mut engine);
                (engine, out)
            })
            .await
            .expect("engine task panicked");
            engine = engine_back;
            out
        } else {
            job(&mut engine)
        };
        self.engine = Some(engine);
        out
    }
}

/// Serve one session over an already accepted stream until the client ends it
/// or a session error occurs. Returns the session transcript.
pub async fn serve_connection<S>(stream: S, cfg: SessionConfig) -> Result<SessionTranscript, ServiceError>
where
    S: AsyncRead + AsyncWrite + Unpin + Send + 'static,
{
    let start = Instant::now();
    let mut head = [0u8; 4];
    let mut stream = tokio::io::BufReader::new(stream);
    // WebSocket clients speak first; a silent client gets NDJSON
    let peeked = match tokio::time::timeout(DETECT_GRACE, stream.fill_buf()).await {
        Ok(buf) => {
            let buf = buf?;
            let n = buf.len().min(4);
            head[..n].copy_from_slice(&buf[..n]);
            n
        }
        Err(_) => 0,
    };
    if peeked == 4 && &head == b"GET " {
        let ws = tokio_tungstenite::accept_async(stream).await.map_err(std::io::Error::other)?;
        session_loop(Frames::Ws(Box::new(ws)), cfg, start).await
    } else {
        let (r, w) = tokio::io::split(stream);
        session_loop(Frames::Lines { reader: BufReader::new(r).lines(), writer: w }, cfg, start).await
    }
}

async fn session_loop<S>(mut frames: Frames<S>, cfg: SessionConfig, start: Instant) -> Result<SessionTranscript, ServiceError>
where
    S: AsyncRead + AsyncWrite + Unpin,
{
    let mut s = Session { engine: None, start, started: false, records: Vec::new(), cfg };
    match s.cfg.build() {
        Ok(e) => s.engine = Some(e),
        Err(e) => {
            frames.send(&ServerMessage::error("session_error", e.to_string())).await?;
            return Ok(SessionTranscript::default());
        }
    }
    loop {
        let deadline = s.deadline();
        let (out, end) = tokio::select! {
            incoming = frames.recv() => match incoming {
                Incoming::Closed => break,
                Incoming::Invalid(detail) => {
                    frames.send(&ServerMessage::error("bad_message", detail)).await?;
                    continue;
                }
                Incoming::Text(line) if line.trim().is_empty() => continue,
                Incoming::Text(line) => match serde_json::from_str::<ClientMessage>(&line) {
                    Err(e) => {
                        frames.send(&ServerMessage::error("bad_message", e.to_string())).await?;
                        continue;
                    }
                    Ok(ClientMessage::EndSession) => {
                        let now = s.now_ms();
                        (s.run(move |e| e.advance_to(now)).await, true)
                    }
                    Ok(ClientMessage::SetConfig(patch)) => {
                        if s.started {
                            frames.send(&ServerMessage::error("config_locked", "set_config must precede user_text")).await?;
                            continue;
                        }
                        let mut next = s.cfg.clone();
                        patch.apply(&mut next);
                        match next.build() {
                            Ok(engine) => {
                                s.cfg = next;
                                s.engine = Some(engine);
                                s.start = Instant::now();
                            }
                            Err(e) => frames.send(&ServerMessage::error("bad_config", e.to_string())).await?,
                        }
                        continue;
                    }
                    Ok(ClientMessage::UserText { text, .. }) => {
                        s.started = true;
                        let ev = AsrPartialEvent::new(s.now_ms(), text);
                        (s.run(move |e| e.push_event(&ev)).await, false)
                    }
                },
            },
            _ = tokio::time::sleep_until(deadline) => {
                s.started = true;
                let now = s.now_ms();
                (s.run(move |e| e.advance_to(now)).await, false)
            }
        };
        match out {
            Ok(records) => {
                for r in &records {
                    if let Some(m) = ServerMessage::from_record(r) {
                        frames.send(&m).await?;
                    }
                }
                s.records.extend(records);
            }
            Err(e) => {
                frames.send(&ServerMessage::error("session_error", e.to_string())).await?;
                break;
            }
        }
        if end {
            break;
        }
    }
    Ok(SessionTranscript { records: s.records })
}

const DETECT_GRACE: Duration = Duration::from_millis(50);

pub struct Server {
    listener: TcpListener,
    cfg: Arc<ServerConfig>,
}

impl Server {
    pub async fn bind(addr: &str, cfg: ServerConfig) -> Result<Self, ServiceError> {
        let listener =
            TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind { addr: addr.to_string(), source })?;
        Ok(Self { listener, cfg: Arc::new(cfg) })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, ServiceError> {
        Ok(self.listener.local_addr()?)
    }

    /// Accept forever, one task per session.
    pub async fn run(self) -> Result<(), ServiceError> {
        let counter = AtomicU64::new(0);
        loop {
            let (stream, peer) = self.listener.accept().await?;
            let id = counter.fetch_add(1, Ordering::Relaxed);
            let cfg = self.cfg.clone();
            tokio::spawn(handle(stream, peer, id, cfg));
        }
    }
}

async fn handle(stream: TcpStream, peer: SocketAddr, id: u64, cfg: Arc<ServerConfig>) {
    let _ = stream.set_nodelay(true);
    log::info!("session {id} from {peer}");
    match serve_connection(stream, cfg.session.clone()).await {
        Ok(transcript) => {
            if let Some(dir) = &cfg.record_dir {
                let path = dir.join(format!("session-{id:06}.ndjson"));
                if let Err(e) = std::fs::write(&path, transcript.to_ndjson()) {
                    log::warn!("session {id}: cannot write {}: {e}", path.display());
                }
            }
            log::info!("session {id} closed");
        }
        Err(e) => log::warn!("session {id}: {e}"),
    }
}

/// Bind and serve until the task is dropped.
pub async fn serve(bind_addr: &str, cfg: ServerConfig) -> Result<(), ServiceError> {
    let server = Server::bind(bind_addr, cfg).await?;
    log::info!("listening on {}", server.local_addr()?);
    server.run().await
}
