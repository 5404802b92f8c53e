use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use microturn_core::orchestrator::{run_session, RecordKind, SessionTranscript};
use microturn_core::policy::PolicySpec;
use microturn_core::protocol::ControlToken;
use microturn_core::scenarios::{generate_scenarios, Dimension, ScenarioConfig};
use microturn_core::service::{
    serve_connection, ClientMessage, ConfigPatch, Server, ServerConfig, ServerMessage, SessionConfig,
};
use microturn_core::AsrPartialEvent;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpStream;
use tokio::task::JoinHandle;
use tokio::time::{sleep_until, Instant};
use tokio_tungstenite::tungstenite::Message;

fn line(m: &ClientMessage) -> String {
    format!("{}\n", serde_json::to_string(m).unwrap())
}

/// In-memory session: a writer for client lines, the collected server
/// messages, and the server's own transcript.
struct Harness {
    tx: tokio::io::WriteHalf<tokio::io::DuplexStream>,
    reader: JoinHandle<Vec<ServerMessage>>,
    server: JoinHandle<SessionTranscript>,
}

impl Harness {
    fn start(cfg: SessionConfig) -> Self {
        let (client, server_side) = tokio::io::duplex(1 << 20);
        let server = tokio::spawn(async move { serve_connection(server_side, cfg).await.unwrap() });
        let (rx, tx) = tokio::io::split(client);
        let reader = tokio::spawn(async move {
            let mut out = Vec::new();
            let mut lines = BufReader::new(rx).lines();
            while let Some(l) = lines.next_line().await.unwrap() {
                out.push(serde_json::from_str(&l).unwrap());
            }
            out
        });
        Self { tx, reader, server }
    }

    async fn send(&mut self, m: &ClientMessage) {
        self.tx.write_all(line(m).as_bytes()).await.unwrap();
    }

    async fn raw(&mut self, s: &str) {
        self.tx.write_all(s.as_bytes()).await.unwrap();
    }

    async fn finish(mut self) -> (Vec<ServerMessage>, SessionTranscript) {
        self.send(&ClientMessage::EndSession).await;
        let transcript = self.server.await.unwrap();
        drop(self.tx);
        (self.reader.await.unwrap(), transcript)
    }
}

fn micro_turns(msgs: &[ServerMessage]) -> Vec<(u64, Option<ControlToken>)> {
    msgs.iter()
        .filter_map(|m| match m {
            ServerMessage::SystemMicroTurn { t_ms, control, .. } => Some((*t_ms, *control)),
            _ => None,
        })
        .collect()
}

#[tokio::test(start_paused = true)]
async fn silence_is_flushed_by_the_server_clock() {
    let h = Harness::start(SessionConfig::default());
    let t0 = Instant::now();
    sleep_until(t0 + Duration::from_millis(3000)).await;
    let (msgs, _) = h.finish().await;
    let turns = micro_turns(&msgs);
    // flush instants k·Δt inside (0, 3000]
    let expected: Vec<u64> = (1..).map(|k| k * 600).take_while(|&t| t <= 3000).collect();
    assert!(turns.len() >= 4);
    assert_eq!(turns.iter().map(|t| t.0).collect::<Vec<_>>(), expected);
}

/// Drives a scripted interruption through the live server and checks it
/// against the replay of the same timed events.
#[tokio::test(start_paused = true)]
async fn interruption_aborts_before_more_speech_and_matches_replay() {
    let scfg = ScenarioConfig::default();
    let script = generate_scenarios(Dimension::UserInterruption, 1, 17, &scfg).remove(0);
    let cfg = SessionConfig { policy: PolicySpec::Oracle, seed: 9, ..SessionConfig::default() };
    let mut h = Harness::start(SessionConfig::default());
    h.send(&ClientMessage::SetConfig(ConfigPatch {
        policy: Some(PolicySpec::Oracle),
        seed: Some(9),
        truth: Some(script.truth.clone()),
        ..ConfigPatch::default()
    }))
    .await;
    tokio::task::yield_now().await;
    let t0 = Instant::now();
    for ev in &script.events {
        sleep_until(t0 + Duration::from_millis(ev.t_ms)).await;
        h.send(&ClientMessage::UserText { t_ms: Some(ev.t_ms), text: ev.text_delta.clone() }).await;
    }
    sleep_until(t0 + Duration::from_millis(script.horizon_ms)).await;
    let (msgs, live) = h.finish().await;

    assert!(!msgs.iter().any(|m| matches!(m, ServerMessage::Error { .. })), "{msgs:?}");
    let uii = msgs
        .iter()
        .position(|m| matches!(m, ServerMessage::SystemMicroTurn { control: Some(ControlToken::UserIsInterrupting), .. }))
        .expect("interruption detected");
    assert!(msgs[..uii].iter().any(|m| matches!(m, ServerMessage::Speech { .. })));
    assert!(matches!(msgs[uii + 1], ServerMessage::Abort { .. }));
    let next_answer = msgs[uii..]
        .iter()
        .position(|m| matches!(m, ServerMessage::SystemMicroTurn { control: Some(ControlToken::UserFinishSpeaking), .. }))
        .expect("second question answered")
        + uii;
    assert!(!msgs[uii..next_answer].iter().any(|m| matches!(m, ServerMessage::Speech { .. })));

    // the server stamped user text with its own clock; replaying those
    // stamps must reproduce the live transcript exactly
    let events: Vec<AsrPartialEvent> = live
        .of_kind(RecordKind::UserText)
        .map(|r| AsrPartialEvent::new(r.t_ms, r.tokens.clone().unwrap().join(" ")))
        .collect();
    assert_eq!(events.iter().map(|e| e.t_ms).collect::<Vec<_>>(), script.events.iter().map(|e| e.t_ms).collect::<Vec<_>>());
    let mut policy = cfg.policy.build(Some(&script.truth), &cfg.policy_options).unwrap();
    let replay = run_session(&events, script.horizon_ms, &mut *policy, &cfg.engine_config()).unwrap();
    assert_eq!(live, replay);
    let wire: Vec<ServerMessage> = replay.records.iter().filter_map(ServerMessage::from_record).collect();
    assert_eq!(msgs, wire);
}

#[tokio::test(start_paused = true)]
async fn malformed_messages_keep_the_session_open() {
    let mut h = Harness::start(SessionConfig::default());
    h.raw("{not json\n").await;
    h.raw("{\"type\":\"dance\"}\n").await;
    h.raw("\n").await;
    tokio::task::yield_now().await;
    let t0 = Instant::now();
    sleep_until(t0 + Duration::from_millis(700)).await;
    h.send(&ClientMessage::SetConfig(ConfigPatch { delta_t_ms: Some(100), ..ConfigPatch::default() })).await;
    h.send(&ClientMessage::UserText { t_ms: None, text: "hello there".into() }).await;
    sleep_until(t0 + Duration::from_millis(1500)).await;
    let (msgs, transcript) = h.finish().await;
    let codes: Vec<&str> = msgs
        .iter()
        .filter_map(|m| match m {
            ServerMessage::Error { code, .. } => Some(code.as_str()),
            _ => None,
        })
        .collect();
    assert_eq!(codes, vec!["bad_message", "bad_message", "config_locked"]);
    assert_eq!(transcript.of_kind(RecordKind::UserText).count(), 1);
    assert!(micro_turns(&msgs).len() >= 2);
}

#[tokio::test(start_paused = true)]
async fn bad_config_is_rejected_and_previous_config_kept() {
    let mut h = Harness::start(SessionConfig::default());
    // the oracle needs a script
    h.send(&ClientMessage::SetConfig(ConfigPatch { policy: Some(PolicySpec::Oracle), ..ConfigPatch::default() })).await;
    h.send(&ClientMessage::SetConfig(ConfigPatch { delta_t_ms: Some(0), ..ConfigPatch::default() })).await;
    tokio::task::yield_now().await;
    sleep_until(Instant::now() + Duration::from_millis(1200)).await;
    let (msgs, _) = h.finish().await;
    let errors = msgs.iter().filter(|m| matches!(m, ServerMessage::Error { code, .. } if code == "bad_config")).count();
    assert_eq!(errors, 2);
    assert_eq!(micro_turns(&msgs).iter().map(|t| t.0).collect::<Vec<_>>(), vec![600, 1200]);
}

#[test]
fn wire_schema() {
    let m: ClientMessage = serde_json::from_str(r#"{"type":"user_text","t_ms":5,"text":"hi"}"#).unwrap();
    assert_eq!(m, ClientMessage::UserText { t_ms: Some(5), text: "hi".into() });
    let m: ClientMessage = serde_json::from_str(r#"{"type":"set_config","delta_t_ms":300,"policy":"remote:http://x/y"}"#).unwrap();
    assert_eq!(
        m,
        ClientMessage::SetConfig(ConfigPatch {
            delta_t_ms: Some(300),
            policy: Some(PolicySpec::Remote("http://x/y".into())),
            ..ConfigPatch::default()
        })
    );
    let s = ServerMessage::SystemMicroTurn { t_ms: 600, control: Some(ControlToken::UserIsSpeaking), tokens: vec![] };
    assert_eq!(
        serde_json::to_string(&s).unwrap(),
        r#"{"type":"system_micro_turn","t_ms":600,"control":"user_is_speaking","tokens":[]}"#
    );
    assert_eq!(serde_json::to_string(&ServerMessage::Abort { t_ms: 3 }).unwrap(), r#"{"type":"abort","t_ms":3}"#);
}

async fn spawn_server(cfg: ServerConfig) -> std::net::SocketAddr {
    let server = Server::bind("127.0.0.1:0", cfg).await.unwrap();
    let addr = server.local_addr().unwrap();
    tokio::spawn(server.run());
    addr
}

async fn ndjson_session(addr: std::net::SocketAddr, delta_t_ms: u64, bad: bool) -> Vec<ServerMessage> {
    let stream = TcpStream::connect(addr).await.unwrap();
    let (r, mut w) = stream.into_split();
    let cfg = ClientMessage::SetConfig(ConfigPatch { delta_t_ms: Some(delta_t_ms), ..ConfigPatch::default() });
    w.write_all(line(&cfg).as_bytes()).await.unwrap();
    if bad {
        w.write_all(b"garbage\n").await.unwrap();
    }
    let mut lines = BufReader::new(r).lines();
    let mut out = Vec::new();
    while micro_turns(&out).len() < 3 {
        let l = lines.next_line().await.unwrap().unwrap();
        out.push(serde_json::from_str(&l).unwrap());
    }
    w.write_all(line(&ClientMessage::EndSession).as_bytes()).await.unwrap();
    while let Some(l) = lines.next_line().await.unwrap() {
        out.push(serde_json::from_str(&l).unwrap());
    }
    out
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn tcp_sessions_are_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let addr = spawn_server(ServerConfig { record_dir: Some(dir.path().into()), ..ServerConfig::default() }).await;
    let (a, b) = tokio::join!(ndjson_session(addr, 50, true), ndjson_session(addr, 80, false));
    assert!(matches!(&a[0], ServerMessage::Error { code, .. } if code == "bad_message"));
    assert!(!b.iter().any(|m| matches!(m, ServerMessage::Error { .. })));
    for (msgs, dt) in [(&a, 50), (&b, 80)] {
        let ts: Vec<u64> = micro_turns(msgs).iter().map(|t| t.0).collect();
        assert_eq!(ts[..3], [dt, 2 * dt, 3 * dt]);
    }
    // transcripts land after the sessions close
    for _ in 0..100 {
        if std::fs::read_dir(dir.path()).unwrap().count() == 2 {
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(files.len(), 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn websocket_transport() {
    let addr = spawn_server(ServerConfig::default()).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/")).await.unwrap();
    let cfg = ClientMessage::SetConfig(ConfigPatch { delta_t_ms: Some(50), ..ConfigPatch::default() });
    ws.send(Message::text(serde_json::to_string(&cfg).unwrap())).await.unwrap();
    ws.send(Message::text("nope")).await.unwrap();
    ws.send(Message::text(serde_json::to_string(&ClientMessage::UserText { t_ms: None, text: "hi".into() }).unwrap()))
        .await
        .unwrap();
    let mut msgs = Vec::new();
    while micro_turns(&msgs).len() < 4 {
        if let Message::Text(t) = ws.next().await.unwrap().unwrap() {
            msgs.push(serde_json::from_str::<ServerMessage>(&t).unwrap());
        }
    }
    ws.send(Message::text(serde_json::to_string(&ClientMessage::EndSession).unwrap())).await.unwrap();
    assert!(msgs.iter().any(|m| matches!(m, ServerMessage::Error { code, .. } if code == "bad_message")));
    let ts: Vec<u64> = micro_turns(&msgs).iter().map(|t| t.0).collect();
    assert!(ts.windows(2).all(|w| w[0] < w[1]) && ts.iter().all(|t| t % 50 == 0), "{ts:?}");
}

#[tokio::test]
async fn bind_error() {
    let server = Server::bind("127.0.0.1:0", ServerConfig::default()).await.unwrap();
    let addr = server.local_addr().unwrap().to_string();
    assert!(matches!(
        Server::bind(&addr, ServerConfig::default()).await,
        Err(microturn_core::service::ServiceError::Bind { .. })
    ));
}
