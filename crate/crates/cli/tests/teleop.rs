use gazebc::data::{Outcome, Source, Trajectory};
use gazebc::world::{sample_configurations, SimSettings, WorldConfig};
use gazebc_cli::teleop::{TeleopOptions, TeleopServer, TeleopSummary, TransportKind};
use serde_json::{json, Value};
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::Path;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

const TICK: Duration = Duration::from_millis(40);

fn start_server(out: &Path, accept_timeout: Option<Duration>, lockstep: bool) -> (SocketAddr, JoinHandle<anyhow::Result<TeleopSummary>>) {
    let world = WorldConfig::default_world();
    let configs = sample_configurations(&world, 5, 0).unwrap();
    let server = TeleopServer::bind("127.0.0.1:0").unwrap();
    let addr = server.local_addr().unwrap();
    let opts = TeleopOptions {
        out: out.to_path_buf(),
        tick: TICK,
        lockstep,
        max_episodes: None,
        accept_timeout,
        sniff: Duration::from_millis(300),
        configs,
    };
    let handle = std::thread::spawn(move || server.serve(&world, &SimSettings::default(), &opts));
    (addr, handle)
}

trait Client {
    fn send(&mut self, v: Value);
    fn recv(&mut self) -> Value;
}

struct LineClient {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

impl LineClient {
    fn connect(addr: SocketAddr) -> Self {
        let s = TcpStream::connect(addr).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        Self { writer: s.try_clone().unwrap(), reader: BufReader::new(s) }
    }
}

impl Client for LineClient {
    fn send(&mut self, v: Value) {
        writeln!(self.writer, "{v}").unwrap();
    }

    fn recv(&mut self) -> Value {
        let mut line = String::new();
        assert!(self.reader.read_line(&mut line).unwrap() > 0, "server closed the stream");
        serde_json::from_str(&line).unwrap()
    }
}

struct WsClient(tungstenite::WebSocket<TcpStream>);

impl WsClient {
    fn connect(addr: SocketAddr) -> Self {
        let s = TcpStream::connect(addr).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        let (ws, _) = tungstenite::client(format!("ws://{addr}/"), s).unwrap();
        Self(ws)
    }
}

impl Client for WsClient {
    fn send(&mut self, v: Value) {
        self.0.send(tungstenite::Message::text(v.to_string())).unwrap();
    }

    fn recv(&mut self) -> Value {
        loop {
            match self.0.read().unwrap() {
                tungstenite::Message::Text(t) => return serde_json::from_str(t.as_str()).unwrap(),
                tungstenite::Message::Close(_) => panic!("server closed the socket"),
                _ => {}
            }
        }
    }
}

fn recv_type(c: &mut dyn Client, kind: &str) -> Value {
    loop {
        let v = c.recv();
        if v["type"] == kind {
            return v;
        }
        assert_ne!(v["type"], "error", "unexpected error {v}");
    }
}

fn gaze_at(t: u64) -> [f64; 2] {
    [0.1 + 0.8 * ((t % 7) as f64 / 6.0), 0.9 - 0.05 * (t % 10) as f64]
}

fn action_at(t: u64) -> [f64; 4] {
    [0.5, 0.0, if t % 2 == 0 { 0.25 } else { -0.25 }, -0.5]
}

/// Answers each frame with a control stamped with the frame's tick.
fn fly_frame_locked(c: &mut dyn Client, frames: u64) -> Duration {
    let start = Instant::now();
    for _ in 0..frames {
        let f = recv_type(c, "frame");
        let t = f["t"].as_u64().unwrap();
        c.send(json!({"type": "control", "t": t, "action": action_at(t), "gaze": gaze_at(t)}));
    }
    start.elapsed()
}

fn load(dir: &Path, status: &Value) -> Trajectory {
    Trajectory::load(&dir.join(status["file"].as_str().expect("status names the file"))).unwrap()
}

fn check_passthrough(client: &mut dyn Client, dir: &Path) {
    client.send(json!({"type": "session", "cmd": "start", "config_id": 2}));
    let s = recv_type(client, "status");
    assert_eq!(s["state"], "running");
    assert_eq!(s["config_id"], 2);
    let frames = 30;
    let elapsed = fly_frame_locked(client, frames);
    let rate = frames as f64 / elapsed.as_secs_f64();
    assert!(rate >= 5.0, "only {rate:.1} control messages per second");
    assert_eq!(recv_type(client, "frame")["t"], frames);
    client.send(json!({"type": "session", "cmd": "stop"}));
    let end = recv_type(client, "status");
    assert_eq!(end["state"], "ended");
    let t = load(dir, &end);
    assert_eq!(t.source, Source::Human);
    assert_eq!(t.steps.len(), frames as usize);
    for s in &t.steps {
        assert!(s.action.iter().all(|a| (-1.0..=1.0).contains(a)));
        assert!(s.gaze.iter().all(|g| (0.0..=1.0).contains(g)));
    }
    for s in &t.steps {
        let i = s.index as u64;
        assert_eq!(s.gaze, gaze_at(i).map(|v| v as f32), "gaze at step {i}");
        assert_eq!(s.action, action_at(i).map(|v| v as f32), "action at step {i}");
    }
}

#[test]
fn line_client_gaze_and_actions_pass_through() {
    let dir = tempfile::tempdir().unwrap();
    let (addr, server) = start_server(dir.path(), Some(Duration::from_secs(10)), true);
    let mut c = LineClient::connect(addr);
    check_passthrough(&mut c, dir.path());
    drop(c);
    let summary = server.join().unwrap().unwrap();
    assert_eq!(summary.transport, TransportKind::Lines);
    assert_eq!(summary.episodes.len(), 1);
}

#[test]
fn websocket_client_gaze_and_actions_pass_through() {
    let dir = tempfile::tempdir().unwrap();
    let (addr, server) = start_server(dir.path(), Some(Duration::from_secs(10)), true);
    let mut c = WsClient::connect(addr);
    check_passthrough(&mut c, dir.path());
    c.0.close(None).unwrap();
    let _ = c.0.flush();
    let summary = server.join().unwrap().unwrap();
    assert_eq!(summary.transport, TransportKind::WebSocket);
    assert_eq!(summary.episodes.len(), 1);
}

#[test]
fn controls_hold_until_replaced_and_default_to_hover_centre() {
    let dir = tempfile::tempdir().unwrap();
    let (addr, server) = start_server(dir.path(), Some(Duration::from_secs(10)), false);
    let mut c = LineClient::connect(addr);
    c.send(json!({"type": "session", "cmd": "start", "config_id": 0}));
    for _ in 0..3 {
        recv_type(&mut c, "frame");
    }
    let f = recv_type(&mut c, "frame");
    assert_eq!(f["t"], 3);
    let held = [0.0, 0.75, 0.0, 1.0];
    c.send(json!({"type": "control", "t": 3, "action": held, "gaze": [0.2, 0.3]}));
    for _ in 0..6 {
        recv_type(&mut c, "frame");
    }
    c.send(json!({"type": "session", "cmd": "stop"}));
    let t = load(dir.path(), &recv_type(&mut c, "status"));
    // the control lands on step 3 or, if it arrives after that tick, a later one
    let first = t.steps.iter().position(|s| s.gaze != [0.5, 0.5]).expect("control was applied");
    assert!(first >= 3);
    for s in &t.steps[..first] {
        assert_eq!(s.action, [0.0; 4]);
        assert_eq!(s.gaze, [0.5, 0.5]);
    }
    for s in &t.steps[first..] {
        assert_eq!(s.action, held.map(|v| v as f32));
        assert_eq!(s.gaze, [0.2, 0.3]);
    }
    drop(c);
    server.join().unwrap().unwrap();
}

#[test]
fn reset_starts_a_new_file_and_disconnect_flushes_a_timeout() {
    let dir = tempfile::tempdir().unwrap();
    let (addr, server) = start_server(dir.path(), Some(Duration::from_secs(10)), false);
    let mut c = LineClient::connect(addr);
    c.send(json!({"type": "session", "cmd": "start", "config_id": 1}));
    fly_frame_locked(&mut c, 5);
    c.send(json!({"type": "session", "cmd": "reset"}));
    let ended = recv_type(&mut c, "status");
    assert_eq!(ended["state"], "ended");
    let first = ended["file"].as_str().unwrap().to_string();
    let running = recv_type(&mut c, "status");
    assert_eq!(running["state"], "running");
    assert_eq!(running["config_id"], 1);
    let f = recv_type(&mut c, "frame");
    assert_eq!(f["t"], 0);
    // control stamps restart with the new session
    c.send(json!({"type": "control", "t": 0, "action": [1, 0, 0, 0], "gaze": [0.5, 0.5]}));
    fly_frame_locked(&mut c, 4);
    drop(c);

    let summary = server.join().unwrap().unwrap();
    assert_eq!(summary.episodes.len(), 2);
    let second = summary.episodes[1].file.clone().unwrap();
    assert_ne!(first, second);
    assert_eq!(summary.episodes[1].outcome, Outcome::Timeout);
    let t = Trajectory::load(&dir.path().join(&second)).unwrap();
    assert_eq!(t.outcome, Outcome::Timeout);
    assert_eq!(t.steps[0].index, 0);
    assert_eq!(t.config, sample_configurations(&WorldConfig::default_world(), 5, 0).unwrap()[1]);
    let manifest = gazebc::data::DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(manifest.entries.len(), 2);
}

#[test]
fn bad_messages_get_errors_and_keep_the_session() {
    let dir = tempfile::tempdir().unwrap();
    let (addr, server) = start_server(dir.path(), Some(Duration::from_secs(10)), false);
    let mut c = LineClient::connect(addr);
    c.send(json!({"type": "session", "cmd": "start", "config_id": 0}));
    fly_frame_locked(&mut c, 3);
    let bad = [
        "this is not json".to_string(),
        json!({"type": "control", "t": 9, "action": [2, 0, 0, 0], "gaze": [0.5, 0.5]}).to_string(),
        json!({"type": "control", "t": 9, "action": [0, 0, 0, 0], "gaze": [0.5, -0.1]}).to_string(),
        json!({"type": "control", "t": 0, "action": [0, 0, 0, 0], "gaze": [0.5, 0.5]}).to_string(),
        json!({"type": "session", "cmd": "start", "config_id": 99}).to_string(),
    ];
    for line in &bad {
        writeln!(c.writer, "{line}").unwrap();
        let err = recv_type_any_error(&mut c);
        assert!(err["message"].as_str().is_some_and(|m| !m.is_empty()), "{line}");
    }
    c.send(json!({"type": "session", "cmd": "start", "config_id": 0}));
    recv_type(&mut c, "status");
    fly_frame_locked(&mut c, 3);
    c.send(json!({"type": "session", "cmd": "stop"}));
    let end = recv_type(&mut c, "status");
    assert_eq!(end["state"], "ended");
    load(dir.path(), &end);
    drop(c);
    server.join().unwrap().unwrap();
}

fn recv_type_any_error(c: &mut LineClient) -> Value {
    loop {
        let v = c.recv();
        if v["type"] == "error" {
            return v;
        }
    }
}

#[test]
fn missing_client_times_out_with_a_clear_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, server) = start_server(dir.path(), Some(Duration::from_millis(200)), false);
    let err = server.join().unwrap().unwrap_err();
    assert!(err.to_string().contains("no teleop client connected"), "{err}");
}
