//! Teleoperation bridge: one client flies the simulator over line-delimited
//! JSON, on a raw TCP stream or as WebSocket text messages on the same port.

use anyhow::{bail, Context, Result};
use base64::Engine as _;
use gazebc::data::{DatasetManifest, Outcome, Source, SplitTag, StepRecord, Trajectory, NO_TAG};
use gazebc::features::kinematic_features;
use gazebc::world::{
    check_collision, is_success, render, step, ActionCommand, Configuration, RenderedFrame, RigidState, SimSettings, WorldConfig,
    QUAD_RADIUS,
};
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionCmd {
    Start,
    Stop,
    Reset,
}

/// Messages sent by the client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ClientMessage {
    Control {
        t: u64,
        action: [f64; 4],
        gaze: [f64; 2],
    },
    Session {
        cmd: SessionCmd,
        #[serde(default)]
        config_id: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hud {
    pub altitude: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Running,
    Ended,
}

/// Messages sent by the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerMessage {
    Frame {
        t: u64,
        w: usize,
        h: usize,
        /// Base64 of the interleaved RGB bytes.
        rgb: String,
        hud: Hud,
    },
    Status {
        state: SessionState,
        config_id: usize,
        steps: usize,
        #[serde(default)]
        outcome: Option<Outcome>,
        #[serde(default)]
        file: Option<String>,
    },
    Error {
        message: String,
    },
}

impl ServerMessage {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("server message serializes")
    }
}

/// Parses and range-checks one client line.
pub fn parse_client_message(line: &str) -> Result<ClientMessage, String> {
    let msg: ClientMessage = serde_json::from_str(line).map_err(|e| format!("malformed message: {e}"))?;
    if let ClientMessage::Control { action, gaze, .. } = &msg {
        if !action.iter().all(|a| (-1.0..=1.0).contains(a)) {
            return Err(format!("action {action:?} outside [-1, 1]"));
        }
        if !gaze.iter().all(|g| (0.0..=1.0).contains(g)) {
            return Err(format!("gaze {gaze:?} outside [0, 1]"));
        }
    }
    Ok(msg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Lines,
    WebSocket,
}

enum Received {
    Text(String),
    Idle,
    Closed,
}

trait Transport: Send {
    fn recv(&mut self) -> Received;
    fn send(&mut self, text: &str) -> io::Result<()>;
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}

struct LineTransport {
    stream: TcpStream,
    pending: Vec<u8>,
}

impl Transport for LineTransport {
    fn recv(&mut self) -> Received {
        loop {
            if let Some(pos) = self.pending.iter().position(|&b| b == b'\n') {
                let line: Vec<u8> = self.pending.drain(..=pos).collect();
                return Received::Text(String::from_utf8_lossy(&line).trim().to_string());
            }
            let mut buf = [0u8; 4096];
            match self.stream.read(&mut buf) {
                Ok(0) => return Received::Closed,
                Ok(n) => self.pending.extend_from_slice(&buf[..n]),
                Err(e) if is_timeout(&e) => return Received::Idle,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(_) => return Received::Closed,
            }
        }
    }

    fn send(&mut self, text: &str) -> io::Result<()> {
        self.stream.write_all(text.as_bytes())?;
        self.stream.write_all(b"\n")?;
        self.stream.flush()
    }
}

struct WsTransport {
    ws: tungstenite::WebSocket<TcpStream>,
}

impl Transport for WsTransport {
    fn recv(&mut self) -> Received {
        use tungstenite::{Error, Message};
        match self.ws.read() {
            Ok(Message::Text(t)) => Received::Text(t.as_str().trim().to_string()),
            Ok(Message::Binary(b)) => Received::Text(String::from_utf8_lossy(&b).trim().to_string()),
            Ok(Message::Close(_)) => Received::Closed,
            Ok(_) => Received::Idle,
            Err(Error::Io(e)) if is_timeout(&e) => Received::Idle,
            Err(_) => Received::Closed,
        }
    }

    fn send(&mut self, text: &str) -> io::Result<()> {
        self.ws.send(tungstenite::Message::text(text)).map_err(|e| match e {
            tungstenite::Error::Io(e) => e,
            other => io::Error::other(other),
        })
    }
}

const POLL: Duration = Duration::from_millis(5);

/// Chooses the protocol from the first bytes the client sends.
fn open_transport(stream: TcpStream, sniff: Duration) -> Result<(Box<dyn Transport>, TransportKind)> {
    stream.set_read_timeout(Some(sniff))?;
    let mut head = [0u8; 4];
    let deadline = Instant::now() + sniff;
    let mut seen = 0;
    while Instant::now() < deadline {
        match stream.peek(&mut head) {
            Ok(0) => bail!("client closed the connection before speaking"),
            Ok(n) => {
                seen = n;
                if n == 4 || head[..n] != b"GET "[..n] {
                    break;
                }
                std::thread::sleep(POLL);
            }
            Err(e) if is_timeout(&e) => break,
            Err(e) => return Err(e.into()),
        }
    }
    if seen == 4 && &head == b"GET " {
        stream.set_read_timeout(Some(Duration::from_secs(10)))?;
        let ws = tungstenite::accept(stream).map_err(|e| anyhow::anyhow!("WebSocket handshake failed: {e}"))?;
        ws.get_ref().set_read_timeout(Some(POLL))?;
        Ok((Box::new(WsTransport { ws }), TransportKind::WebSocket))
    } else {
        stream.set_read_timeout(Some(POLL))?;
        Ok((Box::new(LineTransport { stream, pending: Vec::new() }), TransportKind::Lines))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Control {
    generation: u64,
    t: u64,
    action: ActionCommand,
    gaze: [f64; 2],
}

/// Latest-wins single-slot control register.
#[derive(Debug, Clone, Default)]
struct Mailbox(Arc<Mutex<Option<Control>>>);

impl Mailbox {
    fn put(&self, c: Control) {
        *self.0.lock().expect("mailbox lock") = Some(c);
    }

    fn take(&self) -> Option<Control> {
        self.0.lock().expect("mailbox lock").take()
    }

    /// Whether a control of `generation` stamped at or after `t` is waiting.
    fn ready(&self, generation: u64, t: u64) -> bool {
        self.0.lock().expect("mailbox lock").is_some_and(|c| c.generation == generation && c.t >= t)
    }
}

enum Event {
    Session { cmd: SessionCmd, config_id: Option<usize>, generation: u64 },
    Disconnected,
}

/// Owns the connection: parses inbound lines and flushes outbound ones.
fn io_loop(mut transport: Box<dyn Transport>, mailbox: Mailbox, events: Sender<Event>, outbound: Receiver<String>) {
    let mut generation = 0u64;
    let mut last_t: Option<u64> = None;
    loop {
        loop {
            match outbound.try_recv() {
                Ok(line) => {
                    if transport.send(&line).is_err() {
                        let _ = events.send(Event::Disconnected);
                        return;
                    }
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return,
            }
        }
        match transport.recv() {
            Received::Idle => {}
            Received::Closed => {
                let _ = events.send(Event::Disconnected);
                // keep draining until the simulator stops
                while outbound.recv().is_ok() {}
                return;
            }
            Received::Text(line) if line.is_empty() => {}
            Received::Text(line) => {
                let reply = match parse_client_message(&line) {
                    Ok(ClientMessage::Control { t, action, gaze }) => {
                        if last_t.is_some_and(|prev| t < prev) {
                            Some(format!("control t {t} is earlier than {}", last_t.unwrap()))
                        } else {
                            last_t = Some(t);
                            mailbox.put(Control { generation, t, action: ActionCommand::from_array(action), gaze });
                            None
                        }
                    }
                    Ok(ClientMessage::Session { cmd, config_id }) => {
                        if cmd != SessionCmd::Stop {
                            generation += 1;
                            last_t = None;
                        }
                        let _ = events.send(Event::Session { cmd, config_id, generation });
                        None
                    }
                    Err(e) => Some(e),
                };
                if let Some(message) = reply {
                    if transport.send(&ServerMessage::Error { message }.to_line()).is_err() {
                        let _ = events.send(Event::Disconnected);
                        return;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TeleopOptions {
    pub out: PathBuf,
    /// Wall-clock duration of one simulation tick.
    pub tick: Duration,
    /// Hold each tick until a control stamped with it arrives.
    pub lockstep: bool,
    /// Stop after this many recorded episodes.
    pub max_episodes: Option<usize>,
    /// Give up if no client connects in time.
    pub accept_timeout: Option<Duration>,
    /// How long to wait for the client's first bytes when choosing the protocol.
    pub sniff: Duration,
    /// Configurations addressable by `config_id`.
    pub configs: Vec<Configuration>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeSummary {
    pub config_id: usize,
    pub outcome: Outcome,
    pub steps: usize,
    pub file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TeleopSummary {
    pub transport: TransportKind,
    pub episodes: Vec<EpisodeSummary>,
}

struct Episode {
    config_id: usize,
    generation: u64,
    state: RigidState,
    frame: RenderedFrame,
    steps: Vec<StepRecord>,
    action: ActionCommand,
    gaze: [f64; 2],
}

pub struct TeleopServer {
    listener: TcpListener,
}

impl TeleopServer {
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Self> {
        Ok(Self { listener: TcpListener::bind(addr).context("binding teleop socket")? })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    fn accept(&self, timeout: Option<Duration>) -> Result<TcpStream> {
        self.listener.set_nonblocking(true)?;
        let start = Instant::now();
        loop {
            match self.listener.accept() {
                Ok((s, _)) => {
                    s.set_nonblocking(false)?;
                    return Ok(s);
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if let Some(t) = timeout {
                        if start.elapsed() >= t {
                            bail!("no teleop client connected within {:.1} s", t.as_secs_f64());
                        }
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Serves one client until it disconnects or `max_episodes` are recorded.
    pub fn serve(self, world: &WorldConfig, sim: &SimSettings, opts: &TeleopOptions) -> Result<TeleopSummary> {
        if opts.configs.is_empty() {
            bail!("no configurations to fly");
        }
        std::fs::create_dir_all(&opts.out).with_context(|| format!("creating {}", opts.out.display()))?;
        let stream = self.accept(opts.accept_timeout)?;
        let (transport, kind) = open_transport(stream, opts.sniff)?;
        let mailbox = Mailbox::default();
        let (event_tx, event_rx) = mpsc::channel();
        let (out_tx, out_rx) = mpsc::channel::<String>();
        let io_mailbox = mailbox.clone();
        let io = std::thread::spawn(move || io_loop(transport, io_mailbox, event_tx, out_rx));
        let mut session = Session { world, sim, opts, out: out_tx, episodes: Vec::new(), manifest: load_or_new_manifest(&opts.out, world)? };
        let result = session.run(&mailbox, &event_rx);
        let episodes = std::mem::take(&mut session.episodes);
        drop(session);
        let _ = io.join();
        result?;
        Ok(TeleopSummary { transport: kind, episodes })
    }
}

pub const TELEOP_MANIFEST: &str = "manifest.json";

fn load_or_new_manifest(dir: &Path, world: &WorldConfig) -> Result<DatasetManifest> {
    let path = dir.join(TELEOP_MANIFEST);
    if path.exists() {
        let m = DatasetManifest::load(&path)?;
        if m.world_hash != format!("{:016x}", world.hash()) {
            bail!("{} belongs to a different world", path.display());
        }
        Ok(m)
    } else {
        Ok(DatasetManifest::new(world.hash()))
    }
}

struct Session<'a> {
    world: &'a WorldConfig,
    sim: &'a SimSettings,
    opts: &'a TeleopOptions,
    out: Sender<String>,
    episodes: Vec<EpisodeSummary>,
    manifest: DatasetManifest,
}

impl Session<'_> {
    fn send(&self, msg: ServerMessage) {
        let _ = self.out.send(msg.to_line());
    }

    fn send_frame(&self, ep: &Episode) {
        self.send(ServerMessage::Frame {
            t: ep.steps.len() as u64,
            w: ep.frame.width,
            h: ep.frame.height,
            rgb: base64::engine::general_purpose::STANDARD.encode(&ep.frame.rgb),
            hud: Hud { altitude: ep.state.position.z, speed: ep.state.linear_velocity.norm() },
        });
    }

    fn start(&self, config_id: usize, generation: u64) -> Option<Episode> {
        let Some(config) = self.opts.configs.get(config_id) else {
            self.send(ServerMessage::Error { message: format!("config_id {config_id} out of range 0..{}", self.opts.configs.len()) });
            return None;
        };
        let state = self.world.start_state(config);
        let frame = render(&state, &self.world.scene(config), &self.sim.camera);
        let ep = Episode { config_id, generation, state, frame, steps: Vec::new(), action: ActionCommand::ZERO, gaze: [0.5, 0.5] };
        self.send(ServerMessage::Status { state: SessionState::Running, config_id, steps: 0, outcome: None, file: None });
        self.send_frame(&ep);
        Some(ep)
    }

    fn finish(&mut self, ep: Episode) -> Result<()> {
        let config = self.opts.configs[ep.config_id];
        let outcome = if is_success(&ep.state, &config, self.world) { Outcome::Success } else { Outcome::Timeout };
        let steps = ep.steps.len();
        let file = if steps == 0 {
            None
        } else {
            let t = Trajectory {
                source: Source::Human,
                outcome,
                seed: 0,
                config,
                world_hash: self.world.hash(),
                width: self.sim.camera.width as u16,
                height: self.sim.camera.height as u16,
                final_position: ep.state.position.to_array(),
                steps: ep.steps,
            };
            let mut n = self.manifest.entries.len();
            let name = loop {
                let name = format!("human_{n:04}.gzbc");
                if !self.opts.out.join(&name).exists() {
                    break name;
                }
                n += 1;
            };
            let sum = t.save(&self.opts.out.join(&name))?;
            self.manifest.push(name.clone(), &t, sum, SplitTag::Train);
            self.manifest.save(&self.opts.out.join(TELEOP_MANIFEST))?;
            Some(name)
        };
        self.send(ServerMessage::Status { state: SessionState::Ended, config_id: ep.config_id, steps, outcome: Some(outcome), file: file.clone() });
        self.episodes.push(EpisodeSummary { config_id: ep.config_id, outcome, steps, file });
        Ok(())
    }

    fn done(&self) -> bool {
        self.opts.max_episodes.is_some_and(|m| self.episodes.iter().filter(|e| e.file.is_some()).count() >= m)
    }

    /// Advances one tick; returns the episode unless it ended.
    fn tick(&mut self, mut ep: Episode, mailbox: &Mailbox) -> Result<Option<Episode>> {
        if let Some(c) = mailbox.take() {
            if c.generation == ep.generation {
                ep.action = c.action;
                ep.gaze = c.gaze;
            }
        }
        let config = self.opts.configs[ep.config_id];
        let scene = self.world.scene(&config);
        ep.steps.push(StepRecord {
            index: ep.steps.len() as u32,
            rgb: ep.frame.rgb.clone(),
            depth: ep.frame.depth_f32(),
            kin: kinematic_features(&ep.state).map(|v| v as f32),
            action: ep.action.to_array().map(|v| v as f32),
            gaze: ep.gaze.map(|v| v as f32),
            collision: check_collision(&ep.state, &scene, QUAD_RADIUS),
            phase: NO_TAG,
            pattern: NO_TAG,
        });
        ep.state = step(&ep.state, &ep.action, self.sim.dt, &self.sim.dynamics)?;
        if is_success(&ep.state, &config, self.world) || ep.steps.len() >= self.sim.timeout_steps {
            self.finish(ep)?;
            return Ok(None);
        }
        ep.frame = render(&ep.state, &scene, &self.sim.camera);
        self.send_frame(&ep);
        Ok(Some(ep))
    }

    fn run(&mut self, mailbox: &Mailbox, events: &Receiver<Event>) -> Result<()> {
        let mut episode: Option<Episode> = None;
        let mut next_tick = Instant::now();
        loop {
            loop {
                let ev = match events.try_recv() {
                    Ok(ev) => ev,
                    Err(TryRecvError::Empty) => break,
                    Err(TryRecvError::Disconnected) => Event::Disconnected,
                };
                match ev {
                    Event::Disconnected => {
                        if let Some(ep) = episode.take() {
                            self.finish(ep)?;
                        }
                        return Ok(());
                    }
                    Event::Session { cmd, config_id, generation } => {
                        let previous = episode.as_ref().map(|e| e.config_id);
                        if let Some(ep) = episode.take() {
                            self.finish(ep)?;
                        }
                        if self.done() {
                            return Ok(());
                        }
                        episode = match cmd {
                            SessionCmd::Stop => None,
                            SessionCmd::Start => self.start(config_id.unwrap_or(0), generation),
                            SessionCmd::Reset => self.start(config_id.or(previous).unwrap_or(0), generation),
                        };
                        next_tick = Instant::now() + self.opts.tick;
                    }
                }
            }
            if let Some(ep) = episode.take() {
                let due = Instant::now() >= next_tick;
                if due && (!self.opts.lockstep || mailbox.ready(ep.generation, ep.steps.len() as u64)) {
                    episode = self.tick(ep, mailbox)?;
                    next_tick = (next_tick + self.opts.tick).max(Instant::now());
                    if episode.is_none() && self.done() {
                        return Ok(());
                    }
                } else {
                    episode = Some(ep);
                }
            }
            let wait = next_tick.saturating_duration_since(Instant::now()).min(Duration::from_millis(2));
            std::thread::sleep(wait.max(Duration::from_micros(200)));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_messages_parse_and_validate() {
        let c = parse_client_message(r#"{"type":"control","t":3,"action":[0,0,1,-1],"gaze":[0.5,0.5]}"#).unwrap();
        assert_eq!(c, ClientMessage::Control { t: 3, action: [0.0, 0.0, 1.0, -1.0], gaze: [0.5, 0.5] });
        let s = parse_client_message(r#"{"type":"session","cmd":"reset","config_id":4}"#).unwrap();
        assert_eq!(s, ClientMessage::Session { cmd: SessionCmd::Reset, config_id: Some(4) });
        assert!(parse_client_message(r#"{"type":"session","cmd":"stop"}"#).is_ok());
        assert!(parse_client_message(r#"{"type":"control","t":3,"action":[0,0,1.5,0],"gaze":[0.5,0.5]}"#).is_err());
        assert!(parse_client_message(r#"{"type":"control","t":3,"action":[0,0,0,0],"gaze":[1.2,0.5]}"#).is_err());
        assert!(parse_client_message(r#"{"type":"control","t":3,"action":[0,0,0],"gaze":[0.5,0.5]}"#).is_err());
        assert!(parse_client_message(r#"{"type":"fly"}"#).is_err());
        assert!(parse_client_message("not json").is_err());
    }

    #[test]
    fn server_messages_have_the_documented_shape() {
        let f = ServerMessage::Frame { t: 0, w: 2, h: 1, rgb: "AAAAAAAA".into(), hud: Hud { altitude: 2.5, speed: 0.0 } };
        let v: serde_json::Value = serde_json::from_str(&f.to_line()).unwrap();
        assert_eq!(v["type"], "frame");
        assert_eq!(v["hud"]["altitude"], 2.5);
        let e = ServerMessage::Error { message: "x".into() };
        assert_eq!(e.to_line(), r#"{"type":"error","message":"x"}"#);
    }

    #[test]
    fn mailbox_keeps_the_latest_control() {
        let m = Mailbox::default();
        let c = |g| Control { generation: g, t: 0, action: ActionCommand::ZERO, gaze: [0.5, 0.5] };
        m.put(c(1));
        m.put(c(2));
        assert_eq!(m.take().map(|c| c.generation), Some(2));
        assert_eq!(m.take(), None);
    }
}
