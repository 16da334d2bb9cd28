//! TCP transport. One port speaks three things, told apart by the first
//! bytes: raw NDJSON, a WebSocket upgrade, or a plain HTTP GET for the
//! cockpit's static files.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures_util::{SinkExt, StreamExt};
use serde::Serialize;
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio::time::{self, MissedTickBehavior};
use tokio_tungstenite::tungstenite::handshake::derive_accept_key;
use tokio_tungstenite::tungstenite::protocol::Role as WsRole;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::WebSocketStream;

use crate::error::Result;
use crate::log_file::{Direction, EpisodeLog, LogRecord};
use crate::protocol::{parse_client, ClientMessage, ServerMessage};
use crate::session::{Session, SessionConfig, TICK_RATE_HZ};

/// Outbound messages queued per client before further ones are dropped.
const OUT_QUEUE: usize = 256;
const MAX_HEAD: usize = 16 * 1024;

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub addr: SocketAddr,
    pub session: SessionConfig,
    /// Wall-clock pacing of ticks. Simulated time always advances by
    /// 1/20 s per tick.
    pub tick_interval: Duration,
    pub log_dir: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
}

impl ServerConfig {
    pub fn new(addr: SocketAddr, session: SessionConfig) -> Self {
        Self {
            addr,
            session,
            tick_interval: Duration::from_secs_f64(1.0 / TICK_RATE_HZ),
            log_dir: None,
            static_dir: None,
        }
    }
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<Result<()>>,
}

impl ServerHandle {
    /// Stop the tick loop and wait for it to flush its log.
    pub async fn shutdown(mut self) -> Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.task.await.unwrap_or_else(|e| Err(std::io::Error::other(e).into()))
    }

    /// Run until the tick loop fails.
    pub async fn wait(self) -> Result<()> {
        let _keep = self.shutdown;
        self.task.await.unwrap_or_else(|e| Err(std::io::Error::other(e).into()))
    }
}

enum Event {
    Connected(u64, mpsc::Sender<Arc<str>>),
    Line(u64, String),
    Closed(u64),
}

/// Bind and start serving in the background.
pub async fn spawn(cfg: ServerConfig) -> Result<ServerHandle> {
    let session = Session::new(cfg.session.clone())?;
    let listener = TcpListener::bind(cfg.addr).await?;
    let addr = listener.local_addr()?;
    let (ev_tx, ev_rx) = mpsc::unbounded_channel();
    let (sd_tx, sd_rx) = oneshot::channel();
    let static_dir = cfg.static_dir.clone().map(Arc::new);
    let acceptor = tokio::spawn(accept_loop(listener, ev_tx, static_dir));
    let task = tokio::spawn(async move {
        let out = TickLoop::new(session, cfg.log_dir.clone()).run(ev_rx, cfg.tick_interval, sd_rx).await;
        acceptor.abort();
        out
    });
    log::info!("duet server listening on {addr}");
    Ok(ServerHandle {
        addr,
        shutdown: Some(sd_tx),
        task,
    })
}

/// Serve until the process is stopped.
pub async fn serve(cfg: ServerConfig) -> Result<()> {
    spawn(cfg).await?.wait().await
}

async fn accept_loop(listener: TcpListener, events: mpsc::UnboundedSender<Event>, static_dir: Option<Arc<PathBuf>>) {
    let mut next_id = 1u64;
    loop {
        let (stream, peer) = match listener.accept().await {
            Ok(c) => c,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let id = next_id;
        next_id += 1;
        log::debug!("connection {id} from {peer}");
        let events = events.clone();
        let static_dir = static_dir.clone();
        tokio::spawn(async move {
            if let Err(e) = handle_conn(stream, id, events, static_dir).await {
                log::debug!("connection {id}: {e}");
            }
        });
    }
}

async fn handle_conn(
    stream: TcpStream,
    id: u64,
    events: mpsc::UnboundedSender<Event>,
    static_dir: Option<Arc<PathBuf>>,
) -> std::io::Result<()> {
    let mut probe = [0u8; 4];
    let mut n = 0;
    for _ in 0..200 {
        n = stream.peek(&mut probe).await?;
        if n == 0 || n >= 4 || !b"GET ".starts_with(&probe[..n]) {
            break;
        }
        time::sleep(Duration::from_millis(5)).await;
    }
    if n == 0 {
        return Ok(());
    }
    if n >= 4 && &probe == b"GET " {
        serve_http(stream, id, events, static_dir).await
    } else {
        serve_lines(stream, id, events).await
    }
}

async fn serve_lines(stream: TcpStream, id: u64, events: mpsc::UnboundedSender<Event>) -> std::io::Result<()> {
    let (r, mut w) = stream.into_split();
    let (tx, mut rx) = mpsc::channel::<Arc<str>>(OUT_QUEUE);
    let _ = events.send(Event::Connected(id, tx));
    let writer = tokio::spawn(async move {
        while let Some(line) = rx.recv().await {
            if w.write_all(line.as_bytes()).await.is_err() || w.write_all(b"\n").await.is_err() {
                break;
            }
        }
    });
    let mut lines = BufReader::new(r).lines();
    while let Ok(Some(line)) = lines.next_line().await {
        if !line.trim().is_empty() {
            let _ = events.send(Event::Line(id, line));
        }
    }
    let _ = events.send(Event::Closed(id));
    let _ = writer.await;
    Ok(())
}

/// Read an HTTP request head without consuming anything after it.
async fn read_head(stream: &mut TcpStream) -> std::io::Result<String> {
    let mut head = Vec::with_capacity(512);
    let mut byte = [0u8; 1];
    while !head.ends_with(b"\r\n\r\n") {
        if stream.read(&mut byte).await? == 0 || head.len() >= MAX_HEAD {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "truncated request head"));
        }
        head.push(byte[0]);
    }
    Ok(String::from_utf8_lossy(&head).into_owned())
}

async fn serve_http(
    mut stream: TcpStream,
    id: u64,
    events: mpsc::UnboundedSender<Event>,
    static_dir: Option<Arc<PathBuf>>,
) -> std::io::Result<()> {
    let head = read_head(&mut stream).await?;
    let mut lines = head.split("\r\n");
    let path = lines.next().and_then(|l| l.split_whitespace().nth(1)).unwrap_or("/").to_string();
    let headers: HashMap<String, String> = lines
        .filter_map(|l| l.split_once(':'))
        .map(|(k, v)| (k.trim().to_ascii_lowercase(), v.trim().to_string()))
        .collect();
    let upgrade = headers.get("upgrade").is_some_and(|v| v.eq_ignore_ascii_case("websocket"));
    match (upgrade, headers.get("sec-websocket-key")) {
        (true, Some(key)) => {
            let resp = format!(
                "HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n\
                 Sec-WebSocket-Accept: {}\r\n\r\n",
                derive_accept_key(key.as_bytes())
            );
            stream.write_all(resp.as_bytes()).await?;
            let ws = WebSocketStream::from_raw_socket(stream, WsRole::Server, None).await;
            serve_ws(ws, id, events).await;
            Ok(())
        }
        _ => serve_static(stream, &path, static_dir.as_deref()).await,
    }
}

async fn serve_ws(ws: WebSocketStream<TcpStream>, id: u64, events: mpsc::UnboundedSender<Event>) {
    let (mut sink, mut source) = ws.split();
    let (tx, mut rx) = mpsc::channel::<Arc<str>>(OUT_QUEUE);
    let _ = events.send(Event::Connected(id, tx));
    let writer = tokio::spawn(async move {
        while let Some(line) = rx.recv().await {
            if sink.send(Message::text(line.to_string())).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    while let Some(Ok(msg)) = source.next().await {
        match msg {
            Message::Text(text) => {
                for line in text.lines().filter(|l| !l.trim().is_empty()) {
                    let _ = events.send(Event::Line(id, line.to_string()));
                }
            }
            Message::Close(_) => break,
            _ => {}
        }
    }
    let _ = events.send(Event::Closed(id));
    let _ = writer.await;
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript",
        "css" => "text/css",
        "json" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "wasm" => "application/wasm",
        _ => "application/octet-stream",
    }
}

async fn serve_static(mut stream: TcpStream, url_path: &str, root: Option<&PathBuf>) -> std::io::Result<()> {
    let rel = url_path.split(['?', '#']).next().unwrap_or("/").trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel_path = Path::new(rel);
    let safe = rel_path.components().all(|c| matches!(c, Component::Normal(_)));
    let file = match root {
        Some(root) if safe => tokio::fs::read(root.join(rel_path)).await.ok(),
        _ => None,
    };
    let (status, ctype, body) = match file {
        Some(body) => ("200 OK", content_type(rel_path), body),
        None => ("404 Not Found", "text/plain", b"not found\n".to_vec()),
    };
    let head = format!(
        "HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    stream.write_all(head.as_bytes()).await?;
    stream.write_all(&body).await?;
    stream.shutdown().await
}

struct TickLoop {
    session: Session,
    log_dir: Option<PathBuf>,
    log: Option<EpisodeLog>,
    start: Instant,
    conns: HashMap<u64, mpsc::Sender<Arc<str>>>,
    human: Option<u64>,
    /// Inbound message received while no log was open.
    pending_in: Option<LogRecord>,
}

impl TickLoop {
    fn new(session: Session, log_dir: Option<PathBuf>) -> Self {
        Self {
            session,
            log_dir,
            log: None,
            start: Instant::now(),
            conns: HashMap::new(),
            human: None,
            pending_in: None,
        }
    }

    fn ts(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1e3
    }

    async fn run(
        mut self,
        mut events: mpsc::UnboundedReceiver<Event>,
        tick_interval: Duration,
        mut shutdown: oneshot::Receiver<()>,
    ) -> Result<()> {
        let mut interval = time::interval(tick_interval);
        interval.set_missed_tick_behavior(MissedTickBehavior::Burst);
        loop {
            tokio::select! {
                biased;
                _ = &mut shutdown => break,
                ev = events.recv() => match ev {
                    Some(ev) => {
                        if self.on_event(ev)? {
                            interval.reset();
                        }
                    }
                    None => break,
                },
                _ = interval.tick() => {
                    let msgs = self.session.tick();
                    for m in msgs {
                        self.send(None, &m)?;
                    }
                    if let Some(log) = &mut self.log {
                        log.flush()?;
                    }
                }
            }
        }
        if let Some(mut log) = self.log.take() {
            log.flush()?;
        }
        Ok(())
    }

    /// Handle one event. Returns true when an episode just started, so the
    /// caller can restart the tick clock.
    fn on_event(&mut self, ev: Event) -> Result<bool> {
        match ev {
            Event::Connected(id, tx) => {
                self.conns.insert(id, tx);
                Ok(false)
            }
            Event::Closed(id) => {
                self.conns.remove(&id);
                if self.human == Some(id) {
                    self.human = None;
                    if let Some(end) = self.session.disconnect() {
                        self.send(None, &end)?;
                    }
                }
                Ok(false)
            }
            Event::Line(id, line) => self.on_line(id, &line),
        }
    }

    fn on_line(&mut self, id: u64, line: &str) -> Result<bool> {
        let parsed = parse_client(line);
        let rec = LogRecord {
            ts_ms: self.ts(),
            dir: Direction::In,
            conn: Some(id),
            msg: match &parsed {
                Ok(m) => serde_json::to_value(m)?,
                Err(_) => serde_json::json!({ "raw": line }),
            },
        };
        match &mut self.log {
            Some(log) => log.write(&rec)?,
            None => self.pending_in = Some(rec),
        }
        let msg = match parsed {
            Ok(m) => m,
            Err(e) => return self.send(Some(id), &ServerMessage::error(e)).map(|_| false),
        };
        let is_human = self.human == Some(id);
        match msg {
            ClientMessage::Hello { role, scenario, version } => {
                if self.human.is_some() {
                    let why = if is_human { "already greeted" } else { "another human is driving this session" };
                    return self.send(Some(id), &ServerMessage::refused(why)).map(|_| false);
                }
                match self.session.hello(role, scenario.as_deref(), version) {
                    Ok(welcome) => {
                        self.human = Some(id);
                        self.send(Some(id), &welcome)?;
                        Ok(true)
                    }
                    Err(why) => self.send(Some(id), &ServerMessage::refused(why)).map(|_| false),
                }
            }
            _ if !is_human => self.send(Some(id), &ServerMessage::refused("send hello first")).map(|_| false),
            ClientMessage::Input { seq, ax, ay } => {
                if let Err(why) = self.session.input(seq, ax, ay) {
                    self.send(Some(id), &ServerMessage::error(why))?;
                }
                Ok(false)
            }
            ClientMessage::Reset => match self.session.reset() {
                Ok(msgs) => {
                    for m in &msgs {
                        self.send(None, m)?;
                    }
                    Ok(true)
                }
                Err(why) => self.send(Some(id), &ServerMessage::error(why)).map(|_| false),
            },
        }
    }

    /// Log and deliver. `None` broadcasts to every client.
    fn send(&mut self, to: Option<u64>, msg: &ServerMessage) -> Result<()> {
        if matches!(msg, ServerMessage::Welcome { .. }) {
            self.open_log()?;
        }
        self.log_out(to, msg)?;
        if matches!(msg, ServerMessage::SessionEnd { .. }) {
            if let Some(mut log) = self.log.take() {
                log.flush()?;
                log::info!("episode log written to {}", log.path().display());
            }
        }
        let line: Arc<str> = serde_json::to_string(msg)?.into();
        match to {
            Some(id) => {
                if let Some(tx) = self.conns.get(&id) {
                    let _ = tx.try_send(line);
                }
            }
            None => {
                for tx in self.conns.values() {
                    let _ = tx.try_send(line.clone());
                }
            }
        }
        Ok(())
    }

    fn open_log(&mut self) -> Result<()> {
        if let Some(mut old) = self.log.take() {
            old.flush()?;
        }
        let pending = self.pending_in.take();
        let Some(dir) = &self.log_dir else {
            return Ok(());
        };
        let mut log = EpisodeLog::create(dir, &self.session.meta(), self.ts())?;
        if let Some(rec) = pending {
            log.write(&rec)?;
        }
        self.log = Some(log);
        Ok(())
    }

    fn log_out<T: Serialize>(&mut self, to: Option<u64>, msg: &T) -> Result<()> {
        let ts_ms = self.ts();
        if let Some(log) = &mut self.log {
            log.write(&LogRecord {
                ts_ms,
                dir: Direction::Out,
                conn: to,
                msg: serde_json::to_value(msg)?,
            })?;
        }
        Ok(())
    }
}
