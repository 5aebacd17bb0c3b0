//! Relay mode: a small blocking HTTP/1.1 forwarder. Each hop reads a
//! request, writes it to the next hop over one persistent connection, and
//! writes the answer back with its worker id added to `relay_path`. One
//! read and one write per message and direction, so a hop costs little
//! more than the transport itself.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::{ErrorBody, Health, ServiceConfig, ServiceError};
use crate::wire::{decode_response, encode_response};

const PROBE_TIMEOUT: Duration = Duration::from_secs(2);
const MAX_HEAD: usize = 64 * 1024;
const MAX_BODY: usize = 16 * 1024 * 1024;
const MAX_HEADERS: usize = 32;

/// Buffered reader for HTTP/1.1 messages with `Content-Length` bodies.
struct Framed {
    stream: TcpStream,
    buf: Vec<u8>,
}

struct Head {
    len: usize,
    content_length: usize,
    close: bool,
}

enum Parsed<T> {
    Complete(T, Head),
    Partial,
}

#[derive(Debug)]
enum FrameError {
    Io(io::Error),
    Eof,
    Bad(String),
}

impl From<io::Error> for FrameError {
    fn from(e: io::Error) -> Self {
        FrameError::Io(e)
    }
}

impl std::fmt::Display for FrameError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FrameError::Io(e) => write!(f, "{e}"),
            FrameError::Eof => f.write_str("connection closed"),
            FrameError::Bad(m) => f.write_str(m),
        }
    }
}

fn head_fields(headers: &[httparse::Header<'_>], len: usize) -> Result<Head, FrameError> {
    let mut content_length = 0;
    let mut close = false;
    for h in headers {
        if h.name.eq_ignore_ascii_case("content-length") {
            content_length = std::str::from_utf8(h.value)
                .ok()
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| FrameError::Bad("invalid content-length".into()))?;
        } else if h.name.eq_ignore_ascii_case("transfer-encoding") {
            return Err(FrameError::Bad("chunked bodies are not supported".into()));
        } else if h.name.eq_ignore_ascii_case("connection") {
            close = h.value.eq_ignore_ascii_case(b"close");
        }
    }
    if content_length > MAX_BODY {
        return Err(FrameError::Bad(format!("body of {content_length} bytes is too large")));
    }
    Ok(Head {
        len,
        content_length,
        close,
    })
}

fn parse_request(buf: &[u8]) -> Result<Parsed<(String, String)>, FrameError> {
    let mut headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut req = httparse::Request::new(&mut headers);
    match req.parse(buf) {
        Ok(httparse::Status::Complete(len)) => {
            let method = req.method.unwrap_or_default().to_owned();
            let path = req.path.unwrap_or_default().to_owned();
            let head = head_fields(req.headers, len)?;
            Ok(Parsed::Complete((method, path), head))
        }
        Ok(httparse::Status::Partial) => Ok(Parsed::Partial),
        Err(e) => Err(FrameError::Bad(format!("malformed request: {e}"))),
    }
}

fn parse_response(buf: &[u8]) -> Result<Parsed<u16>, FrameError> {
    let mut headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
    let mut resp = httparse::Response::new(&mut headers);
    match resp.parse(buf) {
        Ok(httparse::Status::Complete(len)) => {
            let status = resp.code.unwrap_or(0);
            let head = head_fields(resp.headers, len)?;
            Ok(Parsed::Complete(status, head))
        }
        Ok(httparse::Status::Partial) => Ok(Parsed::Partial),
        Err(e) => Err(FrameError::Bad(format!("malformed response: {e}"))),
    }
}

impl Framed {
    fn new(stream: TcpStream) -> Self {
        Self {
            stream,
            buf: Vec::with_capacity(1024),
        }
    }

    fn fill(&mut self) -> Result<(), FrameError> {
        let mut chunk = [0u8; 8192];
        let n = self.stream.read(&mut chunk)?;
        if n == 0 {
            return Err(FrameError::Eof);
        }
        self.buf.extend_from_slice(&chunk[..n]);
        Ok(())
    }

    /// Reads one message. `Eof` before any byte of it means the peer closed
    /// the connection cleanly.
    fn read<T>(
        &mut self,
        parse: fn(&[u8]) -> Result<Parsed<T>, FrameError>,
    ) -> Result<(T, Vec<u8>, bool), FrameError> {
        loop {
            if !self.buf.is_empty() {
                if let Parsed::Complete(start, head) = parse(&self.buf)? {
                    let end = head.len + head.content_length;
                    while self.buf.len() < end {
                        self.fill()?;
                    }
                    let body = self.buf[head.len..end].to_vec();
                    self.buf.drain(..end);
                    return Ok((start, body, head.close));
                }
                if self.buf.len() > MAX_HEAD {
                    return Err(FrameError::Bad("header section too large".into()));
                }
            }
            self.fill()?;
        }
    }
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        405 => "Method Not Allowed",
        422 => "Unprocessable Entity",
        500 => "Internal Server Error",
        502 => "Bad Gateway",
        503 => "Service Unavailable",
        _ => "Status",
    }
}

fn response_bytes(status: u16, body: &[u8]) -> Vec<u8> {
    let mut out = format!(
        "HTTP/1.1 {status} {}\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n",
        reason(status),
        body.len()
    )
    .into_bytes();
    out.extend_from_slice(body);
    out
}

fn request_bytes(authority: &str, method: &str, path: &str, body: &[u8], close: bool) -> Vec<u8> {
    let mut out = format!(
        "{method} {path} HTTP/1.1\r\nhost: {authority}\r\ncontent-type: application/json\r\ncontent-length: {}\r\n{}\r\n",
        body.len(),
        if close { "connection: close\r\n" } else { "" }
    )
    .into_bytes();
    out.extend_from_slice(body);
    out
}

fn authority_of(url: &str) -> Result<String, ServiceError> {
    let rest = url.strip_prefix("http://").ok_or_else(|| {
        ServiceError::Config(format!("next hop `{url}` must be an http:// URL"))
    })?;
    let authority = rest.split('/').next().unwrap_or_default();
    if authority.is_empty() {
        return Err(ServiceError::Config(format!("next hop `{url}` has no host")));
    }
    Ok(authority.to_owned())
}

fn connect(authority: &str, timeout: Option<Duration>) -> io::Result<TcpStream> {
    let mut last = io::Error::new(io::ErrorKind::NotFound, format!("{authority} did not resolve"));
    for addr in authority.to_socket_addrs()? {
        let attempt = match timeout {
            Some(t) => TcpStream::connect_timeout(&addr, t),
            None => TcpStream::connect(addr),
        };
        match attempt {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) => last = e,
        }
    }
    Err(last)
}

fn probe_health(authority: &str) -> Result<Health, String> {
    let stream = connect(authority, Some(PROBE_TIMEOUT)).map_err(|e| e.to_string())?;
    stream
        .set_read_timeout(Some(PROBE_TIMEOUT))
        .map_err(|e| e.to_string())?;
    let mut framed = Framed::new(stream);
    framed
        .stream
        .write_all(&request_bytes(authority, "GET", "/healthz", b"", true))
        .map_err(|e| e.to_string())?;
    let (_, body, _) = framed.read(parse_response).map_err(|e| e.to_string())?;
    serde_json::from_slice::<Health>(&body).map_err(|e| format!("bad health payload: {e}"))
}

struct Downstream {
    url: String,
    authority: String,
    /// `/relay` when the next hop is itself a relay, `/solve` otherwise.
    endpoint: &'static str,
    worker_id: String,
    conn: Mutex<Option<Framed>>,
}

impl Downstream {
    /// Polls the next hop until it reports ready, then learns its mode and
    /// worker id.
    fn connect_ready(url: &str, timeout: Duration) -> Result<Self, ServiceError> {
        let authority = authority_of(url)?;
        let deadline = Instant::now() + timeout;
        let mut last;
        loop {
            match probe_health(&authority) {
                Ok(h) if h.ready => {
                    return Ok(Self {
                        url: url.trim_end_matches('/').to_owned(),
                        authority,
                        endpoint: if h.mode == "relay" { "/relay" } else { "/solve" },
                        worker_id: h.worker_id,
                        conn: Mutex::new(None),
                    });
                }
                Ok(h) => last = format!("{} not ready", h.worker_id),
                Err(e) => last = e,
            }
            if Instant::now() >= deadline {
                return Err(ServiceError::NextHopUnreachable {
                    next_hop: url.to_owned(),
                    downstream: "unknown".into(),
                    reason: last,
                });
            }
            std::thread::sleep(Duration::from_millis(50));
        }
    }

    fn unreachable(&self, reason: impl Into<String>) -> ServiceError {
        ServiceError::NextHopUnreachable {
            next_hop: self.url.clone(),
            downstream: self.worker_id.clone(),
            reason: reason.into(),
        }
    }

    fn exchange(&self, framed: &mut Framed, body: &[u8]) -> Result<(u16, Vec<u8>), FrameError> {
        framed
            .stream
            .write_all(&request_bytes(&self.authority, "POST", self.endpoint, body, false))?;
        let (status, body, _) = framed.read(parse_response)?;
        Ok((status, body))
    }

    /// Sends `body` unchanged. A failure on a reused connection is retried
    /// once on a fresh one.
    fn forward(&self, body: &[u8]) -> Result<(u16, Vec<u8>), ServiceError> {
        let mut conn = self.conn.lock().unwrap_or_else(|e| e.into_inner());
        let reused = conn.is_some();
        if conn.is_none() {
            *conn = Some(Framed::new(
                connect(&self.authority, Some(PROBE_TIMEOUT)).map_err(|e| self.unreachable(e.to_string()))?,
            ));
        }
        let framed = conn.as_mut().expect("connection was just ensured");
        match self.exchange(framed, body) {
            Ok(reply) => Ok(reply),
            Err(e) if reused => {
                log::debug!("retrying on a fresh connection after: {e}");
                let mut fresh = Framed::new(
                    connect(&self.authority, Some(PROBE_TIMEOUT))
                        .map_err(|e| self.unreachable(e.to_string()))?,
                );
                match self.exchange(&mut fresh, body) {
                    Ok(reply) => {
                        *conn = Some(fresh);
                        Ok(reply)
                    }
                    Err(e) => {
                        *conn = None;
                        Err(self.unreachable(e.to_string()))
                    }
                }
            }
            Err(e) => {
                *conn = None;
                Err(self.unreachable(e.to_string()))
            }
        }
    }
}

struct RelayState {
    worker_id: String,
    systems: Vec<String>,
    downstream: Downstream,
    lane: Mutex<()>,
    stopping: AtomicBool,
    open: Mutex<Vec<TcpStream>>,
}

impl RelayState {
    fn error(&self, err: ServiceError) -> (u16, Vec<u8>) {
        let body = err.to_body(&self.worker_id);
        if err.status() >= 500 {
            log::warn!("{}: {body}", self.worker_id);
        }
        (
            err.status(),
            serde_json::to_vec(&body).expect("error body serializes"),
        )
    }

    fn relay(&self, body: &[u8]) -> (u16, Vec<u8>) {
        let Ok(_lane) = self.lane.try_lock() else {
            return self.error(ServiceError::Busy);
        };
        let (status, bytes) = match self.downstream.forward(body) {
            Ok(reply) => reply,
            Err(e) => return self.error(e),
        };
        if status == 200 {
            return match decode_response(&bytes) {
                Ok(mut resp) => {
                    resp.relay_path.insert(0, self.worker_id.clone());
                    match encode_response(&resp) {
                        Ok(out) => (200, out),
                        Err(e) => self.error(e.into()),
                    }
                }
                Err(e) => self.error(
                    self.downstream
                        .unreachable(format!("unparseable response: {e}")),
                ),
            };
        }
        let mut err: ErrorBody = serde_json::from_slice(&bytes).unwrap_or_else(|_| ErrorBody {
            kind: "downstream".into(),
            error: String::from_utf8_lossy(&bytes).into_owned(),
            worker_id: self.downstream.worker_id.clone(),
            iteration: None,
            hops: Vec::new(),
        });
        err.hops.insert(0, self.worker_id.clone());
        (
            status,
            serde_json::to_vec(&err).expect("error body serializes"),
        )
    }

    fn health(&self) -> (u16, Vec<u8>) {
        let mut health = Health {
            ready: true,
            mode: "relay".into(),
            worker_id: self.worker_id.clone(),
            systems: self.systems.clone(),
            next_hop: Some(self.downstream.url.clone()),
            detail: None,
        };
        match probe_health(&self.downstream.authority) {
            Ok(h) if h.ready => {}
            Ok(h) => {
                health.ready = false;
                health.detail = Some(format!("next hop {} not ready", h.worker_id));
            }
            Err(e) => {
                health.ready = false;
                health.detail = Some(self.downstream.unreachable(e).to_string());
            }
        }
        let status = if health.ready { 200 } else { 503 };
        (status, serde_json::to_vec(&health).expect("health serializes"))
    }

    fn route(&self, method: &str, path: &str, body: &[u8]) -> (u16, Vec<u8>) {
        let path = path.split('?').next().unwrap_or_default();
        match (method, path) {
            ("POST", "/relay") => self.relay(body),
            ("POST", "/solve") => self.error(ServiceError::WrongMode("relay")),
            ("GET", "/healthz") => self.health(),
            (_, "/relay" | "/solve" | "/healthz") => (405, Vec::new()),
            _ => (404, Vec::new()),
        }
    }

    fn serve_connection(&self, stream: TcpStream) {
        let _ = stream.set_nodelay(true);
        let mut framed = Framed::new(stream);
        loop {
            let ((method, path), body, close) = match framed.read(parse_request) {
                Ok(msg) => msg,
                Err(FrameError::Bad(reason)) => {
                    let (status, out) = self.error(ServiceError::BadRequest(
                        crate::wire::WireError::Malformed(reason),
                    ));
                    let _ = framed.stream.write_all(&response_bytes(status, &out));
                    return;
                }
                Err(_) => return,
            };
            let (status, out) = self.route(&method, &path, &body);
            if framed.stream.write_all(&response_bytes(status, &out)).is_err() || close {
                return;
            }
        }
    }
}

/// A bound relay that has not started accepting.
pub(super) struct RelayServer {
    listener: TcpListener,
    state: Arc<RelayState>,
}

impl RelayServer {
    /// Binds, then waits for the next hop to report ready.
    pub(super) fn bind(config: &ServiceConfig, next_hop: &str) -> Result<Self, ServiceError> {
        let listener = TcpListener::bind(config.listen)?;
        let downstream = Downstream::connect_ready(next_hop, config.startup_timeout)?;
        Ok(Self {
            listener,
            state: Arc::new(RelayState {
                worker_id: config.worker_id.clone(),
                systems: config.registry.ids(),
                downstream,
                lane: Mutex::new(()),
                stopping: AtomicBool::new(false),
                open: Mutex::new(Vec::new()),
            }),
        })
    }

    pub(super) fn local_addr(&self) -> SocketAddr {
        self.listener
            .local_addr()
            .expect("bound listener has an address")
    }

    /// Accepts on a background thread until the returned stopper is used.
    pub(super) fn start(self) -> io::Result<RelayStopper> {
        let addr = self.local_addr();
        let state = Arc::clone(&self.state);
        let listener = self.listener;
        let accept = std::thread::Builder::new()
            .name(format!("relay-{}", state.worker_id))
            .spawn(move || {
                for stream in listener.incoming() {
                    if state.stopping.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    if let Ok(clone) = stream.try_clone() {
                        state.open.lock().unwrap_or_else(|e| e.into_inner()).push(clone);
                    }
                    let state = Arc::clone(&state);
                    let _ = std::thread::Builder::new()
                        .name("relay-conn".into())
                        .spawn(move || state.serve_connection(stream));
                }
            })?;
        Ok(RelayStopper {
            addr,
            state: self.state,
            accept: Some(accept),
        })
    }
}

pub(super) struct RelayStopper {
    addr: SocketAddr,
    state: Arc<RelayState>,
    accept: Option<JoinHandle<()>>,
}

impl RelayStopper {
    /// Stops accepting and closes open connections.
    pub(super) fn stop(&mut self) {
        if self.state.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        // wake the accept loop so it sees the flag
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
        for s in self.state.open.lock().unwrap_or_else(|e| e.into_inner()).drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}
