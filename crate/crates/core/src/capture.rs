//! Framed stream captures and the transparent TCP proxy tap that writes them.
//!
//! File layout: the magic bytes `SPC1`, then frames of
//!
//! ```text
//! direction: u8 | length: u32 big-endian | payload: [u8; length]
//! ```
//!
//! Directions are `C` (0x43, client to server), `S` (0x53, server to
//! client) and `M` (0x4d, metadata). A metadata frame carries the UTF-8 text
//! `conn=<id> client=<host:port> ts=<unix millis>` and attributes the data
//! frames that follow it to that connection. A capture without metadata
//! frames is read as a single connection from an unknown client.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"SPC1";

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("cannot open capture {path}: {source}")]
    CaptureOpen { path: String, source: io::Error },
    #[error("not a capture file (bad magic)")]
    BadMagic,
    #[error("capture write failed: {0}")]
    Write(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    ClientToServer,
    ServerToClient,
    Meta,
}

impl Direction {
    pub fn byte(self) -> u8 {
        match self {
            Direction::ClientToServer => b'C',
            Direction::ServerToClient => b'S',
            Direction::Meta => b'M',
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            b'C' => Some(Direction::ClientToServer),
            b'S' => Some(Direction::ServerToClient),
            b'M' => Some(Direction::Meta),
            _ => None,
        }
    }
}

/// Identity of one proxied connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnMeta {
    pub id: u64,
    pub client: String,
    pub ts_ms: i64,
}

impl ConnMeta {
    pub const UNKNOWN_CLIENT: &'static str = "unknown";

    pub fn unknown() -> Self {
        ConnMeta {
            id: 0,
            client: Self::UNKNOWN_CLIENT.to_string(),
            ts_ms: 0,
        }
    }

    pub fn encode(&self) -> String {
        format!("conn={} client={} ts={}", self.id, self.client, self.ts_ms)
    }

    pub fn decode(text: &str) -> Option<Self> {
        let mut id = None;
        let mut client = None;
        let mut ts = None;
        for field in text.split_whitespace() {
            match field.split_once('=')? {
                ("conn", v) => id = v.parse().ok(),
                ("client", v) => client = Some(v.to_string()),
                ("ts", v) => ts = v.parse().ok(),
                _ => {}
            }
        }
        Some(ConnMeta {
            id: id?,
            client: client?,
            ts_ms: ts?,
        })
    }
}

/// Frame writer. Emits a metadata frame whenever the connection or its
/// timestamp changes.
pub struct CaptureWriter<W: Write> {
    sink: W,
    current: Option<ConnMeta>,
    written: u64,
}

impl<W: Write> CaptureWriter<W> {
    pub fn new(mut sink: W) -> io::Result<Self> {
        sink.write_all(MAGIC)?;
        Ok(CaptureWriter {
            sink,
            current: None,
            written: MAGIC.len() as u64,
        })
    }

    pub fn write_frame(&mut self, direction: Direction, payload: &[u8]) -> io::Result<()> {
        let len = u32::try_from(payload.len())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame larger than 4 GiB"))?;
        self.sink.write_all(&[direction.byte()])?;
        self.sink.write_all(&len.to_be_bytes())?;
        self.sink.write_all(payload)?;
        self.written += 5 + payload.len() as u64;
        Ok(())
    }

    /// Writes a data frame attributed to `conn`.
    pub fn write_data(&mut self, conn: &ConnMeta, direction: Direction, payload: &[u8]) -> io::Result<()> {
        if self.current.as_ref() != Some(conn) {
            self.write_frame(Direction::Meta, conn.encode().as_bytes())?;
            self.current = Some(conn.clone());
        }
        self.write_frame(direction, payload)
    }

    pub fn bytes_written(&self) -> u64 {
        self.written
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.sink.flush()
    }

    pub fn get_ref(&self) -> &W {
        &self.sink
    }

    pub fn into_inner(self) -> W {
        self.sink
    }
}

/// A data frame attributed to a connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    /// File offset of the frame's direction byte.
    pub offset: u64,
    pub direction: Direction,
    /// Index into [`Capture::connections`].
    pub conn: usize,
    /// Timestamp of the metadata frame in force (0 when there is none).
    pub ts_ms: i64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Capture {
    /// Connection identities; entry 0 covers frames before any metadata.
    pub connections: Vec<ConnMeta>,
    /// Client and server data frames in file order.
    pub frames: Vec<Frame>,
    /// Frames skipped as malformed (unknown direction, truncation, bad metadata).
    pub warnings: u64,
}

impl Capture {
    pub fn parse(bytes: &[u8]) -> Result<Self, CaptureError> {
        let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or(CaptureError::BadMagic)?;
        let mut capture = Capture {
            connections: vec![ConnMeta::unknown()],
            frames: Vec::new(),
            warnings: 0,
        };
        let mut index: HashMap<(u64, String), usize> = HashMap::new();
        let mut current = 0usize;
        let mut current_ts = 0i64;
        let mut pos = 0usize;
        while pos < rest.len() {
            if rest.len() - pos < 5 {
                capture.warnings += 1;
                break;
            }
            let dir = rest[pos];
            let len = u32::from_be_bytes(rest[pos + 1..pos + 5].try_into().unwrap()) as usize;
            let start = pos + 5;
            if rest.len() - start < len {
                capture.warnings += 1;
                break;
            }
            let offset = (MAGIC.len() + pos) as u64;
            let payload = &rest[start..start + len];
            match Direction::from_byte(dir) {
                Some(Direction::Meta) => {
                    match std::str::from_utf8(payload).ok().and_then(ConnMeta::decode) {
                        Some(meta) => {
                            current_ts = meta.ts_ms;
                            let next = capture.connections.len();
                            current = *index.entry((meta.id, meta.client.clone())).or_insert(next);
                            if current == next {
                                capture.connections.push(meta);
                            }
                        }
                        None => capture.warnings += 1,
                    }
                }
                Some(direction) => capture.frames.push(Frame {
                    offset,
                    direction,
                    conn: current,
                    ts_ms: current_ts,
                    payload: payload.to_vec(),
                }),
                None => capture.warnings += 1,
            }
            pos = start + len;
        }
        Ok(capture)
    }

    pub fn read(path: &Path) -> Result<Self, CaptureError> {
        let bytes = fs::read(path).map_err(|source| CaptureError::CaptureOpen {
            path: path.display().to_string(),
            source,
        })?;
        Capture::parse(&bytes)
    }

    pub fn connection(&self, frame: &Frame) -> &ConnMeta {
        &self.connections[frame.conn]
    }
}

/// Receives every chunk the proxy tap forwards.
pub trait FrameSink: Send + Sync {
    fn record(&self, conn: &ConnMeta, direction: Direction, payload: &[u8]);
}

impl<F> FrameSink for F
where
    F: Fn(&ConnMeta, Direction, &[u8]) + Send + Sync,
{
    fn record(&self, conn: &ConnMeta, direction: Direction, payload: &[u8]) {
        self(conn, direction, payload)
    }
}

impl FrameSink for Vec<Arc<dyn FrameSink>> {
    fn record(&self, conn: &ConnMeta, direction: Direction, payload: &[u8]) {
        for sink in self {
            sink.record(conn, direction, payload);
        }
    }
}

/// Serializes recorded chunks into a capture stream.
pub struct CaptureRecorder<W: Write + Send> {
    writer: Mutex<CaptureWriter<W>>,
    errors: AtomicU64,
}

impl<W: Write + Send> CaptureRecorder<W> {
    pub fn new(sink: W) -> io::Result<Self> {
        Ok(CaptureRecorder {
            writer: Mutex::new(CaptureWriter::new(sink)?),
            errors: AtomicU64::new(0),
        })
    }

    pub fn write_errors(&self) -> u64 {
        self.errors.load(Ordering::Relaxed)
    }

    pub fn flush(&self) -> io::Result<()> {
        self.writer.lock().unwrap().flush()
    }

    pub fn into_inner(self) -> W {
        self.writer.into_inner().unwrap().into_inner()
    }
}

impl CaptureRecorder<Vec<u8>> {
    /// Copy of everything recorded so far.
    pub fn snapshot(&self) -> Vec<u8> {
        self.writer.lock().unwrap().get_ref().clone()
    }
}

impl<W: Write + Send> FrameSink for CaptureRecorder<W> {
    fn record(&self, conn: &ConnMeta, direction: Direction, payload: &[u8]) {
        let mut writer = self.writer.lock().unwrap();
        if writer.write_data(conn, direction, payload).is_err() {
            self.errors.fetch_add(1, Ordering::Relaxed);
        }
    }
}

/// Inline TCP relay that copies every forwarded chunk to a [`FrameSink`].
///
/// Chunks are recorded before they are forwarded, so once a client has seen
/// a response the sink has seen it too.
pub struct ProxyTap {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accepted: Arc<AtomicU64>,
    thread: Option<JoinHandle<()>>,
}

impl ProxyTap {
    pub fn start(listen: &str, upstream: SocketAddr, sink: Arc<dyn FrameSink>) -> io::Result<Self> {
        let listener = TcpListener::bind(listen)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let accepted = Arc::new(AtomicU64::new(0));
        let thread = {
            let stop = Arc::clone(&stop);
            let accepted = Arc::clone(&accepted);
            thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(client) = conn else { continue };
                    let id = accepted.fetch_add(1, Ordering::SeqCst) + 1;
                    let sink = Arc::clone(&sink);
                    thread::spawn(move || relay(id, client, upstream, sink));
                }
            })
        };
        Ok(ProxyTap {
            addr,
            stop,
            accepted,
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn connections(&self) -> u64 {
        self.accepted.load(Ordering::SeqCst)
    }

    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    /// Blocks until the listener exits.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    fn stop_inner(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ProxyTap {
    fn drop(&mut self) {
        self.stop_inner();
    }
}

fn relay(id: u64, client: TcpStream, upstream: SocketAddr, sink: Arc<dyn FrameSink>) {
    let Ok(server) = TcpStream::connect_timeout(&upstream, Duration::from_secs(10)) else {
        let _ = client.shutdown(Shutdown::Both);
        return;
    };
    let peer = client
        .peer_addr()
        .map(|a| a.to_string())
        .unwrap_or_else(|_| ConnMeta::UNKNOWN_CLIENT.to_string());
    let (Ok(client_rx), Ok(server_rx)) = (client.try_clone(), server.try_clone()) else {
        return;
    };
    let up = {
        let sink = Arc::clone(&sink);
        let peer = peer.clone();
        thread::spawn(move || pump(id, &peer, client_rx, server, Direction::ClientToServer, &*sink))
    };
    pump(id, &peer, server_rx, client, Direction::ServerToClient, &*sink);
    let _ = up.join();
}

fn pump(id: u64, peer: &str, mut from: TcpStream, mut to: TcpStream, direction: Direction, sink: &dyn FrameSink) {
    let mut buf = [0u8; 16 * 1024];
    loop {
        match from.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => {
                let meta = ConnMeta {
                    id,
                    client: peer.to_string(),
                    ts_ms: chrono::Utc::now().timestamp_millis(),
                };
                sink.record(&meta, direction, &buf[..n]);
                if to.write_all(&buf[..n]).is_err() {
                    let _ = from.shutdown(Shutdown::Read);
                    break;
                }
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(_) => break,
        }
    }
    let _ = to.shutdown(Shutdown::Write);
}

/// Groups a capture's frames per connection and direction, preserving order.
pub fn streams(capture: &Capture) -> HashMap<(usize, Direction), Vec<&Frame>> {
    let mut map: HashMap<(usize, Direction), Vec<&Frame>> = HashMap::new();
    for frame in &capture.frames {
        map.entry((frame.conn, frame.direction)).or_default().push(frame);
    }
    map
}
