//! Minimal HTTP/1.1 message handling over raw byte streams.
//!
//! The fuzzer has to put bytes on the wire that an ordinary client library
//! would refuse to send, and the capture analysers have to make sense of
//! whatever bytes went past, so this module works directly on buffers.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

/// Upper bound on the size of a request or response head.
pub const MAX_HEAD: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StartLine {
    Request {
        method: String,
        target: String,
        version: String,
    },
    Response {
        version: String,
        status: u16,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub start: StartLine,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl Message {
    pub fn header(&self, name: &str) -> Option<&str> {
        header_value(&self.headers, name)
    }

    pub fn headers_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.headers
            .iter()
            .filter(move |(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn is_request(&self) -> bool {
        matches!(self.start, StartLine::Request { .. })
    }

    pub fn method(&self) -> Option<&str> {
        match &self.start {
            StartLine::Request { method, .. } => Some(method),
            StartLine::Response { .. } => None,
        }
    }

    pub fn target(&self) -> Option<&str> {
        match &self.start {
            StartLine::Request { target, .. } => Some(target),
            StartLine::Response { .. } => None,
        }
    }

    pub fn status(&self) -> Option<u16> {
        match &self.start {
            StartLine::Response { status, .. } => Some(*status),
            StartLine::Request { .. } => None,
        }
    }
}

pub fn header_value<'a>(headers: &'a [(String, String)], name: &str) -> Option<&'a str> {
    headers
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, v)| v.as_str())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadError {
    /// The buffer does not start with an HTTP start line.
    NotHttp,
    /// A start line was recognised but the head is malformed.
    Malformed(&'static str),
    TooLarge,
}

/// Locates the end of a message head. Returns the head length and the
/// offset where the body starts.
pub fn find_head_end(buf: &[u8]) -> Option<(usize, usize)> {
    let crlf = find(buf, b"\r\n\r\n").map(|i| (i, i + 4));
    let lf = find(buf, b"\n\n").map(|i| (i, i + 2));
    match (crlf, lf) {
        (Some(a), Some(b)) => Some(if a.0 <= b.0 { a } else { b }),
        (a, b) => a.or(b),
    }
}

pub(crate) fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Quick check on whether `line` looks like an HTTP start line.
pub fn looks_like_start_line(line: &[u8]) -> bool {
    if line.starts_with(b"HTTP/") {
        return true;
    }
    let Some(sp) = line.iter().position(|&b| b == b' ') else {
        return false;
    };
    sp > 0
        && line[..sp].iter().all(|b| b.is_ascii_uppercase() || *b == b'-')
        && find(line, b" HTTP/").is_some()
}

/// Parses a complete head (start line plus headers, without the blank line).
pub fn parse_head(head: &[u8]) -> Result<(StartLine, Vec<(String, String)>), HeadError> {
    let text = String::from_utf8_lossy(head);
    let mut lines = text.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l));
    let first = lines.next().unwrap_or_default();
    if !looks_like_start_line(first.as_bytes()) {
        return Err(HeadError::NotHttp);
    }
    let start = if let Some(rest) = first.strip_prefix("HTTP/") {
        let mut parts = rest.splitn(3, ' ');
        let version = format!("HTTP/{}", parts.next().unwrap_or_default());
        let status = parts
            .next()
            .and_then(|s| s.parse::<u16>().ok())
            .filter(|s| (100..=599).contains(s))
            .ok_or(HeadError::Malformed("bad status code"))?;
        StartLine::Response {
            version,
            status,
            reason: parts.next().unwrap_or_default().to_string(),
        }
    } else {
        let mut parts = first.splitn(2, ' ');
        let method = parts.next().unwrap_or_default().to_string();
        let rest = parts.next().unwrap_or_default();
        let (target, version) = rest
            .rsplit_once(' ')
            .filter(|(_, v)| v.starts_with("HTTP/"))
            .ok_or(HeadError::Malformed("bad request line"))?;
        StartLine::Request {
            method,
            target: target.to_string(),
            version: version.to_string(),
        }
    };
    let mut headers = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let (name, value) = line
            .split_once(':')
            .ok_or(HeadError::Malformed("header without colon"))?;
        headers.push((name.trim().to_string(), value.trim().to_string()));
    }
    Ok((start, headers))
}

/// Incremental parser for one direction of one connection.
///
/// Bytes that cannot be the start of an HTTP message are discarded a line at
/// a time until a plausible start line turns up.
#[derive(Debug, Default)]
pub struct StreamParser {
    buf: Vec<u8>,
    consumed: u64,
    skipped: u64,
}

/// A message along with the stream offset of its first byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Located {
    pub offset: u64,
    pub message: Message,
}

impl StreamParser {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes thrown away while resynchronising.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// Pops the next complete message. A response without `Content-Length`
    /// only completes on [`StreamParser::finish`].
    pub fn next_message(&mut self) -> Option<Located> {
        loop {
            if self.buf.is_empty() {
                return None;
            }
            let line_end = self.buf.iter().position(|&b| b == b'\n');
            let first_line = match line_end {
                Some(end) => &self.buf[..end],
                None if self.buf.len() > MAX_HEAD => {
                    self.drop_front(self.buf.len());
                    return None;
                }
                None => return None,
            };
            let first_line = first_line.strip_suffix(b"\r").unwrap_or(first_line);
            if !looks_like_start_line(first_line) {
                let end = line_end.unwrap_or(0) + 1;
                self.skipped += end as u64;
                self.drop_front(end);
                continue;
            }
            let Some((head_len, body_start)) = find_head_end(&self.buf) else {
                if self.buf.len() > MAX_HEAD {
                    let end = line_end.unwrap_or(0) + 1;
                    self.skipped += end as u64;
                    self.drop_front(end);
                    continue;
                }
                return None;
            };
            let (start, headers) = match parse_head(&self.buf[..head_len]) {
                Ok(parsed) => parsed,
                Err(_) => {
                    let end = line_end.unwrap_or(0) + 1;
                    self.skipped += end as u64;
                    self.drop_front(end);
                    continue;
                }
            };
            let body_len = match header_value(&headers, "content-length").map(|v| v.parse::<usize>()) {
                Some(Ok(n)) => n,
                Some(Err(_)) => 0,
                None if matches!(start, StartLine::Response { .. }) => return None,
                None => 0,
            };
            if self.buf.len() < body_start + body_len {
                return None;
            }
            let body = self.buf[body_start..body_start + body_len].to_vec();
            let offset = self.consumed;
            self.drop_front(body_start + body_len);
            return Some(Located {
                offset,
                message: Message { start, headers, body },
            });
        }
    }

    /// Flushes at end of stream: a pending response head without
    /// `Content-Length` takes the remaining bytes as its body.
    pub fn finish(&mut self) -> Vec<Located> {
        let mut out = Vec::new();
        while let Some(m) = self.next_message() {
            out.push(m);
        }
        if let Some((head_len, body_start)) = find_head_end(&self.buf) {
            if let Ok((start, headers)) = parse_head(&self.buf[..head_len]) {
                let body = self.buf[body_start..].to_vec();
                out.push(Located {
                    offset: self.consumed,
                    message: Message { start, headers, body },
                });
                let n = self.buf.len();
                self.drop_front(n);
            }
        }
        self.skipped += self.buf.len() as u64;
        let n = self.buf.len();
        self.drop_front(n);
        out
    }

    fn drop_front(&mut self, n: usize) {
        self.buf.drain(..n);
        self.consumed += n as u64;
    }
}

/// Builds a request with `Connection: close` and, when a body is present,
/// a matching `Content-Length`.
pub fn build_request(method: &str, target: &str, headers: &[(&str, &str)], body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(128 + target.len() + body.len());
    out.extend_from_slice(format!("{method} {target} HTTP/1.1\r\n").as_bytes());
    for (name, value) in headers {
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(b": ");
        out.extend_from_slice(value.as_bytes());
        out.extend_from_slice(b"\r\n");
    }
    if !headers.iter().any(|(n, _)| n.eq_ignore_ascii_case("connection")) {
        out.extend_from_slice(b"Connection: close\r\n");
    }
    if !body.is_empty() || method == "POST" {
        out.extend_from_slice(format!("Content-Length: {}\r\n", body.len()).as_bytes());
    }
    out.extend_from_slice(b"\r\n");
    out.extend_from_slice(body);
    out
}

/// How a single request/response round trip ended.
#[derive(Debug)]
pub enum RoundTrip {
    Response { message: Message, raw: Vec<u8> },
    Timeout,
    ConnectionReset,
    Malformed { raw: Vec<u8> },
}

pub fn resolve(target: &str) -> io::Result<SocketAddr> {
    target
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("{target} did not resolve")))
}

/// Sends `request` on a fresh connection and reads until the server closes.
///
/// Connect failures are returned as errors; everything after a successful
/// connect is folded into a [`RoundTrip`] outcome.
pub fn round_trip(addr: SocketAddr, request: &[u8], timeout: Duration) -> io::Result<RoundTrip> {
    let mut stream = TcpStream::connect_timeout(&addr, timeout)?;
    let deadline = Instant::now() + timeout;
    stream.set_write_timeout(Some(timeout))?;
    if let Err(e) = stream.write_all(request) {
        return Ok(classify_io(&e));
    }
    let mut raw = Vec::new();
    let mut chunk = [0u8; 8192];
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Ok(RoundTrip::Timeout);
        }
        stream.set_read_timeout(Some(left))?;
        match stream.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => raw.extend_from_slice(&chunk[..n]),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) if raw.is_empty() || is_timeout(&e) => return Ok(classify_io(&e)),
            // reset after the server already answered: keep what arrived
            Err(_) => break,
        }
    }
    if raw.is_empty() {
        return Ok(RoundTrip::ConnectionReset);
    }
    let mut parser = StreamParser::new();
    parser.push(&raw);
    match parser.finish().into_iter().next() {
        Some(Located { offset: 0, message }) if !message.is_request() => Ok(RoundTrip::Response { message, raw }),
        _ => Ok(RoundTrip::Malformed { raw }),
    }
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}

fn classify_io(e: &io::Error) -> RoundTrip {
    if is_timeout(e) {
        RoundTrip::Timeout
    } else {
        RoundTrip::ConnectionReset
    }
}
