//! Mock cloud-dashboard service used as the target for every pipeline.
//!
//! Cleartext HTTP/1.1, one request per connection. Endpoints:
//!
//! | method   | path                  | behaviour                                   |
//! |----------|-----------------------|---------------------------------------------|
//! | `GET`    | `/`                   | index page                                  |
//! | `POST`   | `/login`              | form `username`, `password`; sets session   |
//! | `POST`   | `/logout`             | ends the session named by the cookie        |
//! | `GET`    | `/restricted/<page>`  | page body with the user's marker string     |
//! | `POST`   | `/types`              | form `name`; creates a volume type          |
//! | `GET`    | `/types`              | JSON array of volume-type names             |
//! | `DELETE` | `/types/<name>`       | deletes a volume type (255-char names stay) |
//!
//! Fault rules are checked first, then the request-target length limit,
//! then routing. In `always_ok` mode every well-formed request that no fault
//! rule matches gets a plain 200.

mod fixture;
mod state;

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use percent_encoding::percent_decode_str;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use fixture::{seed_clean_tree, seed_fixture, FIXTURE_PATHS};
pub use state::{
    CreateOutcome, DeleteOutcome, SessionEntry, SessionTable, VolumeTypeStore, UNDELETABLE_NAME_LEN,
};

use crate::http::{self, find_head_end, parse_head, Message, StartLine, MAX_HEAD};

pub const DEFAULT_COOKIE_NAME: &str = "sessionid";
pub const DEFAULT_URI_LIMIT: usize = 8192;
const MAX_BODY: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum VictimError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: io::Error },
    #[error("invalid fault rule {0:?}; expected <element>:<threshold>:<status>")]
    BadFaultRule(String),
}

/// Requests whose `element` is longer than `threshold` bytes get `status`.
///
/// `element` names either a request method (the request-target length is
/// compared) or a header (its value length is compared).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultRule {
    pub element: String,
    pub threshold: usize,
    pub status: u16,
}

impl FaultRule {
    pub fn new(element: impl Into<String>, threshold: usize, status: u16) -> Self {
        FaultRule {
            element: element.into(),
            threshold,
            status,
        }
    }

    fn matches(&self, method: &str, target: &str, headers: &[(String, String)]) -> bool {
        if is_method_name(&self.element) {
            return method.eq_ignore_ascii_case(&self.element) && target.len() > self.threshold;
        }
        headers
            .iter()
            .any(|(n, v)| n.eq_ignore_ascii_case(&self.element) && v.len() > self.threshold)
    }
}

fn is_method_name(s: &str) -> bool {
    matches!(
        s.to_ascii_uppercase().as_str(),
        "GET" | "HEAD" | "POST" | "PUT" | "DELETE" | "OPTIONS" | "TRACE" | "PATCH"
    )
}

impl FromStr for FaultRule {
    type Err = VictimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || VictimError::BadFaultRule(s.to_string());
        let mut parts = s.rsplitn(3, ':');
        let status = parts.next().and_then(|p| p.parse::<u16>().ok()).ok_or_else(bad)?;
        let threshold = parts.next().and_then(|p| p.parse::<usize>().ok()).ok_or_else(bad)?;
        let element = parts.next().filter(|e| !e.is_empty()).ok_or_else(bad)?;
        if !(100..=599).contains(&status) {
            return Err(bad());
        }
        Ok(FaultRule::new(element, threshold, status))
    }
}

/// A restricted page: `/restricted/<slug>` renders `marker` for its owner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Page {
    pub slug: String,
    pub marker: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserAccount {
    pub username: String,
    pub password: String,
    pub pages: Vec<Page>,
}

const PAGE_TITLES: [(&str, &str); 4] = [
    ("overview", "Project Overview"),
    ("images", "Images & Snapshots"),
    ("instances", "Instances"),
    ("volumes", "Volumes"),
];

impl UserAccount {
    /// An account with the standard page set, markers `"<Title> [<user>]"`.
    pub fn with_standard_pages(username: &str, password: &str) -> Self {
        UserAccount {
            username: username.to_string(),
            password: password.to_string(),
            pages: PAGE_TITLES
                .iter()
                .map(|(slug, title)| Page {
                    slug: slug.to_string(),
                    marker: format!("{title} [{username}]"),
                })
                .collect(),
        }
    }
}

pub fn default_users() -> Vec<UserAccount> {
    vec![
        UserAccount::with_standard_pages("Test_User_1", "password1"),
        UserAccount::with_standard_pages("admin", "adminpassword"),
    ]
}

#[derive(Debug, Clone)]
pub struct VictimConfig {
    pub listen: String,
    pub session_cookie_name: String,
    pub rotate_on_logout: bool,
    pub uri_length_limit: usize,
    pub fault_rules: Vec<FaultRule>,
    pub user_table: Vec<UserAccount>,
    pub seed: u64,
    /// Replicate the undeletable 255-character volume type.
    pub type_delete_bug: bool,
    pub always_ok: bool,
    /// Probability of dropping a connection after reading the request.
    pub drop_probability: f64,
}

impl Default for VictimConfig {
    fn default() -> Self {
        VictimConfig {
            listen: "127.0.0.1:0".to_string(),
            session_cookie_name: DEFAULT_COOKIE_NAME.to_string(),
            rotate_on_logout: true,
            uri_length_limit: DEFAULT_URI_LIMIT,
            fault_rules: Vec::new(),
            user_table: default_users(),
            seed: 0,
            type_delete_bug: true,
            always_ok: false,
            drop_probability: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl Response {
    fn new(status: u16, body: impl Into<Vec<u8>>) -> Self {
        Response {
            status,
            headers: vec![("Content-Type".into(), "text/plain".into())],
            body: body.into(),
        }
    }

    fn html(status: u16, body: String) -> Self {
        Response {
            status,
            headers: vec![("Content-Type".into(), "text/html".into())],
            body: body.into_bytes(),
        }
    }

    fn header(mut self, name: &str, value: String) -> Self {
        self.headers.push((name.to_string(), value));
        self
    }

    /// Serializes with `Content-Length` and `Connection: close`; HEAD
    /// responses omit the body.
    pub fn to_bytes(&self, head_only: bool) -> Vec<u8> {
        let mut out = format!("HTTP/1.1 {} {}\r\n", self.status, reason_phrase(self.status)).into_bytes();
        for (name, value) in &self.headers {
            out.extend_from_slice(format!("{name}: {value}\r\n").as_bytes());
        }
        out.extend_from_slice(format!("Content-Length: {}\r\nConnection: close\r\n\r\n", self.body.len()).as_bytes());
        if !head_only {
            out.extend_from_slice(&self.body);
        }
        out
    }
}

pub fn reason_phrase(status: u16) -> &'static str {
    match status {
        200 => "OK",
        201 => "Created",
        400 => "Bad Request",
        401 => "Unauthorized",
        403 => "Forbidden",
        404 => "Not Found",
        405 => "Method Not Allowed",
        409 => "Conflict",
        413 => "Payload Too Large",
        414 => "Request-URI Too Long",
        431 => "Request Header Fields Too Large",
        500 => "Internal Server Error",
        502 => "Bad Gateway",
        503 => "Service Unavailable",
        _ => "Unknown",
    }
}

/// Shared service state, usable without sockets.
#[derive(Debug)]
pub struct Victim {
    config: VictimConfig,
    sessions: SessionTable,
    types: VolumeTypeStore,
    drop_rng: Mutex<ChaCha8Rng>,
}

impl Victim {
    pub fn new(config: VictimConfig) -> Self {
        Victim {
            sessions: SessionTable::new(config.seed, config.rotate_on_logout),
            types: VolumeTypeStore::new(config.type_delete_bug),
            drop_rng: Mutex::new(ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d70b)),
            config,
        }
    }

    pub fn config(&self) -> &VictimConfig {
        &self.config
    }

    pub fn sessions(&self) -> &SessionTable {
        &self.sessions
    }

    pub fn types(&self) -> &VolumeTypeStore {
        &self.types
    }

    fn should_drop(&self) -> bool {
        self.config.drop_probability > 0.0
            && self.drop_rng.lock().unwrap().gen_bool(self.config.drop_probability.min(1.0))
    }

    /// Produces the response for a parsed request.
    pub fn handle(&self, request: &Message) -> Response {
        let StartLine::Request { method, target, .. } = &request.start else {
            return Response::new(400, "expected a request\n");
        };
        if let Some(rule) = self
            .config
            .fault_rules
            .iter()
            .find(|r| r.matches(method, target, &request.headers))
        {
            return Response::new(rule.status, format!("fault injected on {}\n", rule.element));
        }
        if self.config.always_ok {
            return Response::new(200, "ok\n");
        }
        if target.len() > self.config.uri_length_limit {
            return Response::new(414, "request target too long\n");
        }
        self.route(method, target, request)
    }

    fn route(&self, method: &str, target: &str, request: &Message) -> Response {
        let path = target.split('?').next().unwrap_or_default();
        match (method, path) {
            ("GET" | "HEAD", "/") => Response::html(200, "<html><body>dashboard login</body></html>\n".into()),
            ("POST", "/login") => self.login(request),
            ("POST", "/logout") => self.logout(request),
            ("GET" | "HEAD", "/types") => {
                let body = serde_json::to_vec(&self.types.list()).unwrap_or_default();
                Response {
                    status: 200,
                    headers: vec![("Content-Type".into(), "application/json".into())],
                    body,
                }
            }
            ("POST", "/types") => self.create_type(request),
            (_, "/login" | "/logout" | "/types") => Response::new(405, "method not allowed\n"),
            _ => {
                if let Some(page) = path.strip_prefix("/restricted/") {
                    if method == "GET" || method == "HEAD" {
                        return self.restricted(page, request);
                    }
                    return Response::new(405, "method not allowed\n");
                }
                if let Some(name) = path.strip_prefix("/types/") {
                    if method == "DELETE" {
                        return self.delete_type(name);
                    }
                    return Response::new(405, "method not allowed\n");
                }
                Response::new(404, "not found\n")
            }
        }
    }

    fn login(&self, request: &Message) -> Response {
        let form = parse_form(&request.body);
        let (Some(user), Some(pass)) = (form_get(&form, "username"), form_get(&form, "password")) else {
            return Response::new(400, "username and password required\n");
        };
        let known = self
            .config
            .user_table
            .iter()
            .any(|u| u.username == user && u.password == pass);
        if !known {
            return Response::new(401, "invalid credentials\n");
        }
        let token = self.sessions.issue(user, now_ms());
        Response::html(200, format!("<html><body>welcome {user}</body></html>\n")).header(
            "Set-Cookie",
            format!("{}={token}; Path=/; HttpOnly", self.config.session_cookie_name),
        )
    }

    fn logout(&self, request: &Message) -> Response {
        let Some(token) = session_cookie(request, &self.config.session_cookie_name) else {
            return Response::new(400, "no session\n");
        };
        self.sessions.logout(&token);
        let resp = Response::html(200, "<html><body>logged out</body></html>\n".into());
        if self.sessions.rotates() {
            resp.header(
                "Set-Cookie",
                format!("{}=; Path=/; Max-Age=0", self.config.session_cookie_name),
            )
        } else {
            resp
        }
    }

    fn restricted(&self, page: &str, request: &Message) -> Response {
        let Some(user) = session_cookie(request, &self.config.session_cookie_name)
            .and_then(|t| self.sessions.authenticate(&t))
        else {
            return Response::new(403, "login required\n");
        };
        let account = self.config.user_table.iter().find(|u| u.username == user);
        match account.and_then(|a| a.pages.iter().find(|p| p.slug == page)) {
            Some(p) => Response::html(
                200,
                format!("<html><head><title>{}</title></head><body>{}</body></html>\n", p.slug, p.marker),
            ),
            None => Response::new(404, "no such page\n"),
        }
    }

    fn create_type(&self, request: &Message) -> Response {
        let form = parse_form(&request.body);
        match form_get(&form, "name") {
            Some(name) if !name.is_empty() => match self.types.create(name, now_ms()) {
                CreateOutcome::Created => Response::new(201, "created\n"),
                CreateOutcome::Exists => Response::new(409, "volume type exists\n"),
            },
            _ => Response::new(400, "name required\n"),
        }
    }

    fn delete_type(&self, encoded: &str) -> Response {
        let name = percent_decode_str(encoded).decode_utf8_lossy();
        match self.types.delete(&name) {
            DeleteOutcome::Deleted { .. } => Response::new(200, "deleted\n"),
            DeleteOutcome::NotFound => Response::new(404, "no such volume type\n"),
        }
    }
}

fn now_ms() -> i64 {
    chrono::Utc::now().timestamp_millis()
}

fn parse_form(body: &[u8]) -> Vec<(String, String)> {
    form_urlencoded::parse(body).into_owned().collect()
}

fn form_get<'a>(form: &'a [(String, String)], key: &str) -> Option<&'a str> {
    form.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

/// Extracts the named cookie from a request's `Cookie` headers.
pub fn session_cookie(request: &Message, name: &str) -> Option<String> {
    request
        .headers_named("cookie")
        .flat_map(|v| v.split(';'))
        .filter_map(|pair| pair.trim().split_once('='))
        .find(|(k, _)| *k == name)
        .map(|(_, v)| v.to_string())
}

/// A running victim. Dropping the handle stops the listener.
pub struct VictimHandle {
    addr: SocketAddr,
    victim: Arc<Victim>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl VictimHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn victim(&self) -> &Victim {
        &self.victim
    }

    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    /// Blocks until the listener thread exits.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    fn stop_inner(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // unblock accept()
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for VictimHandle {
    fn drop(&mut self) {
        self.stop_inner();
    }
}

/// Binds the listener and starts serving in a background thread.
pub fn serve(config: VictimConfig) -> Result<VictimHandle, VictimError> {
    let listener = TcpListener::bind(&config.listen).map_err(|source| VictimError::BindFailure {
        addr: config.listen.clone(),
        source,
    })?;
    let addr = listener.local_addr().map_err(|source| VictimError::BindFailure {
        addr: config.listen.clone(),
        source,
    })?;
    let victim = Arc::new(Victim::new(config));
    let stop = Arc::new(AtomicBool::new(false));
    let thread = {
        let victim = Arc::clone(&victim);
        let stop = Arc::clone(&stop);
        thread::spawn(move || accept_loop(listener, victim, stop))
    };
    Ok(VictimHandle {
        addr,
        victim,
        stop,
        thread: Some(thread),
    })
}

fn accept_loop(listener: TcpListener, victim: Arc<Victim>, stop: Arc<AtomicBool>) {
    for conn in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = conn else { continue };
        let victim = Arc::clone(&victim);
        thread::spawn(move || {
            if let Err(e) = serve_connection(stream, &victim) {
                log::debug!("victim connection error: {e}");
            }
        });
    }
}

fn serve_connection(mut stream: TcpStream, victim: &Victim) -> io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    stream.set_write_timeout(Some(Duration::from_secs(10)))?;
    let mut buf = Vec::new();
    let mut chunk = [0u8; 8192];
    let (head_len, body_start) = loop {
        if let Some(found) = find_head_end(&buf) {
            break found;
        }
        if buf.len() > MAX_HEAD {
            return write_response(&mut stream, &Response::new(431, "request head too large\n"), false);
        }
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Ok(());
        }
        buf.extend_from_slice(&chunk[..n]);
    };
    let (start, headers) = match parse_head(&buf[..head_len]) {
        Ok(parsed) => parsed,
        Err(_) => return write_response(&mut stream, &Response::new(400, "malformed request\n"), false),
    };
    let content_length = match http::header_value(&headers, "content-length").map(str::parse::<usize>) {
        None => 0,
        Some(Ok(n)) if n <= MAX_BODY => n,
        Some(Ok(_)) => return write_response(&mut stream, &Response::new(413, "body too large\n"), false),
        Some(Err(_)) => return write_response(&mut stream, &Response::new(400, "bad content-length\n"), false),
    };
    while buf.len() < body_start + content_length {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return write_response(&mut stream, &Response::new(400, "truncated body\n"), false);
        }
        buf.extend_from_slice(&chunk[..n]);
    }
    let request = Message {
        start,
        headers,
        body: buf[body_start..body_start + content_length].to_vec(),
    };
    if victim.should_drop() {
        return Ok(());
    }
    let head_only = request.method() == Some("HEAD");
    let response = victim.handle(&request);
    write_response(&mut stream, &response, head_only)
}

fn write_response(stream: &mut TcpStream, response: &Response, head_only: bool) -> io::Result<()> {
    stream.write_all(&response.to_bytes(head_only))?;
    stream.flush()?;
    let _ = stream.shutdown(std::net::Shutdown::Write);
    // drain so the peer sees FIN rather than RST
    let mut sink = [0u8; 1024];
    stream.set_read_timeout(Some(Duration::from_millis(200)))?;
    while matches!(stream.read(&mut sink), Ok(n) if n > 0) {}
    Ok(())
}
