//! Executes generated command sweeps through an adapter, with an optional
//! shared rate limit, and checks for resources that survived cleanup.

use std::collections::BTreeSet;
use std::io::Read;
use std::net::{SocketAddr, TcpStream};
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use percent_encoding::{utf8_percent_encode, NON_ALPHANUMERIC};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::Template;
use crate::http::{build_request, resolve, round_trip, RoundTrip};
use crate::payload::GeneratedCommand;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_DELETE_TEMPLATE: &str = "cinder type-delete FUZZ";

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("adapter {adapter} unavailable: {detail}")]
    AdapterUnavailable { adapter: String, detail: String },
    #[error("adapter {0} cannot list resources")]
    Unsupported(String),
    #[error("bad adapter spec {0:?}: expected victim:<host:port> or exec:<template>")]
    BadAdapterSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecOutcome {
    Accepted,
    Rejected,
    Error,
    Timeout,
}

/// What an adapter reports for one command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Execution {
    pub outcome: ExecOutcome,
    pub detail: String,
}

impl Execution {
    fn new(outcome: ExecOutcome, detail: impl Into<String>) -> Self {
        Execution {
            outcome,
            detail: detail.into(),
        }
    }
}

pub trait Adapter: Send + Sync {
    fn name(&self) -> String;

    /// Called once before a sweep starts.
    fn check(&self) -> Result<(), RunnerError>;

    fn execute(&self, command: &str) -> Execution;

    /// Names of the resources the target currently holds.
    fn list_names(&self) -> Result<Vec<String>, RunnerError>;
}

/// Maps `type-create`, `type-delete` and `type-list` commands onto the
/// victim's volume-type endpoints. The argument is everything after the verb.
pub struct VictimAdapter {
    target: String,
    timeout: Duration,
}

const VICTIM_VERBS: [&str; 3] = ["type-create", "type-delete", "type-list"];

impl VictimAdapter {
    pub fn new(target: &str, timeout: Duration) -> Self {
        VictimAdapter {
            target: target.to_string(),
            timeout,
        }
    }

    fn addr(&self) -> Result<SocketAddr, RunnerError> {
        resolve(&self.target).map_err(|e| self.unavailable(e))
    }

    fn unavailable(&self, e: impl ToString) -> RunnerError {
        RunnerError::AdapterUnavailable {
            adapter: self.name(),
            detail: e.to_string(),
        }
    }

    fn call(&self, method: &str, target: &str, body: &[u8]) -> Result<(u16, Vec<u8>), Execution> {
        let addr = self.addr().map_err(|e| Execution::new(ExecOutcome::Error, e.to_string()))?;
        let mut headers = vec![("Host", self.target.as_str())];
        if !body.is_empty() {
            headers.push(("Content-Type", "application/x-www-form-urlencoded"));
        }
        let request = build_request(method, target, &headers, body);
        match round_trip(addr, &request, self.timeout) {
            Ok(RoundTrip::Response { message, .. }) => Ok((message.status().unwrap_or(0), message.body)),
            Ok(RoundTrip::Timeout) => Err(Execution::new(ExecOutcome::Timeout, "no response")),
            Ok(RoundTrip::ConnectionReset) => Err(Execution::new(ExecOutcome::Error, "connection reset")),
            Ok(RoundTrip::Malformed { .. }) => Err(Execution::new(ExecOutcome::Error, "malformed response")),
            Err(e) if e.kind() == std::io::ErrorKind::TimedOut => Err(Execution::new(ExecOutcome::Timeout, e.to_string())),
            Err(e) => Err(Execution::new(ExecOutcome::Error, e.to_string())),
        }
    }
}

fn status_outcome(status: u16) -> ExecOutcome {
    match status {
        200..=299 => ExecOutcome::Accepted,
        400..=499 => ExecOutcome::Rejected,
        _ => ExecOutcome::Error,
    }
}

impl Adapter for VictimAdapter {
    fn name(&self) -> String {
        format!("victim:{}", self.target)
    }

    fn check(&self) -> Result<(), RunnerError> {
        let addr = self.addr()?;
        TcpStream::connect_timeout(&addr, self.timeout).map_err(|e| self.unavailable(e))?;
        Ok(())
    }

    fn execute(&self, command: &str) -> Execution {
        let tokens: Vec<&str> = command.split_whitespace().collect();
        let Some(pos) = tokens.iter().position(|t| VICTIM_VERBS.contains(t)) else {
            return Execution::new(ExecOutcome::Rejected, "unsupported command");
        };
        let arg = tokens[pos + 1..].join(" ");
        let result = match tokens[pos] {
            "type-create" => {
                let body: String = form_urlencoded::Serializer::new(String::new())
                    .append_pair("name", &arg)
                    .finish();
                self.call("POST", "/types", body.as_bytes())
            }
            "type-delete" => {
                let target = format!("/types/{}", utf8_percent_encode(&arg, NON_ALPHANUMERIC));
                self.call("DELETE", &target, b"")
            }
            _ => self.call("GET", "/types", b""),
        };
        match result {
            Ok((status, body)) => {
                let text = String::from_utf8_lossy(&body);
                Execution::new(status_outcome(status), format!("{status} {}", text.trim()))
            }
            Err(e) => e,
        }
    }

    fn list_names(&self) -> Result<Vec<String>, RunnerError> {
        match self.call("GET", "/types", b"") {
            Ok((200, body)) => serde_json::from_slice(&body).map_err(|e| self.unavailable(e)),
            Ok((status, _)) => Err(self.unavailable(format!("list returned {status}"))),
            Err(e) => Err(self.unavailable(e.detail)),
        }
    }
}

/// Runs each command as a process. The template is split on whitespace;
/// a `{}` token is replaced by the command's own tokens, otherwise they are
/// appended. No shell is involved.
pub struct ExecAdapter {
    template: Vec<String>,
    timeout: Duration,
}

impl ExecAdapter {
    pub fn new(template: &str, timeout: Duration) -> Self {
        ExecAdapter {
            template: template.split_whitespace().map(str::to_string).collect(),
            timeout,
        }
    }

    pub fn argv(&self, command: &str) -> Vec<String> {
        let cmd: Vec<String> = command.split_whitespace().map(str::to_string).collect();
        let mut out = Vec::new();
        let mut substituted = false;
        for t in &self.template {
            if t == "{}" {
                out.extend(cmd.iter().cloned());
                substituted = true;
            } else {
                out.push(t.clone());
            }
        }
        if !substituted {
            out.extend(cmd);
        }
        out
    }
}

impl Adapter for ExecAdapter {
    fn name(&self) -> String {
        format!("exec:{}", self.template.join(" "))
    }

    fn check(&self) -> Result<(), RunnerError> {
        Ok(())
    }

    fn execute(&self, command: &str) -> Execution {
        let argv = self.argv(command);
        let Some((program, args)) = argv.split_first() else {
            return Execution::new(ExecOutcome::Error, "empty command");
        };
        let mut child = match Command::new(program)
            .args(args)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
        {
            Ok(c) => c,
            Err(e) => return Execution::new(ExecOutcome::Error, format!("spawn failed: {e}")),
        };
        let deadline = Instant::now() + self.timeout;
        loop {
            match child.try_wait() {
                Ok(Some(status)) => {
                    let mut stderr = String::new();
                    if let Some(mut pipe) = child.stderr.take() {
                        let _ = pipe.read_to_string(&mut stderr);
                    }
                    let outcome = if status.success() {
                        ExecOutcome::Accepted
                    } else {
                        ExecOutcome::Rejected
                    };
                    let code = status.code().map_or("signal".to_string(), |c| c.to_string());
                    return Execution::new(outcome, format!("exit {code} {}", stderr.trim()).trim_end().to_string());
                }
                Ok(None) if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Execution::new(ExecOutcome::Timeout, "killed after timeout");
                }
                Ok(None) => thread::sleep(Duration::from_millis(5)),
                Err(e) => return Execution::new(ExecOutcome::Error, e.to_string()),
            }
        }
    }

    fn list_names(&self) -> Result<Vec<String>, RunnerError> {
        Err(RunnerError::Unsupported(self.name()))
    }
}

pub fn parse_adapter(spec: &str, timeout: Duration) -> Result<Box<dyn Adapter>, RunnerError> {
    if let Some(target) = spec.strip_prefix("victim:") {
        return Ok(Box::new(VictimAdapter::new(target, timeout)));
    }
    if let Some(template) = spec.strip_prefix("exec:") {
        if !template.trim().is_empty() {
            return Ok(Box::new(ExecAdapter::new(template, timeout)));
        }
    }
    Err(RunnerError::BadAdapterSpec(spec.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RateLimitPolicy {
    pub enabled: bool,
    pub max_per_window: u32,
    pub window: Duration,
}

impl RateLimitPolicy {
    pub fn disabled() -> Self {
        RateLimitPolicy {
            enabled: false,
            max_per_window: 0,
            window: Duration::ZERO,
        }
    }

    pub fn per_second(n: u32) -> Self {
        RateLimitPolicy {
            enabled: n > 0,
            max_per_window: n,
            window: Duration::from_secs(1),
        }
    }
}

/// Fixed-window limiter shared by every worker.
struct Limiter {
    policy: RateLimitPolicy,
    state: Mutex<(Instant, u32)>,
}

impl Limiter {
    fn new(policy: RateLimitPolicy) -> Self {
        Limiter {
            policy,
            state: Mutex::new((Instant::now(), 0)),
        }
    }

    fn acquire(&self) {
        if !self.policy.enabled {
            return;
        }
        loop {
            let wait = {
                let mut st = self.state.lock().unwrap();
                let now = Instant::now();
                if now >= st.0 + self.policy.window {
                    *st = (now, 0);
                }
                if st.1 < self.policy.max_per_window {
                    st.1 += 1;
                    return;
                }
                st.0 + self.policy.window - now
            };
            thread::sleep(wait);
        }
    }
}

/// One command ready to run, tagged with its generation index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepItem {
    pub index: u64,
    pub case_index: usize,
    pub ch: char,
    pub length: usize,
    pub command: String,
}

impl SweepItem {
    pub fn from_generated(index: u64, cmd: GeneratedCommand) -> Self {
        SweepItem {
            index,
            case_index: cmd.case_index,
            ch: cmd.ch,
            length: cmd.length,
            command: cmd.rendered,
        }
    }

    pub fn fuzz_string(&self) -> String {
        std::iter::repeat(self.ch).take(self.length).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub index: u64,
    pub case_index: usize,
    pub ch: char,
    pub length: usize,
    pub command: String,
    pub outcome: ExecOutcome,
    pub detail: String,
    pub elapsed_ms: f64,
}

impl ExecutionRecord {
    pub fn fuzz_string(&self) -> String {
        std::iter::repeat(self.ch).take(self.length).collect()
    }
}

/// Streams `items` through `adapter` on `width` workers. Records come back
/// sorted by generation index whatever the width.
pub fn run_sweep<I>(items: I, adapter: &dyn Adapter, policy: RateLimitPolicy, width: usize) -> Result<Vec<ExecutionRecord>, RunnerError>
where
    I: Iterator<Item = SweepItem> + Send,
{
    adapter.check()?;
    let limiter = Limiter::new(policy);
    let source = Mutex::new(items);
    let results = Mutex::new(Vec::new());
    thread::scope(|s| {
        for _ in 0..width.max(1) {
            s.spawn(|| loop {
                let Some(item) = source.lock().unwrap().next() else {
                    break;
                };
                limiter.acquire();
                let started = Instant::now();
                let exec = adapter.execute(&item.command);
                let record = ExecutionRecord {
                    index: item.index,
                    case_index: item.case_index,
                    ch: item.ch,
                    length: item.length,
                    command: item.command,
                    outcome: exec.outcome,
                    detail: exec.detail,
                    elapsed_ms: started.elapsed().as_secs_f64() * 1000.0,
                };
                results.lock().unwrap().push(record);
            });
        }
    });
    let mut records = results.into_inner().unwrap();
    records.sort_by_key(|r| r.index);
    Ok(records)
}

/// Delete commands for every accepted record, rendering the fuzz string
/// into `delete_template`.
pub fn cleanup_items(records: &[ExecutionRecord], delete_template: &Template) -> Vec<SweepItem> {
    records
        .iter()
        .filter(|r| r.outcome == ExecOutcome::Accepted)
        .map(|r| SweepItem {
            index: r.index,
            case_index: r.case_index,
            ch: r.ch,
            length: r.length,
            command: delete_template.render(&r.fuzz_string()),
        })
        .collect()
}

/// Fuzz strings whose delete reported success.
pub fn deleted_names(cleanup: &[ExecutionRecord]) -> Vec<String> {
    cleanup
        .iter()
        .filter(|r| r.outcome == ExecOutcome::Accepted)
        .map(|r| r.fuzz_string())
        .collect()
}

/// Names reported deleted that the adapter still lists, in `expected` order.
pub fn residue_check(adapter: &dyn Adapter, expected_deleted: &[String]) -> Result<Vec<String>, RunnerError> {
    if expected_deleted.is_empty() {
        return Ok(Vec::new());
    }
    let present: BTreeSet<String> = adapter.list_names()?.into_iter().collect();
    let mut seen = BTreeSet::new();
    Ok(expected_deleted
        .iter()
        .filter(|n| present.contains(*n) && seen.insert(n.as_str()))
        .cloned()
        .collect())
}
