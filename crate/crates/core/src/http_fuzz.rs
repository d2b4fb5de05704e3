//! HTTP protocol fuzzing: BED-style per-element payload sweeps and
//! SFUZZ-style request-target length sweeps, with a per-method /
//! per-status packet counter.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::net::{SocketAddr, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::Template;
use crate::http::{build_request, resolve, round_trip, RoundTrip};
use crate::victim::reason_phrase;

pub const BED_FUNCTIONS: [&str; 13] = [
    "HEAD",
    "GET",
    "POST",
    "User-Agent",
    "Host",
    "Accept",
    "Connection",
    "Referer",
    "Authorization",
    "From",
    "Charge-to",
    "If-Modified-Since",
    "Pragma",
];

pub const BED_CHARSET: [char; 1] = ['A'];
pub const BED_LENGTHS: [usize; 6] = [16, 64, 256, 1024, 4096, 10024];
pub const FORMAT_PROBES: [&str; 2] = ["%s%s%s%s", "%n%n%n%n"];
pub const SFUZZ_METHODS: [&str; 3] = ["GET", "HEAD", "POST"];
pub const SFUZZ_MAX_LEN: usize = 10024;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum HttpFuzzError {
    #[error("target {target} unreachable: {source}")]
    TargetUnreachable {
        target: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FuzzMode {
    Bed,
    SfuzzBasic,
}

#[derive(Debug, Clone)]
pub struct HttpFuzzCampaign {
    pub mode: FuzzMode,
    pub target_host: String,
    pub target_port: u16,
    pub delay: Duration,
    pub max_payload_len: usize,
    pub functions: Vec<String>,
    pub timeout: Duration,
}

impl HttpFuzzCampaign {
    pub fn bed(host: &str, port: u16) -> Self {
        HttpFuzzCampaign {
            mode: FuzzMode::Bed,
            target_host: host.to_string(),
            target_port: port,
            delay: Duration::ZERO,
            max_payload_len: SFUZZ_MAX_LEN,
            functions: BED_FUNCTIONS.iter().map(|s| s.to_string()).collect(),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn sfuzz_basic(host: &str, port: u16) -> Self {
        HttpFuzzCampaign {
            mode: FuzzMode::SfuzzBasic,
            ..HttpFuzzCampaign::bed(host, port)
        }
    }

    fn target(&self) -> String {
        if self.target_host.contains(':') && !self.target_host.starts_with('[') {
            format!("[{}]:{}", self.target_host, self.target_port)
        } else {
            format!("{}:{}", self.target_host, self.target_port)
        }
    }
}

/// Non-numeric ends of an exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Timeout,
    ConnectionReset,
    MalformedResponse,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Timeout => "timeout",
            Outcome::ConnectionReset => "connection_reset",
            Outcome::MalformedResponse => "malformed_response",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExchangeStatus {
    Code(u16),
    Outcome(Outcome),
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64() * 1000.0)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let ms = f64::deserialize(d)?;
        Ok(Duration::from_secs_f64(ms.max(0.0) / 1000.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpExchange {
    /// Which request-line method or header carried the payload.
    pub element: String,
    pub method: String,
    pub payload_len: usize,
    pub status: ExchangeStatus,
    #[serde(rename = "elapsed_ms", with = "duration_ms")]
    pub elapsed: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Normal,
    ClientError,
    ServerError,
    Anomaly,
}

impl Class {
    pub fn is_anomaly(self) -> bool {
        matches!(self, Class::ServerError | Class::Anomaly)
    }
}

pub fn classify(exchange: &HttpExchange) -> Class {
    match exchange.status {
        ExchangeStatus::Code(100..=399) => Class::Normal,
        ExchangeStatus::Code(400..=499) => Class::ClientError,
        ExchangeStatus::Code(500..=599) => Class::ServerError,
        _ => Class::Anomaly,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub total: u64,
    pub by_status: BTreeMap<u16, u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketCounter {
    pub request_total: u64,
    pub response_total: u64,
    pub requests_by_method: BTreeMap<String, u64>,
    /// Keyed by the leading digit of the status.
    pub responses_by_class: BTreeMap<u8, ClassCount>,
    pub outcomes: BTreeMap<Outcome, u64>,
    pub anomaly_count: u64,
}

fn class_title(class: u8) -> &'static str {
    match class {
        1 => "1xx: Informational",
        2 => "2xx: Success",
        3 => "3xx: Redirection",
        4 => "4xx: Client Error",
        _ => "5xx: Server Error",
    }
}

impl PacketCounter {
    pub fn record(&mut self, exchange: &HttpExchange) {
        self.request_total += 1;
        *self.requests_by_method.entry(exchange.method.clone()).or_default() += 1;
        match exchange.status {
            ExchangeStatus::Code(code) => {
                self.response_total += 1;
                let class = self.responses_by_class.entry((code / 100) as u8).or_default();
                class.total += 1;
                *class.by_status.entry(code).or_default() += 1;
            }
            ExchangeStatus::Outcome(o) => *self.outcomes.entry(o).or_default() += 1,
        }
        if classify(exchange).is_anomaly() {
            self.anomaly_count += 1;
        }
    }

    pub fn from_exchanges(exchanges: &[HttpExchange]) -> Self {
        let mut c = PacketCounter::default();
        exchanges.iter().for_each(|e| c.record(e));
        c
    }

    pub fn class_total(&self, class: u8) -> u64 {
        self.responses_by_class.get(&class).map_or(0, |c| c.total)
    }

    pub fn outcome_total(&self) -> u64 {
        self.outcomes.values().sum()
    }

    /// Checks every sum the counter is supposed to maintain.
    pub fn conserved(&self) -> bool {
        self.request_total == self.requests_by_method.values().sum::<u64>()
            && self.response_total == self.responses_by_class.values().map(|c| c.total).sum::<u64>()
            && self
                .responses_by_class
                .values()
                .all(|c| c.total == c.by_status.values().sum::<u64>())
            && self.request_total == self.response_total + self.outcome_total()
    }

    /// Protocol-analyzer style tree: packets, requests by method, responses
    /// by class then status.
    pub fn render_tree(&self) -> String {
        let mut out = String::new();
        let row = |out: &mut String, depth: usize, label: &str, n: u64| {
            let indent = "  ".repeat(depth);
            let _ = writeln!(out, "{indent}{label:<w$} {n:>8}", w = 40 - indent.len());
        };
        row(&mut out, 0, "Total HTTP Packets", self.request_total + self.response_total);
        row(&mut out, 1, "HTTP Request Packets", self.request_total);
        for (method, n) in &self.requests_by_method {
            row(&mut out, 2, method, *n);
        }
        row(&mut out, 1, "HTTP Response Packets", self.response_total);
        for (class, count) in &self.responses_by_class {
            row(&mut out, 2, class_title(*class), count.total);
            for (status, n) in &count.by_status {
                row(&mut out, 3, &format!("{status} {}", reason_phrase(*status)), *n);
            }
        }
        if !self.outcomes.is_empty() {
            row(&mut out, 1, "No Response", self.outcome_total());
            for (o, n) in &self.outcomes {
                row(&mut out, 2, o.as_str(), *n);
            }
        }
        row(&mut out, 0, "Anomalies", self.anomaly_count);
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct CampaignResult {
    pub exchanges: Vec<HttpExchange>,
    pub counter: PacketCounter,
}

/// One request to send.
struct Probe {
    element: String,
    method: String,
    payload: String,
}

/// Single-placeholder fills over `charset` at the given lengths, followed
/// by `extra` verbatim.
pub fn payload_ladder(charset: &[char], lengths: &[usize], extra: &[&str]) -> Vec<String> {
    let template = Template::parse("FUZZ");
    let mut out = Vec::new();
    for &ch in charset {
        for &len in lengths {
            let fill: String = std::iter::repeat(ch).take(len).collect();
            out.push(template.render(&fill));
        }
    }
    out.extend(extra.iter().map(|s| s.to_string()));
    out
}

pub fn bed_payloads() -> Vec<String> {
    payload_ladder(&BED_CHARSET, &BED_LENGTHS, &FORMAT_PROBES)
}

/// 1, 2, 4, ... up to `max`, plus `max` itself when it is not a power of two.
pub fn sfuzz_lengths(max: usize) -> Vec<usize> {
    let mut out: Vec<usize> = std::iter::successors(Some(1usize), |n| n.checked_mul(2))
        .take_while(|n| *n <= max)
        .collect();
    if max > 0 && out.last() != Some(&max) {
        out.push(max);
    }
    out
}

fn is_method(element: &str) -> bool {
    SFUZZ_METHODS.contains(&element)
}

fn request_for(probe: &Probe, host: &str) -> Vec<u8> {
    if is_method(&probe.element) {
        let target = format!("/{}", probe.payload);
        return build_request(&probe.method, &target, &[("Host", host)], b"");
    }
    let mut headers = vec![("Host", host)];
    if probe.element.eq_ignore_ascii_case("host") {
        headers[0].1 = &probe.payload;
    } else {
        headers.push((&probe.element, &probe.payload));
    }
    build_request(&probe.method, "/", &headers, b"")
}

fn check_reachable(campaign: &HttpFuzzCampaign) -> Result<SocketAddr, HttpFuzzError> {
    let target = campaign.target();
    let unreachable = |source| HttpFuzzError::TargetUnreachable {
        target: target.clone(),
        source,
    };
    let addr = resolve(&target).map_err(unreachable)?;
    TcpStream::connect_timeout(&addr, campaign.timeout).map_err(unreachable)?;
    Ok(addr)
}

fn run_probes(
    campaign: &HttpFuzzCampaign,
    probes: Vec<Probe>,
    on_exchange: &mut dyn FnMut(&HttpExchange),
) -> Result<CampaignResult, HttpFuzzError> {
    let addr = check_reachable(campaign)?;
    let host = campaign.target();
    let mut result = CampaignResult::default();
    let mut last_start: Option<Instant> = None;
    for probe in probes {
        if let Some(prev) = last_start {
            let since = prev.elapsed();
            if since < campaign.delay {
                thread::sleep(campaign.delay - since);
            }
        }
        let request = request_for(&probe, &host);
        let started = Instant::now();
        last_start = Some(started);
        let status = match round_trip(addr, &request, campaign.timeout) {
            Ok(RoundTrip::Response { message, .. }) => match message.status() {
                Some(code) => ExchangeStatus::Code(code),
                None => ExchangeStatus::Outcome(Outcome::MalformedResponse),
            },
            Ok(RoundTrip::Timeout) => ExchangeStatus::Outcome(Outcome::Timeout),
            Ok(RoundTrip::Malformed { .. }) => ExchangeStatus::Outcome(Outcome::MalformedResponse),
            Ok(RoundTrip::ConnectionReset) => ExchangeStatus::Outcome(Outcome::ConnectionReset),
            Err(e) if e.kind() == std::io::ErrorKind::TimedOut => ExchangeStatus::Outcome(Outcome::Timeout),
            Err(_) => ExchangeStatus::Outcome(Outcome::ConnectionReset),
        };
        let exchange = HttpExchange {
            element: probe.element,
            method: probe.method,
            payload_len: probe.payload.len(),
            status,
            elapsed: started.elapsed(),
        };
        log::debug!("{} len={} -> {:?}", exchange.element, exchange.payload_len, exchange.status);
        on_exchange(&exchange);
        result.counter.record(&exchange);
        result.exchanges.push(exchange);
    }
    Ok(result)
}

/// Every payload of the ladder against every function in turn.
pub fn run_bed(campaign: &HttpFuzzCampaign) -> Result<CampaignResult, HttpFuzzError> {
    run_bed_with(campaign, &bed_payloads(), &mut |_| {})
}

pub fn run_bed_with(
    campaign: &HttpFuzzCampaign,
    payloads: &[String],
    on_exchange: &mut dyn FnMut(&HttpExchange),
) -> Result<CampaignResult, HttpFuzzError> {
    let probes = campaign
        .functions
        .iter()
        .flat_map(|f| {
            let method = if is_method(f) { f.clone() } else { "GET".to_string() };
            payloads.iter().map(move |p| Probe {
                element: f.clone(),
                method: method.clone(),
                payload: p.clone(),
            })
        })
        .collect();
    run_probes(campaign, probes, on_exchange)
}

/// GET, HEAD and POST with request targets of geometrically growing length.
pub fn run_sfuzz_basic(campaign: &HttpFuzzCampaign) -> Result<CampaignResult, HttpFuzzError> {
    run_sfuzz_basic_with(campaign, &mut |_| {})
}

pub fn run_sfuzz_basic_with(
    campaign: &HttpFuzzCampaign,
    on_exchange: &mut dyn FnMut(&HttpExchange),
) -> Result<CampaignResult, HttpFuzzError> {
    let lengths = sfuzz_lengths(campaign.max_payload_len);
    let payloads = payload_ladder(&BED_CHARSET, &lengths, &[]);
    let probes = SFUZZ_METHODS
        .iter()
        .flat_map(|m| {
            payloads.iter().map(move |p| Probe {
                element: m.to_string(),
                method: m.to_string(),
                payload: p.clone(),
            })
        })
        .collect();
    run_probes(campaign, probes, on_exchange)
}

pub fn run_campaign(
    campaign: &HttpFuzzCampaign,
    on_exchange: &mut dyn FnMut(&HttpExchange),
) -> Result<CampaignResult, HttpFuzzError> {
    match campaign.mode {
        FuzzMode::Bed => run_bed_with(campaign, &bed_payloads(), on_exchange),
        FuzzMode::SfuzzBasic => run_sfuzz_basic_with(campaign, on_exchange),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(method: &str, status: ExchangeStatus) -> HttpExchange {
        HttpExchange {
            element: method.into(),
            method: method.into(),
            payload_len: 1,
            status,
            elapsed: Duration::from_millis(3),
        }
    }

    #[test]
    fn classification() {
        assert_eq!(classify(&ex("GET", ExchangeStatus::Code(200))), Class::Normal);
        assert_eq!(classify(&ex("GET", ExchangeStatus::Code(302))), Class::Normal);
        assert_eq!(classify(&ex("GET", ExchangeStatus::Code(414))), Class::ClientError);
        assert_eq!(classify(&ex("GET", ExchangeStatus::Code(500))), Class::ServerError);
        assert!(Class::ServerError.is_anomaly());
        assert!(!Class::ClientError.is_anomaly());
        let t = classify(&ex("GET", ExchangeStatus::Outcome(Outcome::Timeout)));
        assert_eq!(t, Class::Anomaly);
        assert!(t.is_anomaly());
    }

    #[test]
    fn ladders() {
        let p = bed_payloads();
        assert_eq!(p.len(), 8);
        assert_eq!(p[0], "A".repeat(16));
        assert_eq!(p[5].len(), 10024);
        assert_eq!(p[7], "%n%n%n%n");
        assert_eq!(sfuzz_lengths(1), vec![1]);
        assert_eq!(sfuzz_lengths(0), Vec::<usize>::new());
        assert_eq!(sfuzz_lengths(8), vec![1, 2, 4, 8]);
        let full = sfuzz_lengths(SFUZZ_MAX_LEN);
        assert_eq!(full.len(), 15);
        assert_eq!(full[13], 8192);
        assert_eq!(full[14], 10024);
    }

    #[test]
    fn counter_sums() {
        let xs = [
            ex("GET", ExchangeStatus::Code(200)),
            ex("GET", ExchangeStatus::Code(414)),
            ex("HEAD", ExchangeStatus::Code(414)),
            ex("POST", ExchangeStatus::Code(500)),
            ex("POST", ExchangeStatus::Outcome(Outcome::ConnectionReset)),
        ];
        let c = PacketCounter::from_exchanges(&xs);
        assert!(c.conserved());
        assert_eq!(c.request_total, 5);
        assert_eq!(c.response_total, 4);
        assert_eq!(c.class_total(4), 2);
        assert_eq!(c.anomaly_count, 2);
        let tree = c.render_tree();
        assert!(tree.contains("4xx: Client Error"));
        assert!(tree.contains("414 Request-URI Too Long"));
        assert!(tree.contains("connection_reset"));
    }

    #[test]
    fn exchange_json_shape() {
        let a = serde_json::to_value(ex("GET", ExchangeStatus::Code(200))).unwrap();
        assert_eq!(a["status"], 200);
        let b = serde_json::to_value(ex("GET", ExchangeStatus::Outcome(Outcome::MalformedResponse))).unwrap();
        assert_eq!(b["status"], "malformed_response");
        let back: HttpExchange = serde_json::from_value(b).unwrap();
        assert_eq!(back.status, ExchangeStatus::Outcome(Outcome::MalformedResponse));
    }

    #[test]
    fn header_placement() {
        let probe = Probe {
            element: "Authorization".into(),
            method: "GET".into(),
            payload: "AAAA".into(),
        };
        let req = String::from_utf8(request_for(&probe, "h:80")).unwrap();
        assert!(req.starts_with("GET / HTTP/1.1\r\nHost: h:80\r\nAuthorization: AAAA\r\n"));
        let host = Probe {
            element: "Host".into(),
            method: "GET".into(),
            payload: "BB".into(),
        };
        let req = String::from_utf8(request_for(&host, "h:80")).unwrap();
        assert!(req.contains("Host: BB\r\n") && !req.contains("h:80"));
        let head = Probe {
            element: "HEAD".into(),
            method: "HEAD".into(),
            payload: "CC".into(),
        };
        assert!(request_for(&head, "h").starts_with(b"HEAD /CC HTTP/1.1\r\n"));
    }
}
