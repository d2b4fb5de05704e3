//! Pipeline record files and the merged findings report.
//!
//! Every pipeline writes line-delimited JSON records tagged by `type`.
//! [`aggregate`] turns any number of such files into one sorted,
//! de-duplicated list of findings.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::credscan::{CredentialFinding, CredentialKind, Origin};
use crate::http_fuzz::{classify, HttpExchange, PacketCounter};
use crate::recon::{PortResult, PortState};
use crate::runner::{ExecOutcome, ExecutionRecord};
use crate::sidejack::{CapturedSession, HijackAttempt};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{file}:{line}: {detail}")]
    MalformedInput { file: String, line: usize, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    HttpFuzz,
    CmdFuzz,
    Sidejack,
    Credscan,
    Recon,
}

impl Pipeline {
    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::HttpFuzz => "http_fuzz",
            Pipeline::CmdFuzz => "cmd_fuzz",
            Pipeline::Sidejack => "sidejack",
            Pipeline::Credscan => "credscan",
            Pipeline::Recon => "recon",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Low,
    Medium,
    High,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Info => "info",
            Severity::Low => "low",
            Severity::Medium => "medium",
            Severity::High => "high",
        }
    }
}

/// When a hijack replay was attempted relative to the victim's logout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HijackPhase {
    InSession,
    PostLogout,
}

/// One line of a pipeline output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    HttpExchange {
        target: String,
        #[serde(flatten)]
        exchange: HttpExchange,
    },
    HttpCounter {
        target: String,
        counter: PacketCounter,
    },
    CmdRecord {
        adapter: String,
        #[serde(flatten)]
        record: ExecutionRecord,
    },
    Residue {
        adapter: String,
        name: String,
    },
    Session(CapturedSession),
    Hijack {
        phase: HijackPhase,
        #[serde(flatten)]
        attempt: HijackAttempt,
    },
    Credential(CredentialFinding),
    Port(PortResult),
}

pub fn write_record<W: Write>(sink: &mut W, record: &Record) -> io::Result<()> {
    serde_json::to_writer(&mut *sink, record)?;
    sink.write_all(b"\n")
}

pub fn parse_records(file: &str, text: &str) -> Result<Vec<Record>, ReportError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ReportError::MalformedInput {
                file: file.to_string(),
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Finding {
    pub id: String,
    pub pipeline: Pipeline,
    pub severity: Severity,
    pub title: String,
    pub locator: String,
    pub details: String,
}

fn finding(pipeline: Pipeline, severity: Severity, title: impl Into<String>, locator: impl Into<String>, details: impl Into<String>) -> Finding {
    Finding {
        id: String::new(),
        pipeline,
        severity,
        title: title.into(),
        locator: locator.into(),
        details: details.into(),
    }
}

fn is_password_key(key: &str) -> bool {
    let k = key.to_ascii_lowercase();
    k.contains("pass") || k.contains("pwd") || k == "authorization" || k.ends_with("_token")
}

fn credential_severity(c: &CredentialFinding) -> Severity {
    match c.kind {
        CredentialKind::CertificateMaterial => Severity::Medium,
        CredentialKind::ConfigCredential => Severity::High,
        CredentialKind::FormLogin | CredentialKind::EnvCredential => {
            if c.matched_key.split(':').any(is_password_key) {
                Severity::High
            } else {
                Severity::Low
            }
        }
    }
}

/// Maps a record to the finding it implies, if any.
pub fn record_finding(record: &Record) -> Option<Finding> {
    match record {
        Record::HttpExchange { target, exchange } => {
            if !classify(exchange).is_anomaly() {
                return None;
            }
            let status = serde_json::to_value(exchange.status).ok()?;
            Some(finding(
                Pipeline::HttpFuzz,
                Severity::Medium,
                format!("{} fuzzing provoked {}", exchange.element, status.to_string().trim_matches('"')),
                format!("{target} {} len={}", exchange.element, exchange.payload_len),
                format!("method {}, {:.1} ms", exchange.method, exchange.elapsed.as_secs_f64() * 1000.0),
            ))
        }
        Record::HttpCounter { .. } | Record::Session(_) => None,
        Record::CmdRecord { adapter, record } => {
            let severity = match record.outcome {
                ExecOutcome::Accepted | ExecOutcome::Rejected => return None,
                ExecOutcome::Error | ExecOutcome::Timeout => Severity::Low,
            };
            let outcome = if record.outcome == ExecOutcome::Error { "error" } else { "timeout" };
            Some(finding(
                Pipeline::CmdFuzz,
                severity,
                format!("command {outcome}"),
                format!("{adapter} #{}", record.index),
                format!("case {} fill {:?}x{}: {}", record.case_index, record.ch, record.length, record.detail),
            ))
        }
        Record::Residue { adapter, name } => Some(finding(
            Pipeline::CmdFuzz,
            Severity::Medium,
            format!("resource survived a successful delete (name length {})", name.chars().count()),
            format!("{adapter} {name}"),
            "delete reported success but the resource is still listed; upstream triage rated this high priority",
        )),
        Record::Hijack { phase, attempt } => {
            let phase_text = match phase {
                HijackPhase::InSession => "in-session",
                HijackPhase::PostLogout => "post-logout",
            };
            let (severity, title) = if attempt.success() {
                (Severity::High, format!("{phase_text} session hijack succeeded"))
            } else {
                (Severity::Info, format!("{phase_text} session hijack refused"))
            };
            Some(finding(
                Pipeline::Sidejack,
                severity,
                title,
                attempt.requested_url.clone(),
                format!(
                    "cookie {} from {}, status {}",
                    attempt.session.cookie_name, attempt.session.source_client, attempt.status
                ),
            ))
        }
        Record::Credential(c) => {
            let (title, pipeline_detail) = match c.origin {
                Origin::Wire => ("cleartext credentials on the wire", "captured traffic"),
                Origin::File => ("credentials readable on disk", "filesystem"),
            };
            Some(finding(
                Pipeline::Credscan,
                credential_severity(c),
                format!("{title}: {}", c.kind.as_str()),
                c.locator.to_string(),
                format!("{} = {} ({pipeline_detail})", c.matched_key, c.matched_value),
            ))
        }
        Record::Port(p) => {
            if p.state != PortState::Open {
                return None;
            }
            let label = if p.service.is_empty() { "unlisted" } else { &p.service };
            Some(finding(
                Pipeline::Recon,
                Severity::Info,
                format!("port {} open ({label})", p.port),
                format!("{}:{}", p.host, p.port),
                "",
            ))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub findings: Vec<Finding>,
}

impl Report {
    pub fn count(&self, severity: Severity) -> usize {
        self.findings.iter().filter(|f| f.severity == severity).count()
    }

    /// 0 when nothing above info was found, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        i32::from(self.findings.iter().any(|f| f.severity > Severity::Info))
    }
}

pub fn aggregate_records<'a>(records: impl IntoIterator<Item = &'a Record>) -> Report {
    let unique: BTreeSet<_> = records
        .into_iter()
        .filter_map(record_finding)
        .map(|f| {
            (
                f.pipeline,
                std::cmp::Reverse(f.severity),
                f.locator,
                f.title,
                f.details,
            )
        })
        .collect();
    let findings = unique
        .into_iter()
        .enumerate()
        .map(|(i, (pipeline, severity, locator, title, details))| Finding {
            id: format!("F{:04}", i + 1),
            pipeline,
            severity: severity.0,
            title,
            locator,
            details,
        })
        .collect();
    Report { findings }
}

/// Merges named JSONL inputs. The result does not depend on input order.
pub fn aggregate(inputs: &[(String, String)]) -> Result<Report, ReportError> {
    let mut records = Vec::new();
    for (name, text) in inputs {
        records.extend(parse_records(name, text)?);
    }
    Ok(aggregate_records(&records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Jsonl,
}

pub const SEVERITY_LEGEND: &str = "\
severity: high = successful hijack, cleartext password or admin token
          medium = surviving resource, server error or other anomaly, certificate material
          low = non-secret credential key, command error or timeout
          info = open port, refused hijack";

pub fn render(report: &Report, format: Format) -> String {
    match format {
        Format::Jsonl => {
            let mut out = String::new();
            for f in &report.findings {
                out.push_str(&serde_json::to_string(f).expect("finding serializes"));
                out.push('\n');
            }
            out
        }
        Format::Text => render_text(report),
    }
}

fn render_text(report: &Report) -> String {
    let mut out = String::from("stackprobe findings report\n");
    out.push_str(SEVERITY_LEGEND);
    out.push_str("\n\n");
    if report.findings.is_empty() {
        out.push_str("no findings\n");
        return out;
    }
    let _ = writeln!(
        out,
        "{} findings: {} high, {} medium, {} low, {} info",
        report.findings.len(),
        report.count(Severity::High),
        report.count(Severity::Medium),
        report.count(Severity::Low),
        report.count(Severity::Info)
    );
    let mut pipeline = None;
    let mut severity = None;
    for f in &report.findings {
        if pipeline != Some(f.pipeline) {
            let _ = writeln!(out, "\n[{}]", f.pipeline.as_str());
            pipeline = Some(f.pipeline);
            severity = None;
        }
        if severity != Some(f.severity) {
            let _ = writeln!(out, "  {}", f.severity.as_str());
            severity = Some(f.severity);
        }
        let _ = writeln!(out, "    {}  {}", f.id, f.title);
        let _ = writeln!(out, "           at {}", f.locator);
        if !f.details.is_empty() {
            let _ = writeln!(out, "           {}", f.details);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::credscan::{Confidence, Locator};

    fn cred(path: &str, key: &str, kind: CredentialKind) -> Record {
        Record::Credential(CredentialFinding {
            origin: Origin::File,
            locator: Locator::File {
                path: path.into(),
                line: 1,
            },
            kind,
            matched_key: key.into(),
            matched_value: "v".into(),
            confidence: Confidence::Exact,
        })
    }

    fn port(p: u16, state: PortState) -> Record {
        Record::Port(PortResult {
            host: "h".into(),
            port: p,
            state,
            service: crate::recon::service_label(p).unwrap_or_default().into(),
        })
    }

    #[test]
    fn empty_report() {
        let r = aggregate(&[]).unwrap();
        assert_eq!(r.exit_code(), 0);
        let text = render(&r, Format::Text);
        assert!(text.starts_with("stackprobe findings report\n"));
        assert!(text.ends_with("no findings\n"));
        assert_eq!(render(&r, Format::Jsonl), "");
    }

    #[test]
    fn severities() {
        let recs = [
            cred("a", "admin_password", CredentialKind::ConfigCredential),
            cred("b", "OS_USERNAME", CredentialKind::EnvCredential),
            cred("c", "CERTIFICATE", CredentialKind::CertificateMaterial),
            port(80, PortState::Open),
            port(81, PortState::Closed),
        ];
        let r = aggregate_records(&recs);
        let sev: Vec<_> = r.findings.iter().map(|f| (f.pipeline, f.severity)).collect();
        assert_eq!(
            sev,
            [
                (Pipeline::Credscan, Severity::High),
                (Pipeline::Credscan, Severity::Medium),
                (Pipeline::Credscan, Severity::Low),
                (Pipeline::Recon, Severity::Info),
            ]
        );
        assert_eq!(r.exit_code(), 1);
        assert_eq!(r.findings[0].id, "F0001");
        let only_ports = aggregate_records(&recs[3..]);
        assert_eq!(only_ports.exit_code(), 0);
    }

    #[test]
    fn duplicates_and_order() {
        let a: Vec<Record> = vec![port(80, PortState::Open), cred("x", "password", CredentialKind::ConfigCredential)];
        let mut b = a.clone();
        b.reverse();
        b.extend(a.clone());
        assert_eq!(aggregate_records(&a), aggregate_records(&b));
    }

    #[test]
    fn records_round_trip_and_errors() {
        let mut buf = Vec::new();
        let rec = Record::Residue {
            adapter: "victim:h".into(),
            name: "A".repeat(255),
        };
        write_record(&mut buf, &rec).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("{\"type\":\"residue\""));
        assert_eq!(parse_records("f", &text).unwrap(), vec![rec]);
        let err = aggregate(&[("bad.jsonl".into(), "\n{\"type\":\"nope\"}\n".into())]).unwrap_err();
        assert!(matches!(err, ReportError::MalformedInput { line: 2, .. }));
    }

    #[test]
    fn text_groups() {
        let recs = [
            port(5000, PortState::Open),
            cred("a", "admin_password", CredentialKind::ConfigCredential),
        ];
        let text = render(&aggregate_records(&recs), Format::Text);
        let cred_at = text.find("[credscan]").unwrap();
        let recon_at = text.find("[recon]").unwrap();
        assert!(cred_at < recon_at);
        assert!(text.contains("port 5000 open (Keystone API)"));
    }
}
