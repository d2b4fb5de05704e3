//! `stackprobe`: command-line front end for the fuzzing, sidejacking,
//! credential-scanning and recon pipelines, plus the bundled victim.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use stackprobe_core::credscan::{self, ScanRuleSet};
use stackprobe_core::grammar::{parse_config, Defaults, FuzzConfig, Template};
use stackprobe_core::http::resolve;
use stackprobe_core::http_fuzz::{self, FuzzMode, HttpFuzzCampaign};
use stackprobe_core::payload::{emit_script, generate, plan};
use stackprobe_core::recon;
use stackprobe_core::report::{self, aggregate, aggregate_records, HijackPhase, Record};
use stackprobe_core::runner::{self, ExecOutcome, RateLimitPolicy, SweepItem};
use stackprobe_core::sidejack::{self, CaptureSource, LiveHarvest};
use stackprobe_core::victim::{self, FaultRule, VictimConfig};

/// Sweep bounds applied unless `--full` is given.
const TRUNCATED_CHARSET: usize = 2;
const TRUNCATED_MAX_LEN: usize = 300;

#[derive(Parser)]
#[command(name = "stackprobe", version, about = "Penetration-testing pipelines for cloud management stacks")]
struct Cli {
    /// Write results here instead of stdout.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Text)]
    format: OutputFormat,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Verb,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Text,
    Jsonl,
}

#[derive(Subcommand)]
enum Verb {
    /// Run the mock target service.
    Victim(VictimArgs),
    /// Expand fuzz configs into command sweeps and run them through an adapter.
    CmdFuzz(CmdFuzzArgs),
    /// Fuzz an HTTP server.
    HttpFuzz(HttpFuzzArgs),
    /// Harvest session cookies and replay them.
    #[command(subcommand)]
    Sidejack(SidejackVerb),
    /// Look for cleartext credentials.
    #[command(subcommand)]
    Credscan(CredscanVerb),
    /// TCP connect scan.
    Recon(ReconArgs),
    /// Merge pipeline record files into one findings report.
    Report(ReportArgs),
}

#[derive(Args)]
struct VictimArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: String,
    /// Keep honouring session tokens after logout.
    #[arg(long)]
    no_rotate: bool,
    /// element:threshold:status, repeatable.
    #[arg(long = "fault")]
    faults: Vec<FaultRule>,
    /// Write the credential-bearing filesystem fixture under this directory.
    #[arg(long)]
    seed_fs: Option<PathBuf>,
    /// Write a credential-free control tree under this directory.
    #[arg(long)]
    clean_fs: Option<PathBuf>,
    /// Exit after writing fixtures instead of serving.
    #[arg(long)]
    no_serve: bool,
    /// Answer 200 to everything not caught by a fault rule.
    #[arg(long)]
    always_ok: bool,
    /// Make 255-character volume types deletable.
    #[arg(long)]
    patched_types: bool,
    #[arg(long, default_value_t = victim::DEFAULT_URI_LIMIT)]
    uri_limit: usize,
    #[arg(long, default_value = victim::DEFAULT_COOKIE_NAME)]
    cookie_name: String,
    /// Chance of dropping each connection without answering.
    #[arg(long, default_value_t = 0.0)]
    drop_probability: f64,
}

#[derive(Args)]
struct CmdFuzzArgs {
    /// Block-based fuzz config; repeat to run several in sequence.
    #[arg(long = "config", required = true)]
    configs: Vec<PathBuf>,
    /// victim:<host:port> or exec:<template>
    #[arg(long)]
    adapter: Option<String>,
    /// Commands per second; 0 disables the limit.
    #[arg(long, default_value_t = 0)]
    rate: u32,
    /// Run the configured sweep without truncation.
    #[arg(long)]
    full: bool,
    /// Override the charset (characters of this string).
    #[arg(long)]
    charset: Option<String>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Skip fuzz strings shorter than this.
    #[arg(long, default_value_t = 1)]
    min_len: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Per-command timeout in seconds.
    #[arg(long, default_value_t = runner::DEFAULT_TIMEOUT.as_secs_f64())]
    timeout: f64,
    /// After the sweep, delete every accepted resource and check for survivors.
    #[arg(long)]
    cleanup: bool,
    #[arg(long, default_value = runner::DEFAULT_DELETE_TEMPLATE)]
    delete_template: String,
    /// Print the plan and exit.
    #[arg(long)]
    plan_only: bool,
    /// Write the expanded commands as a shell script and exit.
    #[arg(long)]
    emit_script: Option<PathBuf>,
}

#[derive(Args)]
struct HttpFuzzArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Bed)]
    mode: ModeArg,
    #[arg(short = 't', long)]
    target: String,
    #[arg(short = 'p', long, default_value_t = 80)]
    port: u16,
    /// Seconds between request starts.
    #[arg(short = 'o', long = "delay", default_value_t = 0.0)]
    delay: f64,
    #[arg(long, default_value_t = http_fuzz::SFUZZ_MAX_LEN)]
    max_len: usize,
    /// Restrict bed mode to these elements; repeatable.
    #[arg(long = "function")]
    functions: Vec<String>,
    #[arg(long, default_value_t = http_fuzz::DEFAULT_TIMEOUT.as_secs_f64())]
    timeout: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Bed,
    SfuzzBasic,
}

#[derive(Subcommand)]
enum SidejackVerb {
    /// Collect session cookies from a capture file or a live proxy tap.
    Harvest(HarvestArgs),
    /// Replay a stored session against a URL.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct HarvestArgs {
    #[arg(long, conflicts_with = "proxy", required_unless_present = "proxy")]
    capture: Option<PathBuf>,
    /// Listen address for the proxy tap.
    #[arg(long, requires = "upstream")]
    proxy: Option<String>,
    #[arg(long)]
    upstream: Option<String>,
    /// Stop the proxy after this many seconds (default: run until killed).
    #[arg(long)]
    run_for: Option<f64>,
    /// Also record proxied traffic to this capture file.
    #[arg(long)]
    capture_out: Option<PathBuf>,
    /// Session store to write (proxy mode appends as sessions arrive).
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long, default_value = victim::DEFAULT_COOKIE_NAME)]
    cookie_name: String,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    store: PathBuf,
    /// 1-based line of the store to use.
    #[arg(long, default_value_t = 1)]
    index: usize,
    #[arg(long)]
    url: String,
    /// Text that proves the restricted page was served.
    #[arg(long)]
    marker: String,
    #[arg(long, value_enum, default_value_t = PhaseArg::InSession)]
    phase: PhaseArg,
    #[arg(long, default_value_t = 10.0)]
    timeout: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    InSession,
    PostLogout,
}

#[derive(Subcommand)]
enum CredscanVerb {
    /// Scan a capture file.
    Wire {
        #[arg(long)]
        capture: PathBuf,
        #[command(flatten)]
        common: ScanCommon,
    },
    /// Scan a directory tree.
    Fs {
        #[arg(long)]
        root: PathBuf,
        #[command(flatten)]
        common: ScanCommon,
    },
}

#[derive(Args)]
struct ScanCommon {
    /// Rule file: one `kind pattern confidence` rule per line.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Keep matched values in the output.
    #[arg(long)]
    no_redact: bool,
}

#[derive(Args)]
struct ReconArgs {
    host: String,
    /// Comma-separated ports (default: the OpenStack port table).
    #[arg(long, value_delimiter = ',')]
    ports: Vec<u16>,
    #[arg(long, default_value_t = recon::DEFAULT_TIMEOUT.as_secs_f64())]
    timeout: f64,
    #[arg(long, default_value_t = recon::DEFAULT_WIDTH)]
    width: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// JSONL record files written by the other verbs.
    inputs: Vec<PathBuf>,
}

fn secs(s: f64) -> Result<Duration> {
    Duration::try_from_secs_f64(s).with_context(|| format!("invalid duration {s}"))
}

/// Where results go and in which shape.
struct Output {
    format: OutputFormat,
    sink: Box<dyn Write>,
}

impl Output {
    fn open(path: Option<&Path>, format: OutputFormat) -> Result<Self> {
        let sink: Box<dyn Write> = match path {
            Some(p) => Box::new(BufWriter::new(
                File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
            )),
            None => Box::new(io::stdout().lock()),
        };
        Ok(Output { format, sink })
    }

    /// Emits `records` as JSONL, or `text` in text mode, and returns the
    /// exit code implied by the records.
    fn finish(mut self, records: &[Record], text: &str) -> Result<u8> {
        match self.format {
            OutputFormat::Jsonl => {
                for r in records {
                    report::write_record(&mut self.sink, r)?;
                }
            }
            OutputFormat::Text => self.sink.write_all(text.as_bytes())?,
        }
        self.sink.flush()?;
        Ok(aggregate_records(records).exit_code() as u8)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    let out = || Output::open(cli.output.as_deref(), cli.format);
    match &cli.command {
        Verb::Victim(a) => run_victim(a, cli.seed),
        Verb::CmdFuzz(a) => run_cmd_fuzz(a, out),
        Verb::HttpFuzz(a) => run_http_fuzz(a, out()?),
        Verb::Sidejack(SidejackVerb::Harvest(a)) => run_harvest(a, out()?),
        Verb::Sidejack(SidejackVerb::Replay(a)) => run_replay(a, out()?),
        Verb::Credscan(v) => run_credscan(v, out()?),
        Verb::Recon(a) => run_recon(a, out()?),
        Verb::Report(a) => run_report(a, out()?),
    }
}

fn run_victim(a: &VictimArgs, seed: u64) -> Result<u8> {
    if let Some(dir) = &a.seed_fs {
        victim::seed_fixture(dir).with_context(|| format!("seeding {}", dir.display()))?;
        eprintln!("fixture written under {}", dir.display());
    }
    if let Some(dir) = &a.clean_fs {
        victim::seed_clean_tree(dir).with_context(|| format!("seeding {}", dir.display()))?;
        eprintln!("control tree written under {}", dir.display());
    }
    if a.no_serve {
        return Ok(0);
    }
    let config = VictimConfig {
        listen: a.listen.clone(),
        session_cookie_name: a.cookie_name.clone(),
        rotate_on_logout: !a.no_rotate,
        uri_length_limit: a.uri_limit,
        fault_rules: a.faults.clone(),
        seed,
        type_delete_bug: !a.patched_types,
        always_ok: a.always_ok,
        drop_probability: a.drop_probability,
        ..VictimConfig::default()
    };
    let handle = victim::serve(config)?;
    println!("victim listening on {}", handle.addr());
    io::stdout().flush()?;
    handle.wait();
    Ok(0)
}

fn load_config(path: &Path, a: &CmdFuzzArgs) -> Result<FuzzConfig> {
    let source = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let name = path.file_stem().map_or("config".into(), |s| s.to_string_lossy().into_owned());
    let config = parse_config(&name, &source, &Defaults::standard()).with_context(|| format!("{}", path.display()))?;
    let mut charset: Vec<char> = match &a.charset {
        Some(s) => s.chars().collect(),
        None => config.charset().to_vec(),
    };
    let mut max_len = a.max_len.unwrap_or(config.max_len());
    let executing = !a.plan_only && a.emit_script.is_none();
    if executing && !a.full {
        if charset.len() > TRUNCATED_CHARSET || max_len > TRUNCATED_MAX_LEN {
            log::warn!(
                "{name}: truncating sweep to {TRUNCATED_CHARSET} chars and length {TRUNCATED_MAX_LEN}; pass --full for the whole campaign"
            );
        }
        charset.truncate(TRUNCATED_CHARSET);
        max_len = max_len.min(TRUNCATED_MAX_LEN);
    }
    Ok(config.with_sweep(charset, max_len)?)
}

fn run_cmd_fuzz(a: &CmdFuzzArgs, out: impl Fn() -> Result<Output>) -> Result<u8> {
    let configs = a.configs.iter().map(|p| load_config(p, a)).collect::<Result<Vec<_>>>()?;
    if let Some(path) = &a.emit_script {
        let mut file = BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?);
        let mut total = 0;
        for c in &configs {
            total += emit_script(c, &mut file)?;
        }
        file.flush()?;
        eprintln!("{total} commands written to {}", path.display());
        return Ok(0);
    }
    let mut text = String::new();
    for c in &configs {
        let p = plan(c);
        text.push_str(&format!(
            "{}: {} test cases x {} chars x {} lengths = {} commands\n",
            c.name(),
            p.test_cases,
            p.charset_len,
            p.max_len,
            p.total_count
        ));
    }
    if configs.len() > 1 {
        let total = stackprobe_core::payload::campaign_total(&configs);
        text.push_str(&format!("campaign total: {total} commands\n"));
    }
    if a.plan_only {
        let mut o = out()?;
        o.sink.write_all(text.as_bytes())?;
        o.sink.flush()?;
        return Ok(0);
    }
    let Some(spec) = &a.adapter else {
        bail!("--adapter is required unless --plan-only or --emit-script is given");
    };
    let timeout = secs(a.timeout)?;
    let adapter = runner::parse_adapter(spec, timeout)?;
    let policy = RateLimitPolicy::per_second(a.rate);
    let delete_template = Template::parse(&a.delete_template);
    let mut records = Vec::new();
    for c in &configs {
        let label = format!("{} {}", adapter.name(), c.name());
        let items = generate(c)
            .enumerate()
            .filter(|(_, cmd)| cmd.length >= a.min_len)
            .map(|(i, cmd)| SweepItem::from_generated(i as u64, cmd));
        let recs = runner::run_sweep(items, adapter.as_ref(), policy, a.workers)?;
        text.push_str(&outcome_line(&label, &recs));
        records.extend(recs.iter().cloned().map(|record| Record::CmdRecord {
            adapter: label.clone(),
            record,
        }));
        if a.cleanup {
            let cleanup = runner::run_sweep(
                runner::cleanup_items(&recs, &delete_template).into_iter(),
                adapter.as_ref(),
                policy,
                a.workers,
            )?;
            text.push_str(&outcome_line(&format!("{label} cleanup"), &cleanup));
            let survivors = runner::residue_check(adapter.as_ref(), &runner::deleted_names(&cleanup))?;
            text.push_str(&format!("{label}: {} resources survived cleanup\n", survivors.len()));
            for name in &survivors {
                let first = name.chars().next().unwrap_or(' ');
                text.push_str(&format!("  {first:?} x {}\n", name.chars().count()));
            }
            records.extend(cleanup.into_iter().map(|record| Record::CmdRecord {
                adapter: format!("{label} cleanup"),
                record,
            }));
            records.extend(survivors.into_iter().map(|name| Record::Residue {
                adapter: label.clone(),
                name,
            }));
        }
    }
    out()?.finish(&records, &text)
}

fn outcome_line(label: &str, recs: &[runner::ExecutionRecord]) -> String {
    let count = |o: ExecOutcome| recs.iter().filter(|r| r.outcome == o).count();
    format!(
        "{label}: {} commands, {} accepted, {} rejected, {} error, {} timeout\n",
        recs.len(),
        count(ExecOutcome::Accepted),
        count(ExecOutcome::Rejected),
        count(ExecOutcome::Error),
        count(ExecOutcome::Timeout)
    )
}

fn run_http_fuzz(a: &HttpFuzzArgs, out: Output) -> Result<u8> {
    let mut campaign = match a.mode {
        ModeArg::Bed => HttpFuzzCampaign::bed(&a.target, a.port),
        ModeArg::SfuzzBasic => HttpFuzzCampaign::sfuzz_basic(&a.target, a.port),
    };
    campaign.delay = secs(a.delay)?;
    campaign.timeout = secs(a.timeout)?;
    campaign.max_payload_len = a.max_len;
    if !a.functions.is_empty() {
        campaign.functions = a.functions.clone();
    }
    let target = format!("{}:{}", a.target, a.port);
    let result = http_fuzz::run_campaign(&campaign, &mut |e| {
        log::info!("{} len={} -> {:?}", e.element, e.payload_len, e.status);
    })?;
    let mode = match campaign.mode {
        FuzzMode::Bed => "bed",
        FuzzMode::SfuzzBasic => "sfuzz-basic",
    };
    let mut text = format!("{mode} campaign against {target}: {} exchanges\n\n", result.exchanges.len());
    text.push_str(&result.counter.render_tree());
    let anomalies: Vec<_> = result
        .exchanges
        .iter()
        .filter(|e| http_fuzz::classify(e).is_anomaly())
        .collect();
    if !anomalies.is_empty() {
        text.push_str("\nanomalies:\n");
        for e in anomalies {
            text.push_str(&format!("  {} len={} -> {:?}\n", e.element, e.payload_len, e.status));
        }
    }
    let mut records: Vec<Record> = result
        .exchanges
        .into_iter()
        .map(|exchange| Record::HttpExchange {
            target: target.clone(),
            exchange,
        })
        .collect();
    records.push(Record::HttpCounter {
        target,
        counter: result.counter,
    });
    out.finish(&records, &text)
}

fn run_harvest(a: &HarvestArgs, out: Output) -> Result<u8> {
    let sessions = if let Some(path) = &a.capture {
        let sessions = sidejack::harvest(&CaptureSource::File(path.clone()), &a.cookie_name)?;
        if let Some(store) = &a.store {
            sidejack::save_session_store(store, &sessions)?;
        }
        sessions
    } else {
        let listen = a.proxy.as_deref().expect("clap enforces --proxy");
        let upstream: SocketAddr = resolve(a.upstream.as_deref().expect("clap enforces --upstream"))
            .context("cannot resolve upstream")?;
        let live = LiveHarvest::start(listen, upstream, &a.cookie_name, a.store.as_deref(), a.capture_out.as_deref())?;
        eprintln!("proxy tap on {} -> {upstream}", live.addr());
        match a.run_for {
            Some(s) => {
                std::thread::sleep(secs(s)?);
                live.stop()
            }
            None => {
                live.wait();
                Vec::new()
            }
        }
    };
    let mut text = format!("{} sessions\n", sessions.len());
    for s in &sessions {
        text.push_str(&format!(
            "{}  {}  {}={}  from {}\n",
            s.observed_at.format("%Y-%m-%dT%H:%M:%S%.3fZ"),
            s.url,
            s.cookie_name,
            s.cookie_value,
            s.source_client
        ));
    }
    let records: Vec<Record> = sessions.into_iter().map(Record::Session).collect();
    out.finish(&records, &text)
}

fn run_replay(a: &ReplayArgs, out: Output) -> Result<u8> {
    let sessions = sidejack::load_session_store(&a.store)?;
    let Some(session) = a.index.checked_sub(1).and_then(|i| sessions.get(i)) else {
        bail!("{} has {} sessions; index {} is out of range", a.store.display(), sessions.len(), a.index);
    };
    let attempt = sidejack::replay(session, &a.url, &a.marker, secs(a.timeout)?)?;
    let verdict = if attempt.success() { "SUCCEEDED" } else { "failed" };
    let text = format!(
        "hijack {verdict}: GET {} with {}={} -> status {}, marker {}\n",
        attempt.requested_url,
        session.cookie_name,
        session.cookie_value,
        attempt.status,
        if attempt.body_marker_found { "found" } else { "absent" }
    );
    let phase = match a.phase {
        PhaseArg::InSession => HijackPhase::InSession,
        PhaseArg::PostLogout => HijackPhase::PostLogout,
    };
    out.finish(&[Record::Hijack { phase, attempt }], &text)
}

fn run_credscan(v: &CredscanVerb, out: Output) -> Result<u8> {
    let common = match v {
        CredscanVerb::Wire { common, .. } | CredscanVerb::Fs { common, .. } => common,
    };
    let rules = match &common.rules {
        Some(p) => ScanRuleSet::load(p)?,
        None => ScanRuleSet::default(),
    };
    let (mut findings, warnings) = match v {
        CredscanVerb::Wire { capture, .. } => {
            let scan = credscan::scan_capture(capture, &rules)?;
            let w = if scan.warnings > 0 {
                vec![format!("{} malformed or non-HTTP regions skipped", scan.warnings)]
            } else {
                Vec::new()
            };
            (scan.findings, w)
        }
        CredscanVerb::Fs { root, .. } => {
            let scan = credscan::scan_tree(root, &rules)?;
            (scan.findings, scan.warnings)
        }
    };
    if !common.no_redact {
        findings = credscan::redact(&findings);
    }
    let mut text = format!("{} findings\n", findings.len());
    for f in &findings {
        text.push_str(&format!(
            "  {:<20} {} = {}  at {}\n",
            f.kind.as_str(),
            f.matched_key,
            f.matched_value,
            f.locator
        ));
    }
    for w in &warnings {
        log::warn!("{w}");
        text.push_str(&format!("warning: {w}\n"));
    }
    let records: Vec<Record> = findings.into_iter().map(Record::Credential).collect();
    out.finish(&records, &text)
}

fn run_recon(a: &ReconArgs, out: Output) -> Result<u8> {
    let ports = if a.ports.is_empty() {
        recon::default_ports()
    } else {
        a.ports.clone()
    };
    let result = recon::recon(&a.host, &ports, secs(a.timeout)?, a.width)?;
    let mut text = format!("{} ({})\n", result.host, result.address);
    for p in &result.ports {
        let state = match p.state {
            recon::PortState::Open => "open",
            recon::PortState::Closed => "closed",
            recon::PortState::Filtered => "filtered",
        };
        text.push_str(&format!("  {:>5}/tcp  {:<8}  {}\n", p.port, state, p.service));
    }
    let records: Vec<Record> = result.ports.into_iter().map(Record::Port).collect();
    out.finish(&records, &text)
}

fn run_report(a: &ReportArgs, mut out: Output) -> Result<u8> {
    let mut inputs = Vec::new();
    for path in &a.inputs {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        inputs.push((path.display().to_string(), text));
    }
    let report = aggregate(&inputs)?;
    let format = match out.format {
        OutputFormat::Text => report::Format::Text,
        OutputFormat::Jsonl => report::Format::Jsonl,
    };
    out.sink.write_all(report::render(&report, format).as_bytes())?;
    out.sink.flush()?;
    Ok(report.exit_code() as u8)
}
