mod common;

use std::io::{Read, Write};
use std::net::TcpListener;
use std::time::{Duration, Instant};

use common::{default_victim, start, TIMEOUT};
use stackprobe_core::runner::{
    cleanup_items, deleted_names, residue_check, run_sweep, Adapter, ExecAdapter, ExecOutcome, ExecutionRecord,
    RateLimitPolicy, RunnerError, SweepItem, VictimAdapter, DEFAULT_DELETE_TEMPLATE,
};
use stackprobe_core::victim::VictimConfig;
use stackprobe_core::{generate, parse_config, Defaults, Template};

fn items(src: &str, charset: Vec<char>, max_len: usize) -> Vec<SweepItem> {
    let cfg = parse_config("t", src, &Defaults { charset, max_len }).unwrap();
    generate(&cfg)
        .enumerate()
        .map(|(i, c)| SweepItem::from_generated(i as u64, c))
        .collect()
}

fn plain(commands: &[&str]) -> Vec<SweepItem> {
    commands
        .iter()
        .enumerate()
        .map(|(i, c)| SweepItem {
            index: i as u64,
            case_index: 1,
            ch: 'A',
            length: 1,
            command: c.to_string(),
        })
        .collect()
}

/// Full create, cleanup, residue cycle; returns the residue.
fn cycle(adapter: &dyn Adapter, sweep: Vec<SweepItem>, width: usize) -> (Vec<ExecutionRecord>, Vec<String>) {
    let records = run_sweep(sweep.into_iter(), adapter, RateLimitPolicy::disabled(), width).unwrap();
    let template = Template::parse(DEFAULT_DELETE_TEMPLATE);
    let cleanup = run_sweep(
        cleanup_items(&records, &template).into_iter(),
        adapter,
        RateLimitPolicy::disabled(),
        width,
    )
    .unwrap();
    let residue = residue_check(adapter, &deleted_names(&cleanup)).unwrap();
    (records, residue)
}

const CREATE: &str = "cinder type-create FUZZ\n--\n";

#[test]
fn sweep_creates_types() {
    let v = default_victim();
    let adapter = VictimAdapter::new(&v.addr().to_string(), TIMEOUT);
    let records = run_sweep(
        plain(&["cinder type-create a", "cinder type-create b", "cinder type-create c", "cinder type-create d"])
            .into_iter(),
        &adapter,
        RateLimitPolicy::disabled(),
        2,
    )
    .unwrap();
    assert!(records.iter().all(|r| r.outcome == ExecOutcome::Accepted));
    assert_eq!(adapter.list_names().unwrap(), ["a", "b", "c", "d"]);
    let unsupported = adapter.execute("nova list");
    assert_eq!(unsupported.outcome, ExecOutcome::Rejected);
}

#[test]
fn residue_is_exactly_the_255_name() {
    let v = default_victim();
    let adapter = VictimAdapter::new(&v.addr().to_string(), TIMEOUT);
    let sweep: Vec<_> = items(CREATE, vec!['A'], 260)
        .into_iter()
        .filter(|i| i.length >= 250)
        .collect();
    assert_eq!(sweep.len(), 11);
    let (records, residue) = cycle(&adapter, sweep, 4);
    assert!(records.iter().all(|r| r.outcome == ExecOutcome::Accepted));
    assert_eq!(residue, ["A".repeat(255)]);

    let patched = start(VictimConfig {
        type_delete_bug: false,
        ..VictimConfig::default()
    });
    let adapter = VictimAdapter::new(&patched.addr().to_string(), TIMEOUT);
    let sweep: Vec<_> = items(CREATE, vec!['A'], 260)
        .into_iter()
        .filter(|i| i.length >= 250)
        .collect();
    assert!(cycle(&adapter, sweep, 4).1.is_empty());
}

#[test]
fn full_length_sweep_leaves_only_255() {
    let v = default_victim();
    let adapter = VictimAdapter::new(&v.addr().to_string(), TIMEOUT);
    let (records, residue) = cycle(&adapter, items(CREATE, vec!['A'], 1025), 8);
    assert_eq!(records.len(), 1025);
    assert_eq!(residue.len(), 1);
    assert!(residue.iter().all(|n| n.len() == 255));
    assert_eq!(adapter.list_names().unwrap(), residue);
}

#[test]
fn width_does_not_change_results() {
    let strip = |rs: Vec<ExecutionRecord>| -> Vec<_> { rs.into_iter().map(|r| (r.index, r.command, r.outcome)).collect() };
    let mut runs = Vec::new();
    for width in [1, 3, 8] {
        let v = default_victim();
        let adapter = VictimAdapter::new(&v.addr().to_string(), TIMEOUT);
        let (records, residue) = cycle(&adapter, items(CREATE, vec!['A', 'b'], 40), width);
        runs.push((strip(records), residue));
    }
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[1], runs[2]);
}

#[test]
fn rate_limit_holds_across_workers() {
    let v = default_victim();
    let adapter = VictimAdapter::new(&v.addr().to_string(), TIMEOUT);
    let commands: Vec<String> = (0..25).map(|i| format!("cinder type-create t{i}")).collect();
    let refs: Vec<&str> = commands.iter().map(String::as_str).collect();
    let t0 = Instant::now();
    let records = run_sweep(plain(&refs).into_iter(), &adapter, RateLimitPolicy::per_second(10), 4).unwrap();
    // 10 in the first window, 10 in the second, 5 in the third
    assert!(t0.elapsed() >= Duration::from_millis(1950), "{:?}", t0.elapsed());
    assert_eq!(records.len(), 25);
}

#[test]
fn garbage_target_is_contained() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for (n, stream) in listener.incoming().enumerate() {
            let Ok(mut s) = stream else { continue };
            let mut buf = [0u8; 4096];
            let _ = s.read(&mut buf);
            if n % 2 == 0 {
                let _ = s.write_all(b"\x00\x01garbage\r\n\r\n");
            }
        }
    });
    let adapter = VictimAdapter::new(&addr.to_string(), Duration::from_secs(2));
    let records = run_sweep(
        plain(&["cinder type-create a", "cinder type-create b", "cinder type-create c", "cinder type-create d"])
            .into_iter(),
        &adapter,
        RateLimitPolicy::disabled(),
        1,
    )
    .unwrap();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| r.outcome == ExecOutcome::Error), "{records:?}");
    assert!(matches!(adapter.list_names(), Err(RunnerError::AdapterUnavailable { .. })));
}

#[test]
fn unreachable_adapter_fails_before_sweep() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let adapter = VictimAdapter::new(&format!("127.0.0.1:{port}"), Duration::from_secs(1));
    let r = run_sweep(plain(&["x"]).into_iter(), &adapter, RateLimitPolicy::disabled(), 1);
    assert!(matches!(r, Err(RunnerError::AdapterUnavailable { .. })));
}

#[cfg(unix)]
#[test]
fn exec_adapter_outcomes() {
    let ok = ExecAdapter::new("true", TIMEOUT);
    assert_eq!(ok.execute("anything at all").outcome, ExecOutcome::Accepted);
    let fail = ExecAdapter::new("false", TIMEOUT);
    assert_eq!(fail.execute("x").outcome, ExecOutcome::Rejected);
    let missing = ExecAdapter::new("/nonexistent/binary", TIMEOUT);
    assert_eq!(missing.execute("x").outcome, ExecOutcome::Error);
    let slow = ExecAdapter::new("sleep {}", Duration::from_millis(200));
    let t0 = Instant::now();
    assert_eq!(slow.execute("5").outcome, ExecOutcome::Timeout);
    assert!(t0.elapsed() < Duration::from_secs(4));
    // metacharacters reach argv untouched
    let echo = ExecAdapter::new("echo {}", TIMEOUT);
    assert_eq!(echo.argv("a;b $(c)"), ["echo", "a;b", "$(c)"]);
}
