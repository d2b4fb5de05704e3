#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use stackprobe_core::capture::{CaptureRecorder, FrameSink, ProxyTap};
use stackprobe_core::http::{build_request, round_trip, Message, RoundTrip};
use stackprobe_core::victim::{serve, VictimConfig, VictimHandle};

pub const TIMEOUT: Duration = Duration::from_secs(10);

pub fn start(config: VictimConfig) -> VictimHandle {
    serve(config).expect("victim binds")
}

pub fn default_victim() -> VictimHandle {
    start(VictimConfig::default())
}

pub fn send(addr: SocketAddr, method: &str, target: &str, headers: &[(&str, &str)], body: &[u8]) -> Message {
    let host = addr.to_string();
    let mut all = vec![("Host", host.as_str())];
    all.extend_from_slice(headers);
    let req = build_request(method, target, &all, body);
    match round_trip(addr, &req, TIMEOUT).expect("connect") {
        RoundTrip::Response { message, .. } => message,
        other => panic!("no response: {other:?}"),
    }
}

pub fn login(addr: SocketAddr, user: &str, password: &str) -> Option<String> {
    let body = format!("username={user}&password={password}");
    let resp = send(
        addr,
        "POST",
        "/login",
        &[("Content-Type", "application/x-www-form-urlencoded")],
        body.as_bytes(),
    );
    let cookie = resp.header("set-cookie")?;
    let value = cookie.split(';').next()?.split_once('=')?.1;
    Some(value.to_string())
}

pub fn logout(addr: SocketAddr, token: &str) -> Message {
    let cookie = format!("sessionid={token}");
    send(addr, "POST", "/logout", &[("Cookie", &cookie)], b"")
}

/// Runs `f` against a proxy tap in front of `upstream` and returns the
/// capture file bytes.
pub fn capture_through_proxy(upstream: SocketAddr, f: impl FnOnce(SocketAddr)) -> Vec<u8> {
    let recorder = Arc::new(CaptureRecorder::new(Vec::new()).unwrap());
    let sink: Arc<dyn FrameSink> = recorder.clone();
    let tap = ProxyTap::start("127.0.0.1:0", upstream, sink).unwrap();
    f(tap.addr());
    tap.shutdown();
    recorder.snapshot()
}
