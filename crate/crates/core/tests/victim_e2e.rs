mod common;

use common::{default_victim, login, logout, send, start};
use percent_encoding::{utf8_percent_encode, NON_ALPHANUMERIC};
use stackprobe_core::victim::{FaultRule, SessionTable, VictimConfig};

fn types(addr: std::net::SocketAddr) -> Vec<String> {
    serde_json::from_slice(&send(addr, "GET", "/types", &[], b"").body).unwrap()
}

fn create(addr: std::net::SocketAddr, name: &str) -> u16 {
    let body = form_urlencoded::Serializer::new(String::new()).append_pair("name", name).finish();
    send(
        addr,
        "POST",
        "/types",
        &[("Content-Type", "application/x-www-form-urlencoded")],
        body.as_bytes(),
    )
    .status()
    .unwrap()
}

fn delete(addr: std::net::SocketAddr, name: &str) -> (u16, String) {
    let target = format!("/types/{}", utf8_percent_encode(name, NON_ALPHANUMERIC));
    let m = send(addr, "DELETE", &target, &[], b"");
    (m.status().unwrap(), String::from_utf8_lossy(&m.body).into_owned())
}

#[test]
fn login_sets_cleartext_cookie() {
    let v = default_victim();
    let resp = send(
        v.addr(),
        "POST",
        "/login",
        &[("Content-Type", "application/x-www-form-urlencoded")],
        b"username=Test_User_1&password=password1",
    );
    assert_eq!(resp.status(), Some(200));
    let cookie = resp.header("set-cookie").unwrap();
    let token = cookie.strip_prefix("sessionid=").unwrap().split(';').next().unwrap();
    assert_eq!(token.len(), 32);
    assert!(token.chars().all(|c| c.is_ascii_hexdigit()));
    // same seed, same first token
    assert_eq!(token, SessionTable::new(0, true).issue("Test_User_1", 0));
}

#[test]
fn wrong_password_and_missing_session() {
    let v = default_victim();
    let resp = send(
        v.addr(),
        "POST",
        "/login",
        &[("Content-Type", "application/x-www-form-urlencoded")],
        b"username=Test_User_1&password=nope",
    );
    assert_eq!(resp.status(), Some(401));
    assert!(resp.header("set-cookie").is_none());
    assert_eq!(send(v.addr(), "GET", "/restricted/images", &[], b"").status(), Some(403));
}

#[test]
fn session_lifecycle() {
    let v = default_victim();
    let token = login(v.addr(), "admin", "adminpassword").unwrap();
    let cookie = format!("sessionid={token}");
    let page = send(v.addr(), "GET", "/restricted/images", &[("Cookie", &cookie)], b"");
    assert_eq!(page.status(), Some(200));
    assert!(String::from_utf8_lossy(&page.body).contains("Images & Snapshots [admin]"));
    assert_eq!(logout(v.addr(), &token).status(), Some(200));
    let after = send(v.addr(), "GET", "/restricted/images", &[("Cookie", &cookie)], b"");
    assert_eq!(after.status(), Some(403));

    let unpatched = start(VictimConfig {
        rotate_on_logout: false,
        ..VictimConfig::default()
    });
    let token = login(unpatched.addr(), "admin", "adminpassword").unwrap();
    logout(unpatched.addr(), &token);
    let cookie = format!("sessionid={token}");
    let after = send(unpatched.addr(), "GET", "/restricted/images", &[("Cookie", &cookie)], b"");
    assert_eq!(after.status(), Some(200));
}

#[test]
fn delete_bug_is_local_to_255() {
    let v = default_victim();
    for n in 250..=260 {
        let name = "A".repeat(n);
        assert_eq!(create(v.addr(), &name), 201);
        let (status, body) = delete(v.addr(), &name);
        assert_eq!(status, 200);
        assert_eq!(body.trim(), "deleted");
        assert_eq!(types(v.addr()).contains(&name), n == 255, "length {n}");
    }
    assert_eq!(delete(v.addr(), "never-created").0, 404);
    assert_eq!(create(v.addr(), &"A".repeat(255)), 409);
}

#[test]
fn patched_types_delete_everything() {
    let v = start(VictimConfig {
        type_delete_bug: false,
        ..VictimConfig::default()
    });
    let name = "/".repeat(255);
    create(v.addr(), &name);
    delete(v.addr(), &name);
    assert!(types(v.addr()).is_empty());
}

#[test]
fn uri_limit() {
    let v = default_victim();
    let at_limit = format!("/{}", "A".repeat(8191));
    assert_eq!(send(v.addr(), "GET", &at_limit, &[], b"").status(), Some(404));
    let over = format!("/{}", "A".repeat(8192));
    assert_eq!(send(v.addr(), "GET", &over, &[], b"").status(), Some(414));
}

#[test]
fn fault_rule_boundary() {
    let v = start(VictimConfig {
        fault_rules: vec![FaultRule::new("Authorization", 1000, 500)],
        ..VictimConfig::default()
    });
    let long = "A".repeat(1024);
    assert_eq!(send(v.addr(), "GET", "/", &[("Authorization", &long)], b"").status(), Some(500));
    let short = "A".repeat(999);
    assert_eq!(send(v.addr(), "GET", "/", &[("Authorization", &short)], b"").status(), Some(200));
    let exact = "A".repeat(1000);
    assert_eq!(send(v.addr(), "GET", "/", &[("Authorization", &exact)], b"").status(), Some(200));

    let plain = default_victim();
    assert_eq!(send(plain.addr(), "GET", "/", &[("Authorization", &long)], b"").status(), Some(200));
}

#[test]
fn fault_rule_parsing() {
    let rule: FaultRule = "Authorization:1000:500".parse().unwrap();
    assert_eq!(rule, FaultRule::new("Authorization", 1000, 500));
    assert!("Authorization:x:500".parse::<FaultRule>().is_err());
    assert!("Authorization:1000".parse::<FaultRule>().is_err());
}
