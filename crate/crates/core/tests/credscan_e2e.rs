mod common;

use std::collections::BTreeSet;
use std::path::Path;

use common::{capture_through_proxy, default_victim, login};
use stackprobe_core::credscan::{
    redact, rescan, scan_capture, scan_tree, CredentialKind, CredscanError, Locator, Origin, ScanRuleSet,
};
use stackprobe_core::victim::{seed_clean_tree, seed_fixture, FIXTURE_PATHS};

fn paths_hit(root: &Path, findings: &[stackprobe_core::credscan::CredentialFinding]) -> BTreeSet<String> {
    findings
        .iter()
        .filter_map(|f| match &f.locator {
            Locator::File { path, .. } => Some(
                Path::new(path)
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .replace('\\', "/"),
            ),
            _ => None,
        })
        .collect()
}

#[test]
fn fixture_paths_all_found() {
    let dir = tempfile::tempdir().unwrap();
    seed_fixture(dir.path()).unwrap();
    let scan = scan_tree(dir.path(), &ScanRuleSet::default()).unwrap();
    assert!(scan.warnings.is_empty());
    assert!(scan.findings.len() >= 7);
    let expected: BTreeSet<String> = FIXTURE_PATHS.iter().map(|s| s.to_string()).collect();
    assert_eq!(paths_hit(dir.path(), &scan.findings), expected);

    let keys: BTreeSet<&str> = scan.findings.iter().map(|f| f.matched_key.as_str()).collect();
    for k in ["OS_TENANT_ID", "OS_TENANT_NAME", "OS_USERNAME", "OS_AUTH_URL", "admin_password"] {
        assert!(keys.contains(k), "{k} missing");
    }
    let pem = scan
        .findings
        .iter()
        .filter(|f| f.kind == CredentialKind::CertificateMaterial)
        .count();
    assert_eq!(pem, 4);
}

#[test]
fn sorted_by_path_then_line() {
    let dir = tempfile::tempdir().unwrap();
    seed_fixture(dir.path()).unwrap();
    let findings = scan_tree(dir.path(), &ScanRuleSet::default()).unwrap().findings;
    let keys: Vec<(String, usize)> = findings
        .iter()
        .map(|f| match &f.locator {
            Locator::File { path, line } => (path.clone(), *line),
            _ => unreachable!(),
        })
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn clean_tree_empty_dir_and_binary() {
    let rules = ScanRuleSet::default();
    let clean = tempfile::tempdir().unwrap();
    seed_clean_tree(clean.path()).unwrap();
    let scan = scan_tree(clean.path(), &rules).unwrap();
    assert!(scan.findings.is_empty(), "{:?}", scan.findings);
    assert!(scan.warnings.is_empty());

    let empty = tempfile::tempdir().unwrap();
    assert!(scan_tree(empty.path(), &rules).unwrap().findings.is_empty());

    let bin = tempfile::tempdir().unwrap();
    std::fs::write(bin.path().join("blob"), [0u8, 1, 2, 0, b'p', b'a', b's', b's']).unwrap();
    let scan = scan_tree(bin.path(), &rules).unwrap();
    assert!(scan.findings.is_empty());
    assert!(scan.warnings.is_empty());

    assert!(matches!(
        scan_tree(&empty.path().join("absent"), &rules),
        Err(CredscanError::RootMissing(_))
    ));
}

#[cfg(unix)]
#[test]
fn symlinks_not_followed() {
    let outside = tempfile::tempdir().unwrap();
    seed_fixture(outside.path()).unwrap();
    let root = tempfile::tempdir().unwrap();
    std::os::unix::fs::symlink(outside.path(), root.path().join("link")).unwrap();
    assert!(scan_tree(root.path(), &ScanRuleSet::default()).unwrap().findings.is_empty());
}

#[test]
fn tree_rescan_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    seed_fixture(dir.path()).unwrap();
    let rules = ScanRuleSet::default();
    let first = scan_tree(dir.path(), &rules).unwrap().findings;
    let second = scan_tree(dir.path(), &rules).unwrap().findings;
    assert_eq!(first, second);
    for f in &first {
        assert_eq!(rescan(f, &rules).as_ref(), Some(f));
    }
}

#[test]
fn wire_logins_detected_and_rescannable() {
    let v = default_victim();
    let bytes = capture_through_proxy(v.addr(), |tap| {
        login(tap, "Test_User_1", "password1").unwrap();
        login(tap, "admin", "adminpassword").unwrap();
    });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("logins.spc");
    std::fs::write(&path, &bytes).unwrap();
    let rules = ScanRuleSet::default();
    let scan = scan_capture(&path, &rules).unwrap();
    assert_eq!(scan.warnings, 0);
    let pairs: Vec<(&str, &str)> = scan
        .findings
        .iter()
        .map(|f| (f.matched_key.as_str(), f.matched_value.as_str()))
        .collect();
    assert_eq!(
        pairs,
        [
            ("username:password", "Test_User_1:password1"),
            ("username:password", "admin:adminpassword")
        ]
    );
    for f in &scan.findings {
        assert_eq!(f.origin, Origin::Wire);
        assert_eq!(rescan(f, &rules).as_ref(), Some(f));
    }
    let masked = redact(&scan.findings);
    assert_eq!(masked[0].matched_value, "T***");
    assert_eq!(redact(&masked), masked);
    assert_eq!(masked[0].locator, scan.findings[0].locator);
}

#[test]
fn custom_rules_change_results() {
    let dir = tempfile::tempdir().unwrap();
    seed_fixture(dir.path()).unwrap();
    let rules = ScanRuleSet::parse("config_credential rabbit_password exact\n").unwrap();
    let scan = scan_tree(dir.path(), &rules).unwrap();
    assert_eq!(scan.findings.len(), 1);
    assert_eq!(scan.findings[0].matched_key, "RABBIT_PASSWORD");
}
