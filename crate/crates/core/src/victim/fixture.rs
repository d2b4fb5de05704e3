//! Filesystem fixture mirroring the credential-bearing files found on the
//! compromised controller node. Contents are synthetic but representative.

use std::fs;
use std::io;
use std::path::Path;

/// Paths (relative to the fixture root) that hold exposed credentials.
pub const FIXTURE_PATHS: [&str; 7] = [
    "devstack/localrc",
    "etc/nova/api-paste.ini",
    "etc/cinder/api-paste.ini",
    "var/cache/cinder/cacert.pem",
    "var/cache/cinder/signing_cert.pem",
    "var/cache/glance/registry/cacert.pem",
    "var/cache/glance/registry/signing_cert.pem",
];

const LOCALRC: &str = "\
# devstack local configuration
HOST_IP=192.168.1.10
ADMIN_PASSWORD=adminpassword
MYSQL_PASSWORD=stackdb
RABBIT_PASSWORD=stackqueue
SERVICE_PASSWORD=adminpassword
SERVICE_TOKEN=a682f596-76f3-11e3-b3b2-e716f9080d50
export OS_TENANT_ID=84a0eb4cab441ab9325c42f0c6f57a5
export OS_TENANT_NAME=\"admin\"
export OS_USERNAME=admin
export OS_AUTH_URL=http://192.168.1.10:5000/v2.0
ENABLED_SERVICES=g-api,g-reg,key,n-api,n-crt,n-obj,n-cpu,n-net,n-sch,horizon,mysql,rabbit,c-api,c-vol,c-sch
";

fn api_paste(service: &str, extra: &str) -> String {
    format!(
        "\
[composite:osapi_{service}]
use = call:{service}.api:root_app_factory
/v1 = {service}api_v1

{extra}[filter:authtoken]
paste.filter_factory = keystone.middleware.auth_token:filter_factory
service_protocol = http
service_host = 192.168.1.10
service_port = 5000
auth_host = 192.168.1.10
auth_port = 35357
auth_protocol = http
admin_tenant_name = service
admin_user = {service}
admin_password = adminpassword
signing_dir = /var/cache/{service}
"
    )
}

const NOVA_RATELIMIT: &str = "\
[filter:ratelimit]
paste.filter_factory = nova.api.openstack.compute.limits:RateLimitingMiddleware.factory

";

fn pem(label: &str, subject: &str) -> String {
    // Not a real certificate: just PEM framing around deterministic filler.
    let filler: String = subject
        .bytes()
        .cycle()
        .take(192)
        .map(|b| char::from(b'A' + b % 26))
        .collect();
    let body: Vec<&str> = filler
        .as_bytes()
        .chunks(64)
        .map(|c| std::str::from_utf8(c).unwrap())
        .collect();
    format!(
        "-----BEGIN {label}-----\n{}\n-----END {label}-----\n",
        body.join("\n")
    )
}

/// Writes the seven credential-bearing files under `root`.
pub fn seed_fixture(root: &Path) -> io::Result<()> {
    let contents = [
        LOCALRC.to_string(),
        api_paste("nova", NOVA_RATELIMIT),
        api_paste("cinder", ""),
        pem("CERTIFICATE", "cinder-ca"),
        pem("CERTIFICATE", "cinder-signing"),
        pem("CERTIFICATE", "glance-registry-ca"),
        pem("CERTIFICATE", "glance-registry-signing"),
    ];
    for (rel, body) in FIXTURE_PATHS.iter().zip(contents) {
        write(root, rel, body.as_bytes())?;
    }
    Ok(())
}

/// Writes a tree of ordinary configuration with nothing sensitive in it.
pub fn seed_clean_tree(root: &Path) -> io::Result<()> {
    write(root, "README", b"Controller node notes.\nNothing to see here.\n")?;
    write(
        root,
        "etc/glance/glance-api.conf",
        b"[DEFAULT]\nbind_host = 0.0.0.0\nbind_port = 9292\nlog_file = /var/log/glance/api.log\n",
    )?;
    write(
        root,
        "etc/nova/logging.conf",
        b"[loggers]\nkeys = root, nova\n\n[logger_root]\nlevel = WARNING\n",
    )?;
    write(root, "bin/start.sh", b"#!/bin/sh\nexec nova-api --config-file /etc/nova/nova.conf\n")?;
    write(root, "var/lib/blob.bin", &[0u8, 159, 146, 150, 0, 1, 2, 3, 255, 254])?;
    Ok(())
}

fn write(root: &Path, rel: &str, body: &[u8]) -> io::Result<()> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, body)
}
