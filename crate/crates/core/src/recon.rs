//! TCP connect port scan with the OpenStack service label table.

use std::net::{IpAddr, SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Port/label pairs as printed in the OpenStack port table, in table order.
/// 3260 is conventionally iSCSI; the label is kept as printed.
pub const SERVICE_TABLE: [(u16, &str); 16] = [
    (80, "HTTP"),
    (3260, "Glance API"),
    (3306, "MySQL"),
    (3333, "Nova API"),
    (4369, "EPMD"),
    (5000, "Keystone API"),
    (5672, "AMQP"),
    (5800, "X11VNC"),
    (5900, "VNC"),
    (8773, "EC2 API"),
    (8774, "EC2 API"),
    (8775, "Nova API"),
    (8776, "Nova API"),
    (9191, "Glance API"),
    (9292, "Glance API"),
    (35357, "Keystone API"),
];

pub const DEFAULT_WIDTH: usize = 8;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(2);

pub fn default_ports() -> Vec<u16> {
    SERVICE_TABLE.iter().map(|(p, _)| *p).collect()
}

pub fn service_label(port: u16) -> Option<&'static str> {
    SERVICE_TABLE.iter().find(|(p, _)| *p == port).map(|(_, l)| *l)
}

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("cannot resolve host {host}: {detail}")]
    HostUnresolvable { host: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortState {
    Open,
    Closed,
    Filtered,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortResult {
    pub host: String,
    pub port: u16,
    pub state: PortState,
    /// Empty for ports outside the table.
    pub service: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortScanResult {
    pub host: String,
    pub address: IpAddr,
    pub ports: Vec<PortResult>,
}

impl PortScanResult {
    pub fn open(&self) -> impl Iterator<Item = &PortResult> {
        self.ports.iter().filter(|p| p.state == PortState::Open)
    }
}

fn probe(addr: SocketAddr, timeout: Duration) -> PortState {
    match TcpStream::connect_timeout(&addr, timeout) {
        Ok(_) => PortState::Open,
        Err(e) if e.kind() == std::io::ErrorKind::ConnectionRefused => PortState::Closed,
        Err(_) => PortState::Filtered,
    }
}

/// Connect-scans `ports` on `host`, `width` probes at a time. Results keep
/// the order of `ports`.
pub fn recon(host: &str, ports: &[u16], timeout: Duration, width: usize) -> Result<PortScanResult, ReconError> {
    let address = (host, 0)
        .to_socket_addrs()
        .map_err(|e| e.to_string())
        .and_then(|mut it| it.next().ok_or_else(|| "no addresses".to_string()))
        .map_err(|detail| ReconError::HostUnresolvable {
            host: host.to_string(),
            detail,
        })?
        .ip();
    let states = Mutex::new(vec![PortState::Filtered; ports.len()]);
    let next = Mutex::new(0usize);
    thread::scope(|s| {
        for _ in 0..width.clamp(1, ports.len().max(1)) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    if *n >= ports.len() {
                        break;
                    }
                    *n += 1;
                    *n - 1
                };
                let state = probe(SocketAddr::new(address, ports[i]), timeout);
                states.lock().unwrap()[i] = state;
            });
        }
    });
    let ports = ports
        .iter()
        .zip(states.into_inner().unwrap())
        .map(|(&port, state)| PortResult {
            host: host.to_string(),
            port,
            state,
            service: service_label(port).unwrap_or_default().to_string(),
        })
        .collect();
    Ok(PortScanResult {
        host: host.to_string(),
        address,
        ports,
    })
}
