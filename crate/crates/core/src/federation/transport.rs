//! How signed requests reach another ASN.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Weak};
use std::time::Duration;

use parking_lot::{Mutex, RwLock};

use super::wire::{Method, WireRequest, WireResponse, ORIGIN_HEADER, SIGNATURE_HEADER};
use crate::ids::AsnId;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("endpoint {0} unreachable: {1}")]
    Unreachable(String, String),
}

pub trait Transport: Send + Sync {
    fn send(&self, endpoint: &str, req: &WireRequest) -> Result<WireResponse, TransportError>;
}

/// Server side of the remote interface.
pub trait RemoteHandler: Send + Sync {
    fn handle_remote(&self, req: WireRequest) -> WireResponse;
}

/// In-process network connecting nodes registered under an endpoint name.
/// Supports injected latency, nodes that are down and a request log.
#[derive(Default)]
pub struct LocalNetwork {
    nodes: RwLock<HashMap<String, Weak<dyn RemoteHandler>>>,
    down: RwLock<HashSet<String>>,
    default_latency: RwLock<Duration>,
    latency: RwLock<HashMap<(AsnId, String), Duration>>,
    recording: RwLock<bool>,
    log: Mutex<Vec<(String, WireRequest)>>,
}

impl LocalNetwork {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn register(&self, endpoint: impl Into<String>, node: Weak<dyn RemoteHandler>) {
        self.nodes.write().insert(endpoint.into(), node);
    }

    pub fn set_down(&self, endpoint: &str, down: bool) {
        let mut d = self.down.write();
        if down {
            d.insert(endpoint.to_string());
        } else {
            d.remove(endpoint);
        }
    }

    /// Delay applied to every request without a specific entry.
    pub fn set_default_latency(&self, d: Duration) {
        *self.default_latency.write() = d;
    }

    pub fn set_latency(&self, from: &AsnId, to_endpoint: &str, d: Duration) {
        self.latency.write().insert((from.clone(), to_endpoint.to_string()), d);
    }

    /// Keep a copy of every delivered request (for replay in tests).
    pub fn set_recording(&self, on: bool) {
        *self.recording.write() = on;
    }

    pub fn take_log(&self) -> Vec<(String, WireRequest)> {
        std::mem::take(&mut *self.log.lock())
    }

    fn latency_for(&self, from: &AsnId, to: &str) -> Duration {
        self.latency
            .read()
            .get(&(from.clone(), to.to_string()))
            .copied()
            .unwrap_or_else(|| *self.default_latency.read())
    }
}

impl Transport for LocalNetwork {
    fn send(&self, endpoint: &str, req: &WireRequest) -> Result<WireResponse, TransportError> {
        let delay = self.latency_for(&req.origin, endpoint);
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
        if self.down.read().contains(endpoint) {
            return Err(TransportError::Unreachable(endpoint.into(), "node is down".into()));
        }
        let node = self.nodes.read().get(endpoint).and_then(Weak::upgrade);
        let Some(node) = node else {
            return Err(TransportError::Unreachable(endpoint.into(), "no such endpoint".into()));
        };
        if *self.recording.read() {
            self.log.lock().push((endpoint.to_string(), req.clone()));
        }
        Ok(node.handle_remote(req.clone()))
    }
}

/// Plain HTTP transport; `endpoint` is a base URL such as `http://10.0.0.2:7000`.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let client = reqwest::blocking::Client::builder().timeout(timeout).build().expect("http client builds");
        Self { client }
    }
}

impl Transport for HttpTransport {
    fn send(&self, endpoint: &str, req: &WireRequest) -> Result<WireResponse, TransportError> {
        let url = format!("{}{}", endpoint.trim_end_matches('/'), req.path);
        let builder = match req.method {
            Method::Get => self.client.get(&url),
            Method::Post => self.client.post(&url).header("content-type", "application/json").body(req.body.clone()),
        };
        let resp = builder
            .header(ORIGIN_HEADER, req.origin.as_str())
            .header(SIGNATURE_HEADER, &req.signature)
            .send()
            .map_err(|e| TransportError::Unreachable(endpoint.into(), e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.bytes().map_err(|e| TransportError::Unreachable(endpoint.into(), e.to_string()))?.to_vec();
        Ok(WireResponse { status, body })
    }
}
