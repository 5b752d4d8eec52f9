//! Emulated through-storage service.
//!
//! Requests reuse the control-plane envelope framing; the operation is the
//! envelope's `function_url` (`PUT`, `GET` or `LEDGER`).

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use tokio::io::BufReader;
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinSet;

use super::profile::StorageProfile;
use crate::controlplane::envelope::{read_envelope, write_envelope, InvocationEnvelope};
use crate::error::WireError;

pub const OP_PUT: &str = "PUT";
pub const OP_GET: &str = "GET";
pub const OP_LEDGER: &str = "LEDGER";
pub const KEY_HEADER: &str = "key";
pub const READS_HEADER: &str = "reads";
pub const SINCE_HEADER: &str = "since";
pub const STORE_STATUS_HEADER: &str = "x-store-status";
pub const STATUS_NOT_FOUND: &str = "not-found";
pub const STATUS_BAD_REQUEST: &str = "bad-request";

/// Largest object the service accepts in one request.
pub const MAX_OBJECT: usize = 1 << 30;

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs_f64()
}

/// Residency record for one stored object; survives the object's deletion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub key: String,
    pub bytes: u64,
    /// Unix seconds.
    pub stored_at: f64,
    pub last_read_at: Option<f64>,
    pub reads: u32,
    pub reads_remaining: Option<u32>,
}

impl LedgerEntry {
    /// Seconds between the put and the retrieval that exhausted the read
    /// count, or up to `now` while the object is still live.
    pub fn residency_secs(&self, now: f64) -> f64 {
        let end = match (self.reads_remaining, self.last_read_at) {
            (Some(0), Some(t)) => t,
            _ => now,
        };
        (end - self.stored_at).max(0.0)
    }
}

#[derive(Debug)]
struct StoredObject {
    payload: Bytes,
    reads_remaining: Option<u32>,
    ledger_index: usize,
}

#[derive(Debug, Default)]
struct ServiceState {
    objects: HashMap<String, StoredObject>,
    ledger: Vec<LedgerEntry>,
}

#[derive(Debug, Clone)]
struct Service {
    profile: StorageProfile,
    state: Arc<Mutex<ServiceState>>,
}

impl Service {
    fn put(&self, key: String, payload: Bytes, reads: Option<u32>) {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        let index = st.ledger.len();
        st.ledger.push(LedgerEntry {
            key: key.clone(),
            bytes: payload.len() as u64,
            stored_at: unix_now(),
            last_read_at: None,
            reads: 0,
            reads_remaining: reads,
        });
        // Last writer wins; the overwritten object's ledger record stays as is.
        st.objects.insert(key, StoredObject { payload, reads_remaining: reads, ledger_index: index });
    }

    fn get(&self, key: &str) -> Option<Bytes> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        let obj = st.objects.get_mut(key)?;
        let payload = obj.payload.clone();
        let index = obj.ledger_index;
        if let Some(r) = obj.reads_remaining.as_mut() {
            *r -= 1;
        }
        let remaining = obj.reads_remaining;
        if remaining == Some(0) {
            st.objects.remove(key);
        }
        let entry = &mut st.ledger[index];
        entry.last_read_at = Some(unix_now());
        entry.reads += 1;
        entry.reads_remaining = remaining;
        Some(payload)
    }

    fn ledger(&self, since: f64) -> Vec<LedgerEntry> {
        let st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        st.ledger.iter().filter(|e| e.stored_at >= since).cloned().collect()
    }

    async fn handle(&self, req: InvocationEnvelope) -> InvocationEnvelope {
        let bad = |req: &InvocationEnvelope, msg: &str| {
            InvocationEnvelope::new(req.function_url.clone(), msg.to_owned())
                .with_header(STORE_STATUS_HEADER, STATUS_BAD_REQUEST)
        };
        match req.function_url.as_str() {
            OP_PUT => {
                let Some(key) = req.header(KEY_HEADER).filter(|k| !k.is_empty()) else {
                    return bad(&req, "missing key");
                };
                let reads = match req.header(READS_HEADER).map(str::parse::<u32>) {
                    None => None,
                    Some(Ok(n)) if n > 0 => Some(n),
                    Some(_) => return bad(&req, "reads must be a positive integer"),
                };
                tokio::time::sleep(self.profile.service_time(req.inline_body.len())).await;
                self.put(key.to_owned(), req.inline_body.clone(), reads);
                req.reply(Bytes::new())
            }
            OP_GET => {
                let Some(key) = req.header(KEY_HEADER) else {
                    return bad(&req, "missing key");
                };
                match self.get(key) {
                    Some(payload) => {
                        tokio::time::sleep(self.profile.service_time(payload.len())).await;
                        req.reply(payload)
                    }
                    None => {
                        tokio::time::sleep(self.profile.per_op_latency).await;
                        req.reply(Bytes::new()).with_header(STORE_STATUS_HEADER, STATUS_NOT_FOUND)
                    }
                }
            }
            OP_LEDGER => {
                let since = req.header(SINCE_HEADER).and_then(|s| s.parse().ok()).unwrap_or(0.0);
                let body = serde_json::to_vec(&self.ledger(since)).expect("ledger serializes");
                req.reply(body)
            }
            other => bad(&req, &format!("unknown operation {other}")),
        }
    }
}

/// A running storage daemon.
pub struct StorageServer {
    local_addr: SocketAddr,
    profile: StorageProfile,
    accept: tokio::task::JoinHandle<()>,
}

impl StorageServer {
    pub async fn bind(addr: SocketAddr, profile: StorageProfile) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let local_addr = listener.local_addr()?;
        let service = Service { profile: profile.clone(), state: Arc::default() };
        let accept = tokio::spawn(accept_loop(listener, service));
        Ok(Self { local_addr, profile, accept })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn profile(&self) -> &StorageProfile {
        &self.profile
    }

    pub fn shutdown(&self) {
        self.accept.abort();
    }
}

impl Drop for StorageServer {
    fn drop(&mut self) {
        self.accept.abort();
    }
}

async fn accept_loop(listener: TcpListener, service: Service) {
    let mut conns = JoinSet::new();
    loop {
        tokio::select! {
            accepted = listener.accept() => {
                let Ok((stream, _)) = accepted else { continue };
                let service = service.clone();
                conns.spawn(async move {
                    let _ = serve_conn(stream, service).await;
                });
            }
            Some(_) = conns.join_next(), if !conns.is_empty() => {}
        }
    }
}

async fn serve_conn(stream: TcpStream, service: Service) -> Result<(), WireError> {
    stream.set_nodelay(true)?;
    let mut stream = BufReader::new(stream);
    loop {
        let req = match read_envelope(&mut stream, MAX_OBJECT + 64 * 1024).await {
            Ok(r) => r,
            Err(e) if e.is_disconnect() => return Ok(()),
            Err(e) => return Err(e),
        };
        let resp = service.handle(req).await;
        write_envelope(stream.get_mut(), &resp).await?;
    }
}
