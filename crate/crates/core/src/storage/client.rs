use std::net::SocketAddr;

use bytes::Bytes;
use tokio::io::BufReader;
use tokio::net::TcpStream;

use super::service::{
    LedgerEntry, KEY_HEADER, MAX_OBJECT, OP_GET, OP_LEDGER, OP_PUT, READS_HEADER, SINCE_HEADER, STATUS_NOT_FOUND, STORE_STATUS_HEADER,
};
use crate::controlplane::envelope::{read_envelope, write_envelope, InvocationEnvelope, ERROR_HEADER};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StorageError {
    #[error("key not found: {0}")]
    KeyNotFound(String),
    #[error("storage service unreachable: {0}")]
    Unreachable(String),
    #[error("storage protocol error: {0}")]
    Protocol(String),
}

/// Client for one storage daemon. Each operation uses its own connection.
#[derive(Debug, Clone)]
pub struct StorageClient {
    addr: SocketAddr,
}

impl StorageClient {
    pub fn new(addr: SocketAddr) -> Self {
        Self { addr }
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    async fn call(&self, req: InvocationEnvelope) -> Result<InvocationEnvelope, StorageError> {
        let stream = TcpStream::connect(self.addr)
            .await
            .map_err(|e| StorageError::Unreachable(format!("{}: {e}", self.addr)))?;
        let _ = stream.set_nodelay(true);
        let mut stream = BufReader::new(stream);
        write_envelope(stream.get_mut(), &req)
            .await
            .map_err(|e| StorageError::Unreachable(e.to_string()))?;
        let resp = read_envelope(&mut stream, MAX_OBJECT + 64 * 1024)
            .await
            .map_err(|e| StorageError::Protocol(e.to_string()))?;
        match resp.header(STORE_STATUS_HEADER) {
            None => Ok(resp),
            Some(STATUS_NOT_FOUND) => Err(StorageError::KeyNotFound(req.header(KEY_HEADER).unwrap_or_default().to_owned())),
            Some(other) => {
                let detail = match resp.header(ERROR_HEADER) {
                    Some(msg) => msg.to_owned(),
                    None => String::from_utf8_lossy(&resp.inline_body).into_owned(),
                };
                Err(StorageError::Protocol(format!("{other}: {detail}")))
            }
        }
    }

    /// Stores `payload` under `key`. With `reads` set, the service drops the
    /// object after that many gets (minimal-residency accounting).
    pub async fn store_put(&self, key: &str, payload: Bytes, reads: Option<u32>) -> Result<(), StorageError> {
        if key.is_empty() {
            return Err(StorageError::Protocol("key must be nonempty".into()));
        }
        let mut req = InvocationEnvelope::new(OP_PUT, payload).with_header(KEY_HEADER, key);
        if let Some(n) = reads {
            req = req.with_header(READS_HEADER, n.to_string());
        }
        self.call(req).await.map(|_| ())
    }

    pub async fn store_get(&self, key: &str) -> Result<Bytes, StorageError> {
        let req = InvocationEnvelope::new(OP_GET, Bytes::new()).with_header(KEY_HEADER, key);
        Ok(self.call(req).await?.inline_body)
    }

    /// Ledger entries for objects stored at or after `since` (unix seconds).
    pub async fn ledger(&self, since: f64) -> Result<Vec<LedgerEntry>, StorageError> {
        let req = InvocationEnvelope::new(OP_LEDGER, Bytes::new()).with_header(SINCE_HEADER, since.to_string());
        let resp = self.call(req).await?;
        serde_json::from_slice(&resp.inline_body).map_err(|e| StorageError::Protocol(e.to_string()))
    }
}
