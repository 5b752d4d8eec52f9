//! Consumer side of the pull protocol.
//!
//! A reader task moves frames from the socket into a channel sized to the
//! configured buffer depth. It only reads the next frame once the channel has
//! room, so a slow consumer stalls the socket and TCP windowing paces the
//! producer. No application-level acknowledgements are exchanged.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::sync::mpsc;

use super::config::TransferConfig;
use super::frame::{self, Chunk, Frame, CHALLENGE_LEN, HANDSHAKE_LABEL};
use crate::error::WireError;
use crate::refcrypto::{PlainReference, ProviderSecret};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(3);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransferError {
    #[error("object not found (consumed or never buffered)")]
    NotFound,
    #[error("producer unreachable: {0}")]
    Unreachable(String),
    #[error("transfer aborted mid-stream")]
    Aborted,
    #[error("producer rejected the provider handshake")]
    Rejected,
    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl From<WireError> for TransferError {
    fn from(e: WireError) -> Self {
        if e.is_disconnect() {
            TransferError::Aborted
        } else {
            TransferError::Protocol(e.to_string())
        }
    }
}

/// Received-but-unconsumed bytes on the consumer side, with its high-water mark.
#[derive(Debug, Default)]
pub struct FlowGauge {
    current: AtomicU64,
    peak: AtomicU64,
}

impl FlowGauge {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    fn add(&self, n: u64) {
        let now = self.current.fetch_add(n, Ordering::AcqRel) + n;
        self.peak.fetch_max(now, Ordering::AcqRel);
    }

    fn sub(&self, n: u64) {
        self.current.fetch_sub(n, Ordering::AcqRel);
    }

    pub fn current(&self) -> u64 {
        self.current.load(Ordering::Acquire)
    }

    pub fn peak(&self) -> u64 {
        self.peak.load(Ordering::Acquire)
    }
}

/// An open pull; yields chunks in sequence order.
pub struct PullStream {
    rx: mpsc::Receiver<Result<Chunk, TransferError>>,
    gauge: Arc<FlowGauge>,
    reader: tokio::task::JoinHandle<()>,
    done: bool,
}

impl PullStream {
    /// Next chunk; `None` after the final chunk or an error has been returned.
    pub async fn next_chunk(&mut self) -> Option<Result<Chunk, TransferError>> {
        if self.done {
            return None;
        }
        let item = self.rx.recv().await.unwrap_or(Err(TransferError::Aborted));
        match &item {
            Ok(chunk) => {
                self.gauge.sub(chunk.data.len() as u64);
                self.done = chunk.last;
            }
            Err(_) => self.done = true,
        }
        Some(item)
    }

    pub fn gauge(&self) -> &Arc<FlowGauge> {
        &self.gauge
    }

    /// Drains the stream into one contiguous buffer.
    pub async fn collect(mut self) -> Result<Bytes, TransferError> {
        let mut out = Vec::new();
        while let Some(chunk) = self.next_chunk().await {
            out.extend_from_slice(&chunk?.data);
        }
        Ok(Bytes::from(out))
    }
}

impl Drop for PullStream {
    fn drop(&mut self) {
        self.reader.abort();
    }
}

/// Connects to the producer, authenticates, and requests the object.
pub async fn open_pull(plain: &PlainReference, secret: &ProviderSecret, cfg: &TransferConfig, gauge: Option<Arc<FlowGauge>>) -> Result<PullStream, TransferError> {
    let mut stream = match tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect(plain.producer_addr)).await {
        Ok(Ok(s)) => s,
        Ok(Err(e)) => return Err(TransferError::Unreachable(format!("{}: {e}", plain.producer_addr))),
        Err(_) => return Err(TransferError::Unreachable(format!("{}: connect timed out", plain.producer_addr))),
    };
    let _ = stream.set_nodelay(true);

    let handshake = async {
        let mut challenge = [0u8; CHALLENGE_LEN];
        stream.read_exact(&mut challenge).await?;
        let mac = secret.mac(HANDSHAKE_LABEL, &challenge);
        stream.write_all(&frame::encode_request(&mac, plain.object_key)).await?;
        stream.read_u8().await
    };
    let status = handshake
        .await
        .map_err(|e| TransferError::Unreachable(format!("{}: {e}", plain.producer_addr)))?;
    match status {
        frame::STATUS_OK => {}
        frame::STATUS_NOT_FOUND => return Err(TransferError::NotFound),
        frame::STATUS_UNAUTHORIZED => return Err(TransferError::Rejected),
        other => return Err(TransferError::Protocol(format!("unknown status byte {other}"))),
    }

    let gauge = gauge.unwrap_or_default();
    let (tx, rx) = mpsc::channel(cfg.buffered_chunks());
    let reader = tokio::spawn(read_chunks(stream, tx, gauge.clone(), cfg.chunk_size));
    Ok(PullStream { rx, gauge, reader, done: false })
}

async fn read_chunks(stream: TcpStream, tx: mpsc::Sender<Result<Chunk, TransferError>>, gauge: Arc<FlowGauge>, max_len: usize) {
    // Unbuffered on purpose: every byte read off the socket is in the gauge.
    let mut r = stream;
    let mut seq = 0u32;
    loop {
        // Only read once there is room downstream; TCP windowing does the rest.
        let Ok(permit) = tx.reserve().await else { return };
        let item = match frame::read_frame(&mut r, max_len, seq).await {
            Ok(Frame::Chunk(c)) => c,
            Ok(Frame::Abort) => {
                permit.send(Err(TransferError::Aborted));
                return;
            }
            Err(e) => {
                permit.send(Err(e.into()));
                return;
            }
        };
        let last = item.last;
        gauge.add(item.data.len() as u64);
        permit.send(Ok(item));
        if last {
            return;
        }
        seq = seq.wrapping_add(1);
    }
}

/// Pulls an entire object.
pub async fn pull_object(plain: &PlainReference, secret: &ProviderSecret, cfg: &TransferConfig) -> Result<Bytes, TransferError> {
    open_pull(plain, secret, cfg, None).await?.collect().await
}
