//! Producer-side pull server.

use std::net::SocketAddr;
use std::time::{Duration, Instant};

use rand::RngCore;
use tokio::io::{AsyncReadExt, AsyncWriteExt, BufWriter};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinSet;
use tracing::debug;

use super::config::TransferSettings;
use super::frame::{self, CHALLENGE_LEN, HANDSHAKE_LABEL, REQUEST_LEN};
use super::store::ObjectStore;
use crate::error::WireError;
use crate::refcrypto::ProviderSecret;

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);

/// Outcome of one `serve_pull`, as seen by the producer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServeOutcome {
    Completed { chunks: usize },
    NotFound,
    /// The stream stopped early; the retrieval credit was returned.
    Aborted,
}

/// Listens for pull connections on behalf of one object store.
pub struct DataServer {
    local_addr: SocketAddr,
    accept: tokio::task::JoinHandle<()>,
}

impl DataServer {
    pub async fn bind(addr: SocketAddr, store: ObjectStore, secret: ProviderSecret, settings: TransferSettings) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let local_addr = listener.local_addr()?;
        let accept = tokio::spawn(accept_loop(listener, store, secret, settings));
        Ok(Self { local_addr, accept })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Stops accepting and drops every open pull connection.
    pub fn shutdown(&self) {
        self.accept.abort();
    }
}

impl Drop for DataServer {
    fn drop(&mut self) {
        self.accept.abort();
    }
}

async fn accept_loop(listener: TcpListener, store: ObjectStore, secret: ProviderSecret, settings: TransferSettings) {
    // Connection tasks live in the set so aborting the loop tears them down too.
    let mut conns = JoinSet::new();
    loop {
        tokio::select! {
            accepted = listener.accept() => {
                let Ok((stream, peer)) = accepted else { continue };
                let (store, secret, settings) = (store.clone(), secret.clone(), settings.clone());
                conns.spawn(async move {
                    if let Err(e) = handle_conn(stream, &store, &secret, &settings).await {
                        debug!(%peer, error = %e, "pull connection ended with error");
                    }
                });
            }
            Some(_) = conns.join_next(), if !conns.is_empty() => {}
        }
    }
}

async fn handle_conn(mut stream: TcpStream, store: &ObjectStore, secret: &ProviderSecret, settings: &TransferSettings) -> Result<ServeOutcome, WireError> {
    stream.set_nodelay(true)?;
    let mut challenge = [0u8; CHALLENGE_LEN];
    rand::thread_rng().fill_bytes(&mut challenge);
    stream.write_all(&challenge).await?;

    let mut raw = [0u8; REQUEST_LEN];
    tokio::time::timeout(HANDSHAKE_TIMEOUT, stream.read_exact(&mut raw))
        .await
        .map_err(|_| WireError::Malformed("handshake timed out"))??;
    let (mac, key) = frame::decode_request(&raw)?;
    if !secret.verify_mac(HANDSHAKE_LABEL, &challenge, mac) {
        stream.write_u8(frame::STATUS_UNAUTHORIZED).await?;
        return Err(WireError::Malformed("handshake mac mismatch"));
    }
    serve_pull(store, key, &mut stream, settings).await
}

/// Streams object `key` into `sink` as framed chunks. The retrieval is
/// counted only once the final chunk has been flushed.
pub async fn serve_pull(store: &ObjectStore, key: u64, sink: &mut TcpStream, settings: &TransferSettings) -> Result<ServeOutcome, WireError> {
    let Some(mut lease) = store.lease(key) else {
        sink.write_u8(frame::STATUS_NOT_FOUND).await?;
        sink.flush().await?;
        return Ok(ServeOutcome::NotFound);
    };
    let cfg = settings.get();
    let crash_after = store.take_crash_plan();
    let mut out = BufWriter::with_capacity(cfg.chunk_size + frame::FRAME_HEADER_LEN, &mut *sink);

    let payload = lease.payload().clone();
    let streamed = {
        let send = stream_chunks(&mut out, &payload, cfg.chunk_size, cfg.link_rate, crash_after);
        tokio::select! {
            r = send => r,
            _ = lease.released() => Ok(false),
        }
    };
    match streamed {
        Ok(true) => {
            let chunks = cfg.chunk_count(payload.len());
            lease.complete();
            Ok(ServeOutcome::Completed { chunks })
        }
        Ok(false) => {
            if crash_after.is_some() {
                store.release_all();
            }
            drop(lease);
            Ok(ServeOutcome::Aborted)
        }
        Err(e) => {
            drop(lease);
            Err(e)
        }
    }
}

/// Returns `Ok(false)` when a scripted crash cut the stream short.
async fn stream_chunks<W: tokio::io::AsyncWrite + Unpin>(
    out: &mut W,
    payload: &bytes::Bytes,
    chunk_size: usize,
    link_rate: Option<u64>,
    crash_after: Option<u64>,
) -> Result<bool, WireError> {
    out.write_u8(frame::STATUS_OK).await?;
    let started = Instant::now();
    let mut sent = 0u64;
    for chunk in frame::chunks(payload, chunk_size) {
        if crash_after.is_some_and(|limit| sent + chunk.data.len() as u64 > limit) {
            out.flush().await?;
            return Ok(false);
        }
        frame::write_chunk(out, &chunk).await?;
        sent += chunk.data.len() as u64;
        if let Some(rate) = link_rate {
            out.flush().await?;
            let due = started + Duration::from_secs_f64(sent as f64 / rate as f64);
            tokio::time::sleep_until(due.into()).await;
        }
    }
    out.flush().await?;
    Ok(true)
}
