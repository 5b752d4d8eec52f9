//! The user-facing transfer API: `invoke`, `put` and `get`.
//!
//! Everything that touches the provider secret, the local object store or
//! producer addresses lives in [`SdkContext`], whose internals are private to
//! this crate. User handlers only ever see an [`Sdk`] view and opaque
//! [`XdtReference`] tokens; that module boundary is the trust line.

mod handler;
mod ledger;
pub(crate) mod server;

use std::collections::HashMap;
use std::fmt;
use std::net::{IpAddr, SocketAddr};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use tokio::io::BufReader;
use tokio::net::TcpStream;

pub use handler::{FunctionHandler, HandlerFuture, HandlerRegistry};
pub use ledger::ExecutionLedger;
pub use server::{serve, ServeOptions};

use crate::controlplane::envelope::{
    read_envelope, write_envelope, InvocationEnvelope, DEFAULT_INLINE_LIMIT, HEADER_SLACK, STORE_REF_HEADER, TRANSPORT_HEADER,
};
use crate::dataplane::{self, DataServer, ObjectStore, StoreError, TransferError, TransferSettings};
use crate::error::ErrorCode;
use crate::refcrypto::{decode_reference, encode_reference, AuthError, PlainReference, ProviderSecret, XdtReference, REF_HEADER};
use crate::storage::{StorageClient, StorageError, StorageKind};

/// Environment variable selecting the default transport.
pub const TRANSPORT_ENV: &str = "XDT_TRANSPORT";

const ACTIVATOR_CONNECT_TIMEOUT: Duration = Duration::from_secs(3);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transport {
    #[default]
    Xdt,
    ColdStore,
    MemCache,
}

impl Transport {
    pub const ALL: [Transport; 3] = [Transport::Xdt, Transport::ColdStore, Transport::MemCache];

    pub fn as_str(self) -> &'static str {
        match self {
            Transport::Xdt => "xdt",
            Transport::ColdStore => "cold-store",
            Transport::MemCache => "mem-cache",
        }
    }

    pub fn storage_kind(self) -> Option<StorageKind> {
        match self {
            Transport::Xdt => None,
            Transport::ColdStore => Some(StorageKind::ColdStore),
            Transport::MemCache => Some(StorageKind::MemCache),
        }
    }

    /// Reads [`TRANSPORT_ENV`]; unset means `xdt`.
    pub fn from_env() -> Result<Self, String> {
        match std::env::var(TRANSPORT_ENV) {
            Ok(v) => v.parse(),
            Err(_) => Ok(Transport::Xdt),
        }
    }

    fn token_prefix(self) -> &'static str {
        match self {
            Transport::Xdt => "",
            Transport::ColdStore => "cs:",
            Transport::MemCache => "mc:",
        }
    }
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Transport {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Transport::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown transport `{s}` (expected xdt, cold-store or mem-cache)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SdkError {
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error("transfer failed: {0}")]
    Transfer(#[from] TransferError),
    #[error("storage transfer failed: {0}")]
    Storage(#[from] StorageError),
    /// A transfer failure reported by a remote component.
    #[error("transfer failed upstream: {0}")]
    TransferFailed(String),
    #[error("function error: {0}")]
    Function(String),
    #[error("instance failed: {0}")]
    InstanceFailed(String),
    #[error("bad request: {0}")]
    BadRequest(String),
}

impl SdkError {
    pub fn function(msg: impl fmt::Display) -> Self {
        SdkError::Function(msg.to_string())
    }

    pub fn code(&self) -> ErrorCode {
        match self {
            SdkError::UnknownFunction(_) => ErrorCode::UnknownFunction,
            SdkError::Auth(_) => ErrorCode::AuthFailed,
            SdkError::Transfer(_) | SdkError::Storage(_) | SdkError::TransferFailed(_) => ErrorCode::XdtTransferFailed,
            SdkError::Function(_) => ErrorCode::FunctionError,
            SdkError::InstanceFailed(_) => ErrorCode::InstanceFailed,
            SdkError::BadRequest(_) => ErrorCode::BadRequest,
        }
    }

    /// Rebuilds an error received in a response envelope.
    pub fn from_remote(code: ErrorCode, message: String) -> Self {
        match code {
            ErrorCode::UnknownFunction => SdkError::UnknownFunction(message),
            ErrorCode::XdtTransferFailed => SdkError::TransferFailed(message),
            ErrorCode::FunctionError => SdkError::Function(message),
            ErrorCode::AuthFailed => SdkError::Auth(AuthError),
            ErrorCode::InstanceFailed => SdkError::InstanceFailed(message),
            ErrorCode::BadRequest => SdkError::BadRequest(message),
        }
    }

    pub fn is_transfer_failure(&self) -> bool {
        self.code() == ErrorCode::XdtTransferFailed
    }
}

impl From<StoreError> for SdkError {
    fn from(e: StoreError) -> Self {
        SdkError::BadRequest(e.to_string())
    }
}

/// Everything a process needs to join a cluster as a provider-trusted SDK.
#[derive(Debug, Clone)]
pub struct ProviderLink {
    pub secret: ProviderSecret,
    pub activator: SocketAddr,
    pub storage: HashMap<StorageKind, SocketAddr>,
    pub settings: TransferSettings,
    pub inline_limit: usize,
    /// Payloads longer than this leave the control message (0 = always).
    pub split_threshold: usize,
    /// Interface the local data server binds to.
    pub host: IpAddr,
}

impl ProviderLink {
    pub fn new(secret: ProviderSecret, activator: SocketAddr) -> Self {
        Self {
            secret,
            activator,
            storage: HashMap::new(),
            settings: TransferSettings::default(),
            inline_limit: DEFAULT_INLINE_LIMIT,
            split_threshold: 0,
            host: activator.ip(),
        }
    }

    fn split_limit(&self) -> usize {
        self.split_threshold.min(self.inline_limit)
    }
}

/// The SDK's trusted layer for one instance (or one driver process).
pub struct SdkContext {
    link: ProviderLink,
    storage: HashMap<StorageKind, StorageClient>,
    store: ObjectStore,
    data_server: DataServer,
    default_transport: Transport,
}

impl fmt::Debug for SdkContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdkContext")
            .field("data_addr", &self.data_server.local_addr())
            .field("default_transport", &self.default_transport)
            .finish_non_exhaustive()
    }
}

impl SdkContext {
    /// Starts the local data server and returns the context.
    pub async fn start(link: ProviderLink, default_transport: Transport) -> std::io::Result<Arc<Self>> {
        let store = ObjectStore::new();
        let data_server = DataServer::bind(SocketAddr::new(link.host, 0), store.clone(), link.secret.clone(), link.settings.clone()).await?;
        let storage = link.storage.iter().map(|(k, a)| (*k, StorageClient::new(*a))).collect();
        Ok(Arc::new(Self { link, storage, store, data_server, default_transport }))
    }

    pub fn data_addr(&self) -> SocketAddr {
        self.data_server.local_addr()
    }

    pub fn store(&self) -> &ObjectStore {
        &self.store
    }

    pub fn default_transport(&self) -> Transport {
        self.default_transport
    }

    pub(crate) fn link(&self) -> &ProviderLink {
        &self.link
    }

    /// User-facing view with the context's default transport.
    pub fn sdk(self: &Arc<Self>) -> Sdk {
        Sdk::new(self.clone(), self.default_transport)
    }

    /// Drops every buffered object and stops serving pulls.
    pub fn shutdown(&self) -> usize {
        self.data_server.shutdown();
        self.store.release_all()
    }

    fn storage_client(&self, kind: StorageKind) -> Result<&StorageClient, SdkError> {
        self.storage
            .get(&kind)
            .ok_or_else(|| SdkError::BadRequest(format!("no {kind} service configured")))
    }

    /// Buffers or uploads `payload` for `n` retrievals and returns the token.
    async fn put_object(&self, transport: Transport, payload: Bytes, n: u32) -> Result<(XdtReference, Option<String>), SdkError> {
        match transport.storage_kind() {
            None => {
                let key = self.store.buffer_object(payload, n)?;
                let plain = PlainReference { producer_addr: self.data_addr(), object_key: key };
                Ok((encode_reference(&plain, &self.link.secret), None))
            }
            Some(kind) => {
                if n == 0 {
                    return Err(StoreError::ZeroRetrievals.into());
                }
                let key = uuid::Uuid::new_v4().simple().to_string();
                self.storage_client(kind)?.store_put(&key, payload, Some(n)).await?;
                let token = format!("{}{key}", transport.token_prefix());
                Ok((XdtReference::from_token(token), Some(key)))
            }
        }
    }

    /// Fetches a referenced object: direct pull for XDT tokens, a storage read
    /// for through-storage tokens.
    pub(crate) async fn fetch(&self, reference: &XdtReference) -> Result<Bytes, SdkError> {
        let token = reference.as_str();
        for t in [Transport::ColdStore, Transport::MemCache] {
            if let Some(key) = token.strip_prefix(t.token_prefix()) {
                let kind = t.storage_kind().expect("storage transport");
                return Ok(self.storage_client(kind)?.store_get(key).await?);
            }
        }
        let plain = decode_reference(reference, &self.link.secret)?;
        Ok(dataplane::pull_object(&plain, &self.link.secret, &self.link.settings.get()).await?)
    }

    /// Drops a never-retrieved XDT object after a failed invoke.
    fn discard(&self, reference: &XdtReference) {
        if let Ok(plain) = decode_reference(reference, &self.link.secret) {
            if plain.producer_addr == self.data_addr() {
                if let Some(lease) = self.store.lease(plain.object_key) {
                    lease.complete();
                }
            }
        }
    }

    async fn call_activator(&self, env: &InvocationEnvelope) -> Result<InvocationEnvelope, SdkError> {
        let addr = self.link.activator;
        let stream = tokio::time::timeout(ACTIVATOR_CONNECT_TIMEOUT, TcpStream::connect(addr))
            .await
            .map_err(|_| SdkError::InstanceFailed(format!("activator {addr}: connect timed out")))?
            .map_err(|e| SdkError::InstanceFailed(format!("activator {addr}: {e}")))?;
        let _ = stream.set_nodelay(true);
        let mut stream = BufReader::new(stream);
        write_envelope(stream.get_mut(), env)
            .await
            .map_err(|e| SdkError::InstanceFailed(format!("activator {addr}: {e}")))?;
        read_envelope(&mut stream, self.link.inline_limit + HEADER_SLACK)
            .await
            .map_err(|e| SdkError::InstanceFailed(format!("activator {addr}: {e}")))
    }
}

/// Per-invocation bookkeeping for the execution ledger.
#[derive(Debug, Default)]
pub(crate) struct InvocationScope {
    stored_keys: Mutex<Vec<String>>,
    bytes_put: AtomicU64,
}

impl InvocationScope {
    fn note(&self, bytes: usize, storage_key: Option<String>) {
        self.bytes_put.fetch_add(bytes as u64, Ordering::Relaxed);
        if let Some(k) = storage_key {
            self.stored_keys.lock().unwrap_or_else(|e| e.into_inner()).push(k);
        }
    }

    pub(crate) fn take(&self) -> (Vec<String>, u64) {
        let keys = std::mem::take(&mut *self.stored_keys.lock().unwrap_or_else(|e| e.into_inner()));
        (keys, self.bytes_put.load(Ordering::Relaxed))
    }
}

/// What user code holds: invoke, put and get, nothing else.
#[derive(Clone)]
pub struct Sdk {
    ctx: Arc<SdkContext>,
    transport: Transport,
    scope: Arc<InvocationScope>,
}

impl fmt::Debug for Sdk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Sdk").field("transport", &self.transport).finish_non_exhaustive()
    }
}

impl Sdk {
    fn new(ctx: Arc<SdkContext>, transport: Transport) -> Self {
        Self { ctx, transport, scope: Arc::default() }
    }

    pub(crate) fn scoped(ctx: Arc<SdkContext>, transport: Transport, scope: Arc<InvocationScope>) -> Self {
        Self { ctx, transport, scope }
    }

    pub fn transport(&self) -> Transport {
        self.transport
    }

    pub fn with_transport(&self, transport: Transport) -> Sdk {
        Sdk { transport, ..self.clone() }
    }

    /// Bytes this view has handed to `put` (directly or through `invoke`).
    pub fn bytes_put(&self) -> u64 {
        self.scope.bytes_put.load(Ordering::Relaxed)
    }

    /// Blocking call of another function. Payloads above the split threshold
    /// leave the control message; large responses are fetched transparently.
    pub async fn invoke(&self, function_url: &str, payload: impl Into<Bytes>) -> Result<Bytes, SdkError> {
        let payload: Bytes = payload.into();
        let mut env = InvocationEnvelope::new(function_url, Bytes::new()).with_header(TRANSPORT_HEADER, self.transport.as_str());
        let mut sent_ref = None;
        if payload.len() > self.ctx.link.split_limit() {
            let len = payload.len();
            let (reference, key) = self.ctx.put_object(self.transport, payload, 1).await?;
            self.scope.note(len, key);
            let header = if self.transport == Transport::Xdt { REF_HEADER } else { STORE_REF_HEADER };
            env.headers.insert(header.to_owned(), reference.as_str().to_owned());
            sent_ref = Some(reference);
        } else {
            env.inline_body = payload;
        }

        let resp = self.ctx.call_activator(&env).await;
        let resp = match resp.and_then(|r| r.status().map(|_| r).map_err(|(c, m)| SdkError::from_remote(c, m))) {
            Ok(r) => r,
            Err(e) => {
                if let Some(r) = &sent_ref {
                    self.ctx.discard(r);
                }
                return Err(e);
            }
        };
        match resp.header(REF_HEADER).or_else(|| resp.header(STORE_REF_HEADER)) {
            Some(token) => self.ctx.fetch(&XdtReference::from_token(token)).await,
            None => Ok(resp.inline_body),
        }
    }

    /// Makes `payload` retrievable `n` times and returns its reference. For
    /// direct transfers this only buffers locally and never blocks on the network.
    pub async fn put(&self, payload: impl Into<Bytes>, n: u32) -> Result<XdtReference, SdkError> {
        let payload: Bytes = payload.into();
        let len = payload.len();
        let (reference, key) = self.ctx.put_object(self.transport, payload, n).await?;
        self.scope.note(len, key);
        Ok(reference)
    }

    /// Fetches a remote object straight from its producer (or storage).
    pub async fn get(&self, reference: &XdtReference) -> Result<Bytes, SdkError> {
        self.ctx.fetch(reference).await
    }
}
