//! Emulated through-storage baseline: a networked key-value service with
//! injected per-request latency and bandwidth caps.

mod client;
mod profile;
mod service;

pub use client::{StorageClient, StorageError};
pub use profile::{StorageKind, StorageProfile};
pub use service::{unix_now, LedgerEntry, StorageServer};
