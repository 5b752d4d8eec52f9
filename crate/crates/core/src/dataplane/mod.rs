//! Producer-side object buffering and the chunked pull protocol.

mod client;
mod config;
pub mod frame;
mod server;
mod store;

pub use client::{open_pull, pull_object, FlowGauge, PullStream, TransferError};
pub use config::{StreamingMode, TransferConfig, TransferSettings, DEFAULT_BUFFER_DEPTH, DEFAULT_CHUNK_SIZE};
pub use frame::Chunk;
pub use server::{serve_pull, DataServer, ServeOutcome};
pub use store::{Lease, ObjectStore, StoreError};
