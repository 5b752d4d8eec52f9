//! Direct function-to-function data transfers for a single-host serverless
//! mini-cluster.
//!
//! Producers buffer objects locally and hand out encrypted references;
//! consumers (or their queue proxies) pull the bytes straight from the
//! producer over a chunked, flow-controlled stream. Invocation control
//! messages travel separately through the activator.

pub mod bench;
pub mod cluster;
pub mod controlplane;
pub mod costmodel;
pub mod dataplane;
pub mod error;
pub mod refcrypto;
pub mod sdk;
pub mod storage;

pub use error::{ErrorCode, WireError};
pub use cluster::{Cluster, ClusterConfig, ClusterError, FunctionConfig};
