//! Functions deployed by the benchmark cluster.

use bytes::Bytes;
use futures::future::try_join_all;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::wordcount;
use crate::refcrypto::XdtReference;
use crate::sdk::{HandlerRegistry, Sdk, SdkError};

pub const PRODUCER: &str = "producer";
pub const CONSUMER: &str = "consumer";
pub const FETCH: &str = "fetch";
pub const GATHER: &str = "gather";
pub const ECHO: &str = "echo";
pub const WC_MAP: &str = "wc-map";
pub const WC_REDUCE: &str = "wc-reduce";

/// Deterministic pseudo-random object for `(seed, size)`.
pub fn payload(seed: u64, size: usize) -> Bytes {
    use rand::{RngCore, SeedableRng};
    let mut buf = vec![0u8; size];
    rand_chacha::ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut buf);
    Bytes::from(buf)
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProduceRequest {
    pub seed: u64,
    pub size: usize,
    pub n: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Produced {
    pub reference: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefList {
    pub refs: Vec<String>,
}

pub(crate) fn to_json<T: Serialize>(v: &T) -> Bytes {
    Bytes::from(serde_json::to_vec(v).expect("serializable"))
}

pub(crate) fn from_json<T: for<'de> Deserialize<'de>>(b: &[u8]) -> Result<T, SdkError> {
    serde_json::from_slice(b).map_err(|e| SdkError::BadRequest(e.to_string()))
}

async fn produce(req: Bytes, sdk: Sdk) -> Result<Bytes, SdkError> {
    let r: ProduceRequest = from_json(&req)?;
    let data = payload(r.seed, r.size);
    let sha256 = sha256_hex(&data);
    let reference = sdk.put(data, r.n).await?.into_string();
    Ok(to_json(&Produced { reference, sha256 }))
}

async fn consume(req: Bytes, _sdk: Sdk) -> Result<Bytes, SdkError> {
    Ok(Bytes::from(sha256_hex(&req)))
}

async fn fetch(req: Bytes, sdk: Sdk) -> Result<Bytes, SdkError> {
    let token = std::str::from_utf8(&req).map_err(|e| SdkError::BadRequest(e.to_string()))?;
    let data = sdk.get(&XdtReference::from_token(token)).await?;
    Ok(Bytes::from(sha256_hex(&data)))
}

async fn gather(req: Bytes, sdk: Sdk) -> Result<Bytes, SdkError> {
    let list: RefList = from_json(&req)?;
    let gets = list.refs.iter().map(|t| {
        let sdk = sdk.clone();
        let r = XdtReference::from_token(t.clone());
        async move { sdk.get(&r).await.map(|d| sha256_hex(&d)) }
    });
    Ok(to_json(&try_join_all(gets).await?))
}

async fn echo(req: Bytes, _sdk: Sdk) -> Result<Bytes, SdkError> {
    Ok(req)
}

/// Every handler the benchmark and demo cluster deploys.
pub fn registry() -> HandlerRegistry {
    let mut r = HandlerRegistry::new();
    r.register(PRODUCER, produce)
        .register(CONSUMER, consume)
        .register(FETCH, fetch)
        .register(GATHER, gather)
        .register(ECHO, echo)
        .register(WC_MAP, wordcount::map_handler)
        .register(WC_REDUCE, wordcount::reduce_handler);
    r
}
