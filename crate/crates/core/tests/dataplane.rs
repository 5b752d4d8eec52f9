use std::net::SocketAddr;
use std::time::Duration;

use bytes::Bytes;
use proptest::prelude::*;
use xdt::dataplane::{open_pull, pull_object, DataServer, ObjectStore, StoreError, TransferConfig, TransferError, TransferSettings};
use xdt::refcrypto::{PlainReference, ProviderSecret};

struct Producer {
    store: ObjectStore,
    server: DataServer,
    secret: ProviderSecret,
    cfg: TransferConfig,
}

impl Producer {
    async fn start() -> Self {
        let store = ObjectStore::new();
        let secret = ProviderSecret::generate();
        let cfg = TransferConfig::default();
        let server = DataServer::bind("127.0.0.1:0".parse().unwrap(), store.clone(), secret.clone(), TransferSettings::new(cfg))
            .await
            .unwrap();
        Self { store, server, secret, cfg }
    }

    fn reference(&self, key: u64) -> PlainReference {
        PlainReference { producer_addr: self.server.local_addr(), object_key: key }
    }

    async fn pull(&self, key: u64) -> Result<Bytes, TransferError> {
        pull_object(&self.reference(key), &self.secret, &self.cfg).await
    }
}

fn pattern(len: usize) -> Bytes {
    (0..len).map(|i| (i * 7 % 256) as u8).collect::<Vec<_>>().into()
}

#[test]
fn keys_are_sequential_and_bytes_are_accounted() {
    let store = ObjectStore::new();
    assert_eq!(store.buffer_object(pattern(10), 1), Ok(0));
    assert_eq!(store.buffer_object(pattern(0), 1), Ok(1));
    assert_eq!(store.buffer_object(pattern(1 << 20), 3), Ok(2));
    assert_eq!(store.bytes_resident(), 10 + (1 << 20));
    assert_eq!(store.remaining_retrievals(2), Some(3));
    assert_eq!(store.buffer_object(pattern(1), 0), Err(StoreError::ZeroRetrievals));
}

#[tokio::test]
async fn one_mebibyte_arrives_as_sixteen_chunks() {
    let p = Producer::start().await;
    let key = p.store.buffer_object(pattern(1 << 20), 1).unwrap();
    let mut stream = open_pull(&p.reference(key), &p.secret, &p.cfg, None).await.unwrap();
    let mut seqs = Vec::new();
    let mut last = Vec::new();
    while let Some(c) = stream.next_chunk().await {
        let c = c.unwrap();
        assert_eq!(c.data.len(), 65536);
        seqs.push(c.sequence);
        last.push(c.last);
    }
    assert_eq!(seqs, (0..16).collect::<Vec<u32>>());
    assert_eq!(last.iter().filter(|l| **l).count(), 1);
    assert!(last[15]);
}

#[tokio::test]
async fn empty_object_is_one_empty_final_chunk() {
    let p = Producer::start().await;
    let key = p.store.buffer_object(Bytes::new(), 1).unwrap();
    let mut stream = open_pull(&p.reference(key), &p.secret, &p.cfg, None).await.unwrap();
    let c = stream.next_chunk().await.unwrap().unwrap();
    assert_eq!((c.sequence, c.last, c.data.len()), (0, true, 0));
    assert!(stream.next_chunk().await.is_none());
}

#[tokio::test]
async fn single_retrieval_object_is_gone_after_one_pull() {
    let p = Producer::start().await;
    let key = p.store.buffer_object(pattern(1000), 1).unwrap();
    assert_eq!(p.pull(key).await.unwrap(), pattern(1000));
    assert_eq!(p.pull(key).await, Err(TransferError::NotFound));
    assert_eq!(p.store.bytes_resident(), 0);
}

#[tokio::test]
async fn round_trip_at_chunk_boundaries() {
    let p = Producer::start().await;
    for len in [0, 1, 65536, 65537, 1 << 20] {
        let key = p.store.buffer_object(pattern(len), 1).unwrap();
        assert_eq!(p.pull(key).await.unwrap(), pattern(len), "len {len}");
    }
}

#[tokio::test]
async fn dead_producer_is_unreachable() {
    let addr: SocketAddr = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let plain = PlainReference { producer_addr: addr, object_key: 0 };
    let err = pull_object(&plain, &ProviderSecret::generate(), &TransferConfig::default()).await.unwrap_err();
    assert!(matches!(err, TransferError::Unreachable(_)), "{err:?}");
}

#[tokio::test]
async fn foreign_secret_is_rejected() {
    let p = Producer::start().await;
    let key = p.store.buffer_object(pattern(10), 1).unwrap();
    let err = pull_object(&p.reference(key), &ProviderSecret::generate(), &p.cfg).await.unwrap_err();
    assert_eq!(err, TransferError::Rejected);
    assert_eq!(p.store.remaining_retrievals(key), Some(1));
}

#[tokio::test]
async fn concurrent_pulls_share_the_retrieval_count() {
    let p = Producer::start().await;
    let key = p.store.buffer_object(pattern(1 << 20), 2).unwrap();
    let (a, b) = tokio::join!(p.pull(key), p.pull(key));
    assert_eq!(a.unwrap(), pattern(1 << 20));
    assert_eq!(b.unwrap(), pattern(1 << 20));
    assert_eq!(p.pull(key).await, Err(TransferError::NotFound));
}

#[tokio::test]
async fn release_all_drops_everything() {
    let p = Producer::start().await;
    for _ in 0..3 {
        p.store.buffer_object(pattern(100), 5).unwrap();
    }
    assert_eq!(p.store.release_all(), 3);
    assert_eq!(p.store.release_all(), 0);
    assert_eq!(p.store.bytes_resident(), 0);
    assert_eq!(p.pull(0).await, Err(TransferError::NotFound));
}

#[tokio::test]
async fn release_mid_stream_fails_the_consumer() {
    let p = Producer::start().await;
    let key = p.store.buffer_object(pattern(8 << 20), 1).unwrap();
    let mut stream = open_pull(&p.reference(key), &p.secret, &p.cfg, None).await.unwrap();
    stream.next_chunk().await.unwrap().unwrap();
    p.store.release_all();
    let mut failed = false;
    while let Some(c) = tokio::time::timeout(Duration::from_secs(5), stream.next_chunk()).await.unwrap() {
        if c.is_err() {
            failed = true;
            break;
        }
    }
    assert!(failed, "stream completed after the producer released its objects");
}

#[tokio::test]
async fn injected_crash_aborts_the_pull() {
    let p = Producer::start().await;
    let key = p.store.buffer_object(pattern(1 << 20), 1).unwrap();
    p.store.buffer_object(pattern(10), 1).unwrap();
    p.store.inject_crash_after(300_000);
    let err = p.pull(key).await.unwrap_err();
    assert!(matches!(err, TransferError::Aborted | TransferError::NotFound), "{err:?}");
    assert!(p.store.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exactly_n_pulls_succeed(n in 1u32..5, extra in 1u32..3, len in 0usize..200_000) {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        rt.block_on(async {
            let p = Producer::start().await;
            let key = p.store.buffer_object(pattern(len), n).unwrap();
            let pulls = (0..n + extra).map(|_| p.pull(key));
            let results = futures::future::join_all(pulls).await;
            let ok = results.iter().filter(|r| r.as_ref().is_ok_and(|b| *b == pattern(len))).count();
            let gone = results.iter().filter(|r| matches!(r, Err(TransferError::NotFound))).count();
            prop_assert_eq!(ok as u32, n);
            prop_assert_eq!(gone as u32, extra);
            prop_assert_eq!(p.store.bytes_resident(), 0);
            Ok(())
        })?;
    }
}
