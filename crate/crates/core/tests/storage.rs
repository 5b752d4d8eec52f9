use std::time::{Duration, Instant};

use bytes::Bytes;
use xdt::storage::{unix_now, StorageClient, StorageError, StorageKind, StorageProfile, StorageServer};

async fn daemon(latency_ms: u64, bandwidth: u64) -> (StorageServer, StorageClient) {
    let profile = StorageProfile {
        per_op_latency: Duration::from_millis(latency_ms),
        bandwidth_cap: bandwidth,
        ..StorageProfile::for_kind(StorageKind::ColdStore)
    };
    let server = StorageServer::bind("127.0.0.1:0".parse().unwrap(), profile).await.unwrap();
    let client = StorageClient::new(server.local_addr());
    (server, client)
}

#[tokio::test]
async fn every_operation_pays_the_fixed_latency() {
    let (_s, c) = daemon(10, 1 << 30).await;
    let t = Instant::now();
    c.store_put("k", Bytes::from_static(b"v"), None).await.unwrap();
    assert!(t.elapsed() >= Duration::from_millis(10));
    let t = Instant::now();
    assert_eq!(c.store_get("k").await.unwrap(), Bytes::from_static(b"v"));
    assert!(t.elapsed() >= Duration::from_millis(10));
}

#[tokio::test]
async fn last_writer_wins() {
    let (_s, c) = daemon(0, 1 << 30).await;
    c.store_put("k", Bytes::from_static(b"one"), None).await.unwrap();
    c.store_put("k", Bytes::from_static(b"two"), None).await.unwrap();
    assert_eq!(c.store_get("k").await.unwrap(), Bytes::from_static(b"two"));
}

#[tokio::test]
async fn bandwidth_cap_paces_large_objects() {
    let (_s, c) = daemon(0, 100 * 1024 * 1024).await;
    let t = Instant::now();
    c.store_put("big", Bytes::from(vec![3u8; 10 << 20]), None).await.unwrap();
    assert!(t.elapsed() >= Duration::from_millis(100), "{:?}", t.elapsed());
}

#[tokio::test]
async fn absent_key_is_reported() {
    let (_s, c) = daemon(0, 1 << 30).await;
    assert_eq!(c.store_get("missing").await, Err(StorageError::KeyNotFound("missing".into())));
}

#[tokio::test]
async fn residency_ends_at_the_last_permitted_read() {
    let (_s, c) = daemon(0, 1 << 30).await;
    let since = unix_now() - 1.0;
    c.store_put("obj", Bytes::from(vec![1u8; 4096]), Some(2)).await.unwrap();
    tokio::time::sleep(Duration::from_millis(50)).await;
    c.store_get("obj").await.unwrap();
    tokio::time::sleep(Duration::from_millis(50)).await;
    c.store_get("obj").await.unwrap();
    assert!(matches!(c.store_get("obj").await, Err(StorageError::KeyNotFound(_))));
    tokio::time::sleep(Duration::from_millis(100)).await;

    let ledger = c.ledger(since).await.unwrap();
    let e = ledger.iter().find(|e| e.key == "obj").unwrap();
    assert_eq!((e.bytes, e.reads, e.reads_remaining), (4096, 2, Some(0)));
    let residency = e.residency_secs(unix_now());
    assert!((0.09..0.2).contains(&residency), "residency {residency}");
}

#[tokio::test]
async fn unbounded_objects_stay_resident() {
    let (_s, c) = daemon(0, 1 << 30).await;
    c.store_put("keep", Bytes::from_static(b"x"), None).await.unwrap();
    for _ in 0..5 {
        c.store_get("keep").await.unwrap();
    }
    let e = c.ledger(0.0).await.unwrap().into_iter().find(|e| e.key == "keep").unwrap();
    assert_eq!((e.reads, e.reads_remaining), (5, None));
}
