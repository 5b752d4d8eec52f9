use std::sync::Mutex;
use std::time::{Duration, Instant};

use bytes::Bytes;
use xdt::controlplane::InstanceState;
use xdt::dataplane::TransferError;
use xdt::refcrypto::XdtReference;
use xdt::sdk::{HandlerRegistry, Sdk, SdkError};
use xdt::{Cluster, ClusterConfig, ErrorCode, FunctionConfig};

fn registry() -> HandlerRegistry {
    let mut r = HandlerRegistry::new();
    r.register("echo", |req: Bytes, _sdk: Sdk| async move { Ok::<_, SdkError>(req) });
    r.register("len", |req: Bytes, _sdk: Sdk| async move { Ok::<_, SdkError>(Bytes::from(req.len().to_string())) });
    r.register("slow", |req: Bytes, _sdk: Sdk| async move {
        tokio::time::sleep(Duration::from_millis(100)).await;
        Ok::<_, SdkError>(req)
    });
    r.register("order", |req: Bytes, _sdk: Sdk| async move {
        ORDER.lock().unwrap().push(req[0]);
        Ok::<_, SdkError>(req)
    });
    r.register("stash", |req: Bytes, sdk: Sdk| async move {
        let r = sdk.put(req, 1).await?;
        Ok::<_, SdkError>(Bytes::from(r.into_string()))
    });
    r
}

static ORDER: Mutex<Vec<u8>> = Mutex::new(Vec::new());

#[tokio::test]
async fn echo_round_trip_through_a_warm_instance() {
    let cfg = ClusterConfig::with_functions([FunctionConfig::new("echo", "echo").fixed(1)]);
    let cluster = Cluster::start(cfg, &registry()).await.unwrap();
    cluster.wait_min_scale(Duration::from_secs(5)).await.unwrap();
    let payload: Vec<u8> = (0..1 << 20).map(|i| (i % 251) as u8).collect();
    let out = cluster.client().invoke("echo", payload.clone()).await.unwrap();
    assert_eq!(out, payload);
}

#[tokio::test]
async fn unknown_function_is_reported() {
    let cluster = Cluster::start(ClusterConfig::default(), &registry()).await.unwrap();
    let err = cluster.client().invoke("nope", &b"x"[..]).await.unwrap_err();
    assert_eq!(err.code(), ErrorCode::UnknownFunction);
}

#[tokio::test]
async fn scale_from_zero_serves_buffered_requests() {
    let cfg = ClusterConfig::with_functions([FunctionConfig::new("len", "len").boot_delay_ms(100)]);
    let cluster = Cluster::start(cfg, &registry()).await.unwrap();
    assert!(cluster.instances("len").is_empty());
    let t = Instant::now();
    let out = cluster.client().invoke("len", vec![0u8; 1000]).await.unwrap();
    assert_eq!(&out[..], b"1000");
    assert!(t.elapsed() >= Duration::from_millis(100));
    assert_eq!(cluster.instances("len").len(), 1);
}

#[tokio::test]
async fn burst_scales_out() {
    let cfg = ClusterConfig::with_functions([FunctionConfig::new("slow", "slow").boot_delay_ms(20)]);
    let cluster = Cluster::start(cfg, &registry()).await.unwrap();
    let sdk = cluster.client();
    let calls = (0..8u8).map(|i| {
        let sdk = sdk.clone();
        async move { sdk.invoke("slow", vec![i; 10]).await }
    });
    let outs = futures::future::join_all(calls).await;
    for (i, o) in outs.into_iter().enumerate() {
        assert_eq!(o.unwrap(), vec![i as u8; 10]);
    }
    assert!(cluster.instances("slow").len() > 1);
    assert_eq!(cluster.ledger().len(), 8);
    assert!(cluster.ledger().duplicate_executions().is_empty());
}

#[tokio::test]
async fn buffered_requests_are_delivered_in_arrival_order() {
    let mut f = FunctionConfig::new("order", "order").boot_delay_ms(200);
    f.max_scale = 1;
    let cluster = Cluster::start(ClusterConfig::with_functions([f]), &registry()).await.unwrap();
    let sdk = cluster.client();
    let mut calls = Vec::new();
    for i in 0..6u8 {
        let sdk = sdk.clone();
        calls.push(tokio::spawn(async move { sdk.invoke("order", vec![i]).await }));
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    for c in calls {
        c.await.unwrap().unwrap();
    }
    assert_eq!(*ORDER.lock().unwrap(), (0..6).collect::<Vec<u8>>());
}

#[tokio::test]
async fn killed_instance_is_detected_and_replaced() {
    let cfg = ClusterConfig::with_functions([FunctionConfig::new("stash", "stash").fixed(1)]);
    let cluster = Cluster::start(cfg, &registry()).await.unwrap();
    cluster.wait_min_scale(Duration::from_secs(5)).await.unwrap();
    let sdk = cluster.client();
    let token = sdk.invoke("stash", vec![5u8; 1000]).await.unwrap();
    let reference = XdtReference::from_token(String::from_utf8(token.to_vec()).unwrap());

    let victim = cluster.instances("stash").pop().unwrap();
    let t = Instant::now();
    assert!(cluster.kill_instance(victim.id()));
    while victim.state() != InstanceState::Dead {
        assert!(t.elapsed() < Duration::from_secs(3), "kill not detected");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    assert!(t.elapsed() >= Duration::from_millis(500), "detected after {:?}", t.elapsed());

    let err = sdk.get(&reference).await.unwrap_err();
    assert!(matches!(err, SdkError::Transfer(TransferError::Unreachable(_))), "{err:?}");

    cluster.wait_ready("stash", 1, Duration::from_secs(5)).await.unwrap();
    assert!(sdk.invoke("stash", vec![1u8]).await.is_ok());
}

#[tokio::test]
async fn fixed_instance_count_holds_under_load() {
    let cfg = ClusterConfig::with_functions([FunctionConfig::new("slow", "slow").fixed(3)]);
    let cluster = Cluster::start(cfg, &registry()).await.unwrap();
    cluster.wait_min_scale(Duration::from_secs(5)).await.unwrap();
    let sdk = cluster.client();
    let calls = (0..12u8).map(|i| {
        let sdk = sdk.clone();
        async move { sdk.invoke("slow", vec![i]).await }
    });
    for o in futures::future::join_all(calls).await {
        o.unwrap();
    }
    assert_eq!(cluster.instances("slow").len(), 3);
}

#[tokio::test]
async fn metrics_return_to_zero_after_work() {
    let cfg = ClusterConfig::with_functions([FunctionConfig::new("slow", "slow").fixed(1)]);
    let cluster = Cluster::start(cfg, &registry()).await.unwrap();
    cluster.wait_min_scale(Duration::from_secs(5)).await.unwrap();
    let sdk = cluster.client();
    let before = Instant::now();
    let calls = (0..3u8).map(|i| {
        let sdk = sdk.clone();
        async move { sdk.invoke("slow", vec![i]).await }
    });
    futures::future::join_all(calls).await;
    let inst = cluster.instances("slow").pop().unwrap();
    let m = inst.metrics();
    assert_eq!((m.queue_depth, m.in_flight), (0, 0));
    assert!(m.last_active >= before);
}
