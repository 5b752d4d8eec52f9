use std::time::Duration;

use bytes::Bytes;
use tokio::io::BufReader;
use tokio::net::TcpStream;
use xdt::controlplane::{read_envelope, write_envelope, InstanceState, InvocationEnvelope};
use xdt::dataplane::TransferError;
use xdt::refcrypto::{XdtReference, REF_HEADER};
use xdt::sdk::{HandlerRegistry, Sdk, SdkError, Transport, TRANSPORT_ENV};
use xdt::{Cluster, ClusterConfig, ErrorCode, FunctionConfig};

fn registry() -> HandlerRegistry {
    let mut r = HandlerRegistry::new();
    r.register("echo", |req: Bytes, _sdk: Sdk| async move { Ok::<_, SdkError>(req) });
    r.register("len", |req: Bytes, _sdk: Sdk| async move { Ok::<_, SdkError>(Bytes::from(req.len().to_string())) });
    r.register("fail", |_req: Bytes, _sdk: Sdk| async move { Err::<Bytes, _>(SdkError::function("boom")) });
    r.register("hop", |req: Bytes, sdk: Sdk| async move { sdk.invoke("len", req).await });
    r.register("stash", |req: Bytes, sdk: Sdk| async move {
        let r = sdk.put(req, 1).await?;
        Ok::<_, SdkError>(Bytes::from(r.into_string()))
    });
    r
}

async fn cluster(split: usize) -> Cluster {
    let functions = ["echo", "len", "fail", "hop", "stash"].map(|f| FunctionConfig::new(f, f).fixed(1));
    let mut cfg = ClusterConfig::with_functions(functions);
    cfg.split_threshold = split;
    let c = Cluster::start(cfg, &registry()).await.unwrap();
    c.wait_min_scale(Duration::from_secs(5)).await.unwrap();
    c
}

fn payload(len: usize) -> Bytes {
    (0..len).map(|i| (i % 253) as u8).collect::<Vec<_>>().into()
}

#[tokio::test]
async fn large_echo_comes_back_by_reference() {
    let c = cluster(1024).await;
    let p = payload(10 << 20);
    assert_eq!(c.client().invoke("echo", p.clone()).await.unwrap(), p);
    assert_eq!(c.driver_store().bytes_resident(), 0);
}

#[tokio::test]
async fn tiny_payload_with_zero_threshold() {
    let c = cluster(0).await;
    assert_eq!(&c.client().invoke("echo", &b"hi"[..]).await.unwrap()[..], b"hi");
    assert_eq!(&c.client().invoke("len", payload(1 << 20)).await.unwrap()[..], b"1048576");
}

#[tokio::test]
async fn put_serves_exactly_n_gets() {
    let c = cluster(0).await;
    let sdk = c.client();
    let p = payload(1 << 20);
    let r = sdk.put(p.clone(), 3).await.unwrap();
    for _ in 0..3 {
        assert_eq!(sdk.get(&r).await.unwrap(), p);
    }
    let err = sdk.get(&r).await.unwrap_err();
    assert_eq!(err, SdkError::Transfer(TransferError::NotFound));
    assert_eq!(err.code(), ErrorCode::XdtTransferFailed);
}

#[tokio::test]
async fn put_of_empty_bytes() {
    let c = cluster(0).await;
    let sdk = c.client();
    let r = sdk.put(Bytes::new(), 1).await.unwrap();
    assert!(sdk.get(&r).await.unwrap().is_empty());
}

#[tokio::test]
async fn put_needs_no_consumer() {
    let c = cluster(0).await;
    let sdk = c.client();
    let r = tokio::time::timeout(Duration::from_millis(100), sdk.put(payload(4 << 20), 1)).await.unwrap().unwrap();
    assert!(!r.as_str().is_empty());
    assert_eq!(c.driver_store().len(), 1);
}

#[tokio::test]
async fn forged_token_fails_authentication() {
    let c = cluster(0).await;
    let token: String = (0..64).map(|i| char::from(b'a' + (i * 11 % 26) as u8)).collect();
    let err = c.client().get(&XdtReference::from_token(token)).await.unwrap_err();
    assert_eq!(err.code(), ErrorCode::AuthFailed);
}

#[tokio::test]
async fn reference_from_a_torn_down_producer_is_unreachable() {
    for kill in [false, true] {
        let c = cluster(0).await;
        let sdk = c.client();
        let token = sdk.invoke("stash", payload(1000)).await.unwrap();
        let r = XdtReference::from_token(String::from_utf8(token.to_vec()).unwrap());
        let inst = c.instances("stash").pop().unwrap();
        if kill {
            c.kill_instance(inst.id());
        } else {
            inst.shutdown();
        }
        let err = sdk.get(&r).await.unwrap_err();
        assert!(matches!(err, SdkError::Transfer(TransferError::Unreachable(_))), "kill={kill}: {err:?}");
    }
}

#[tokio::test]
async fn handler_errors_surface_as_function_errors() {
    let c = cluster(0).await;
    let err = c.client().invoke("fail", &b"x"[..]).await.unwrap_err();
    assert_eq!(err.code(), ErrorCode::FunctionError);
    assert!(err.to_string().contains("boom"));
}

#[tokio::test]
async fn functions_can_chain() {
    let c = cluster(0).await;
    assert_eq!(&c.client().invoke("hop", payload(70_000)).await.unwrap()[..], b"70000");
    assert_eq!(c.ledger().executions_for("len"), 1);
    assert_eq!(c.ledger().executions_for("hop"), 1);
}

#[tokio::test]
async fn consumed_reference_fails_before_the_handler_runs() {
    let c = cluster(0).await;
    let sdk = c.client();
    let r = sdk.put(payload(100), 1).await.unwrap();
    sdk.get(&r).await.unwrap();

    let env = InvocationEnvelope::new("len", Bytes::new()).with_header(REF_HEADER, r.as_str());
    let stream = TcpStream::connect(c.activator_addr()).await.unwrap();
    let mut stream = BufReader::new(stream);
    write_envelope(stream.get_mut(), &env).await.unwrap();
    let resp = read_envelope(&mut stream, 1 << 20).await.unwrap();
    assert_eq!(resp.status().unwrap_err().0, ErrorCode::XdtTransferFailed);
    assert_eq!(c.ledger().executions_for("len"), 0);
    assert_eq!(c.instances("len")[0].state(), InstanceState::Ready);
}

#[test]
fn transport_comes_from_the_environment() {
    std::env::remove_var(TRANSPORT_ENV);
    assert_eq!(Transport::from_env(), Ok(Transport::Xdt));
    for (v, t) in [("xdt", Transport::Xdt), ("cold-store", Transport::ColdStore), ("mem-cache", Transport::MemCache)] {
        std::env::set_var(TRANSPORT_ENV, v);
        assert_eq!(Transport::from_env(), Ok(t));
    }
    std::env::set_var(TRANSPORT_ENV, "s3");
    assert!(Transport::from_env().is_err());
    std::env::remove_var(TRANSPORT_ENV);
}
