//! Per-instance queue proxy.
//!
//! Envelopes are queued in arrival order and served by `concurrency`
//! workers. When an envelope carries a reference, the proxy decrypts it and
//! pulls the object itself, so retrieval overlaps the function server's boot.
//! Once the function server is up, cut-through mode relays chunks as they
//! arrive; otherwise the object is buffered whole and then forwarded.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use bytes::Bytes;
use tokio::io::{AsyncWriteExt, BufWriter};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;

use super::envelope::{read_envelope, write_envelope, InvocationEnvelope, HEADER_SLACK, INBOUND_HEADER};
use super::metrics::{InstanceId, InstanceMetrics};
use crate::dataplane::frame::{self, chunks};
use crate::dataplane::{open_pull, FlowGauge, PullStream, StreamingMode, TransferSettings};
use crate::error::ErrorCode;
use crate::refcrypto::{decode_reference, ProviderSecret, XdtReference, REF_HEADER};
use crate::sdk::server::INBOUND_STREAM;

const READ_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug)]
pub(crate) struct QpCounters {
    queue_depth: AtomicU32,
    in_flight: AtomicU32,
    last_active: Mutex<Instant>,
}

impl QpCounters {
    fn new() -> Self {
        Self { queue_depth: AtomicU32::new(0), in_flight: AtomicU32::new(0), last_active: Mutex::new(Instant::now()) }
    }

    fn touch(&self) {
        *self.last_active.lock().unwrap_or_else(|e| e.into_inner()) = Instant::now();
    }
}

#[derive(Debug, Clone)]
pub(crate) struct QpConfig {
    pub instance_id: InstanceId,
    pub concurrency: u32,
    pub secret: ProviderSecret,
    pub settings: TransferSettings,
    pub inline_limit: usize,
    pub report_interval: Duration,
}

/// Latest utilization report and when it was made.
pub(crate) type ReportSlot = Arc<Mutex<(InstanceMetrics, Instant)>>;

type Job = (InvocationEnvelope, TcpStream);

pub struct QueueProxy {
    instance_id: InstanceId,
    addr: SocketAddr,
    counters: Arc<QpCounters>,
    gauge: Arc<FlowGauge>,
    report: ReportSlot,
    tasks: Vec<JoinHandle<()>>,
}

impl QueueProxy {
    /// Binds and starts serving. `function_server` becomes `Some` once the
    /// instance has booted.
    pub(crate) async fn start(bind: SocketAddr, cfg: QpConfig, function_server: watch::Receiver<Option<SocketAddr>>) -> std::io::Result<Self> {
        let listener = TcpListener::bind(bind).await?;
        let addr = listener.local_addr()?;
        let counters = Arc::new(QpCounters::new());
        let gauge = FlowGauge::new();
        let (tx, rx) = mpsc::unbounded_channel::<Job>();
        let rx = Arc::new(tokio::sync::Mutex::new(rx));

        let core = Arc::new(QpCore { cfg: cfg.clone(), function_server, gauge: gauge.clone() });
        let mut tasks = vec![tokio::spawn(accept_loop(listener, tx, counters.clone(), cfg.inline_limit))];
        for _ in 0..cfg.concurrency.max(1) {
            tasks.push(tokio::spawn(worker(rx.clone(), core.clone(), counters.clone())));
        }
        let report = Arc::new(Mutex::new((snapshot(cfg.instance_id, &counters), Instant::now())));
        tasks.push(tokio::spawn(reporter(cfg.instance_id, counters.clone(), report.clone(), cfg.report_interval)));
        Ok(Self { instance_id: cfg.instance_id, addr, counters, gauge, report, tasks })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Live counters.
    pub fn metrics(&self) -> InstanceMetrics {
        snapshot(self.instance_id, &self.counters)
    }

    /// What the autoscaler last heard, and when.
    pub fn last_report(&self) -> (InstanceMetrics, Instant) {
        *self.report.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Received-but-unforwarded bytes of relayed pulls, with high-water mark.
    pub fn buffer_gauge(&self) -> &Arc<FlowGauge> {
        &self.gauge
    }

    pub fn stop(&self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

impl Drop for QueueProxy {
    fn drop(&mut self) {
        self.stop();
    }
}

fn snapshot(instance_id: InstanceId, counters: &QpCounters) -> InstanceMetrics {
    InstanceMetrics {
        instance_id,
        queue_depth: counters.queue_depth.load(Ordering::Acquire),
        in_flight: counters.in_flight.load(Ordering::Acquire),
        last_active: *counters.last_active.lock().unwrap_or_else(|e| e.into_inner()),
    }
}

async fn reporter(id: InstanceId, counters: Arc<QpCounters>, slot: ReportSlot, interval: Duration) {
    let mut tick = tokio::time::interval(interval);
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tick.tick().await;
        *slot.lock().unwrap_or_else(|e| e.into_inner()) = (snapshot(id, &counters), Instant::now());
    }
}

async fn accept_loop(listener: TcpListener, tx: mpsc::UnboundedSender<Job>, counters: Arc<QpCounters>, inline_limit: usize) {
    loop {
        let Ok((mut stream, _)) = listener.accept().await else { continue };
        let _ = stream.set_nodelay(true);
        // Read in the accept loop so queue order equals connection order.
        match tokio::time::timeout(READ_TIMEOUT, read_envelope(&mut stream, inline_limit + HEADER_SLACK)).await {
            Ok(Ok(env)) => {
                counters.queue_depth.fetch_add(1, Ordering::AcqRel);
                if tx.send((env, stream)).is_err() {
                    return;
                }
            }
            _ => continue,
        }
    }
}

async fn worker(rx: Arc<tokio::sync::Mutex<mpsc::UnboundedReceiver<Job>>>, core: Arc<QpCore>, counters: Arc<QpCounters>) {
    loop {
        let job = rx.lock().await.recv().await;
        let Some((env, mut stream)) = job else { return };
        counters.queue_depth.fetch_sub(1, Ordering::AcqRel);
        counters.in_flight.fetch_add(1, Ordering::AcqRel);
        counters.touch();
        let resp = core.handle_invocation(&env).await;
        let _ = write_envelope(&mut stream, &resp).await;
        counters.in_flight.fetch_sub(1, Ordering::AcqRel);
        counters.touch();
    }
}

enum Body {
    Inline,
    Buffered(Bytes),
    Relayed(PullStream),
}

struct QpCore {
    cfg: QpConfig,
    function_server: watch::Receiver<Option<SocketAddr>>,
    gauge: Arc<FlowGauge>,
}

impl QpCore {
    fn ready_function_server(&self) -> Option<SocketAddr> {
        *self.function_server.borrow()
    }

    async fn wait_function_server(&self) -> Option<SocketAddr> {
        let mut rx = self.function_server.clone();
        rx.wait_for(Option::is_some).await.ok().and_then(|a| *a)
    }

    /// Resolves the reference (if any), hands the reconstructed request to the
    /// function server and returns its response. The handler never runs when
    /// the object cannot be retrieved.
    async fn handle_invocation(&self, env: &InvocationEnvelope) -> InvocationEnvelope {
        let body = match env.reference() {
            None => Body::Inline,
            Some(token) => {
                let plain = match decode_reference(&XdtReference::from_token(token), &self.cfg.secret) {
                    Ok(p) => p,
                    Err(e) => return env.fail(ErrorCode::AuthFailed, e.to_string()),
                };
                let cfg = self.cfg.settings.get();
                let relay = cfg.streaming_mode == StreamingMode::CutThrough && self.ready_function_server().is_some();
                let pull = match open_pull(&plain, &self.cfg.secret, &cfg, Some(self.gauge.clone())).await {
                    Ok(p) => p,
                    Err(e) => return env.fail(ErrorCode::XdtTransferFailed, e.to_string()),
                };
                if relay {
                    Body::Relayed(pull)
                } else {
                    match pull.collect().await {
                        Ok(payload) => Body::Buffered(payload),
                        Err(e) => return env.fail(ErrorCode::XdtTransferFailed, e.to_string()),
                    }
                }
            }
        };
        let Some(fs) = self.wait_function_server().await else {
            return env.fail(ErrorCode::InstanceFailed, "function server is gone");
        };
        self.forward(fs, env, body).await
    }

    async fn forward(&self, fs: SocketAddr, env: &InvocationEnvelope, body: Body) -> InvocationEnvelope {
        let mut stream = match TcpStream::connect(fs).await {
            Ok(s) => s,
            Err(e) => return env.fail(ErrorCode::InstanceFailed, format!("function server {fs}: {e}")),
        };
        let _ = stream.set_nodelay(true);

        let mut transfer_error = None;
        let sent = async {
            if let Body::Inline = body {
                return write_envelope(&mut stream, env).await;
            }
            let mut head = env.clone();
            head.headers.remove(REF_HEADER);
            head.headers.insert(INBOUND_HEADER.to_owned(), INBOUND_STREAM.to_owned());
            head.inline_body = Bytes::new();
            let chunk_size = self.cfg.settings.get().chunk_size;
            let mut out = BufWriter::with_capacity(chunk_size + frame::FRAME_HEADER_LEN, &mut stream);
            write_envelope(&mut out, &head).await?;
            match body {
                Body::Inline => unreachable!(),
                Body::Buffered(payload) => {
                    for c in chunks(&payload, chunk_size) {
                        frame::write_chunk(&mut out, &c).await?;
                    }
                }
                Body::Relayed(mut pull) => {
                    while let Some(item) = pull.next_chunk().await {
                        match item {
                            Ok(c) => frame::write_chunk(&mut out, &c).await?,
                            Err(e) => {
                                frame::write_abort(&mut out, 0).await?;
                                transfer_error = Some(e);
                                break;
                            }
                        }
                    }
                }
            }
            out.flush().await?;
            Ok(())
        }
        .await;

        if let Some(e) = transfer_error {
            return env.fail(ErrorCode::XdtTransferFailed, e.to_string());
        }
        if let Err(e) = sent {
            return env.fail(ErrorCode::InstanceFailed, format!("function server {fs}: {e}"));
        }
        match read_envelope(&mut stream, self.cfg.inline_limit + HEADER_SLACK).await {
            Ok(resp) => resp,
            Err(e) => env.fail(ErrorCode::InstanceFailed, format!("function server {fs}: {e}")),
        }
    }
}
