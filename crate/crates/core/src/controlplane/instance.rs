//! One function instance: its queue proxy plus a function server that comes
//! up after the boot delay.

use std::fmt;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use super::metrics::{InstanceId, InstanceMetrics, InstanceState};
use super::queue_proxy::{QpConfig, QueueProxy};
use crate::dataplane::{FlowGauge, ObjectStore};
use crate::sdk::{serve, ExecutionLedger, FunctionHandler, ProviderLink, SdkContext, ServeOptions, Transport};

#[derive(Clone)]
pub struct FunctionSpec {
    pub url: String,
    pub handler: Arc<dyn FunctionHandler>,
    pub min_scale: u32,
    pub max_scale: u32,
    pub concurrency: u32,
    pub keep_alive: Duration,
    pub boot_delay: Duration,
}

impl fmt::Debug for FunctionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FunctionSpec")
            .field("url", &self.url)
            .field("min_scale", &self.min_scale)
            .field("max_scale", &self.max_scale)
            .field("concurrency", &self.concurrency)
            .field("keep_alive", &self.keep_alive)
            .field("boot_delay", &self.boot_delay)
            .finish_non_exhaustive()
    }
}

/// What every instance of a cluster shares.
#[derive(Debug, Clone)]
pub(crate) struct InstanceEnv {
    pub link: ProviderLink,
    pub transport: Transport,
    pub ledger: ExecutionLedger,
    pub metrics_interval: Duration,
}

pub struct Instance {
    id: InstanceId,
    function_url: String,
    qp: QueueProxy,
    state: watch::Sender<InstanceState>,
    context: Arc<Mutex<Option<Arc<SdkContext>>>>,
    boot: JoinHandle<()>,
    server: Arc<Mutex<Option<JoinHandle<()>>>>,
}

impl fmt::Debug for Instance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Instance")
            .field("id", &self.id)
            .field("function_url", &self.function_url)
            .field("state", &self.state())
            .field("qp", &self.qp.addr())
            .finish()
    }
}

impl Instance {
    /// The queue proxy is reachable as soon as this returns; the function
    /// server follows after `spec.boot_delay`.
    pub(crate) async fn launch(id: InstanceId, spec: &FunctionSpec, env: &InstanceEnv) -> std::io::Result<Arc<Self>> {
        let (fs_tx, fs_rx) = watch::channel(None);
        let qp_cfg = QpConfig {
            instance_id: id,
            concurrency: spec.concurrency,
            secret: env.link.secret.clone(),
            settings: env.link.settings.clone(),
            inline_limit: env.link.inline_limit,
            report_interval: env.metrics_interval,
        };
        let qp = QueueProxy::start(SocketAddr::new(env.link.host, 0), qp_cfg, fs_rx).await?;
        let (state, _) = watch::channel(InstanceState::Booting);
        let context = Arc::new(Mutex::new(None));
        let server = Arc::new(Mutex::new(None));

        let boot = {
            let (spec, env) = (spec.clone(), env.clone());
            let (state, context, server) = (state.clone(), context.clone(), server.clone());
            tokio::spawn(async move {
                tokio::time::sleep(spec.boot_delay).await;
                match boot_function_server(&spec, &env).await {
                    Ok((ctx, addr, task)) => {
                        *context.lock().unwrap_or_else(|e| e.into_inner()) = Some(ctx);
                        *server.lock().unwrap_or_else(|e| e.into_inner()) = Some(task);
                        let _ = fs_tx.send(Some(addr));
                        state.send_replace(InstanceState::Ready);
                        // Keep the sender alive so the proxy never sees it vanish.
                        std::future::pending::<()>().await;
                    }
                    Err(e) => {
                        tracing::warn!(instance = %id, error = %e, "boot failed");
                        state.send_replace(InstanceState::Dead);
                    }
                }
            })
        };
        tracing::debug!(instance = %id, url = %spec.url, qp = %qp.addr(), "instance launched");
        Ok(Arc::new(Self { id, function_url: spec.url.clone(), qp, state, context, boot, server }))
    }

    pub fn id(&self) -> InstanceId {
        self.id
    }

    pub fn function_url(&self) -> &str {
        &self.function_url
    }

    pub fn qp_addr(&self) -> SocketAddr {
        self.qp.addr()
    }

    pub fn state(&self) -> InstanceState {
        *self.state.borrow()
    }

    pub fn subscribe(&self) -> watch::Receiver<InstanceState> {
        self.state.subscribe()
    }

    pub fn metrics(&self) -> InstanceMetrics {
        self.qp.metrics()
    }

    pub fn last_report(&self) -> (InstanceMetrics, Instant) {
        self.qp.last_report()
    }

    pub fn qp_gauge(&self) -> &Arc<FlowGauge> {
        self.qp.buffer_gauge()
    }

    /// The instance's local object store, once booted.
    pub fn store(&self) -> Option<ObjectStore> {
        self.context.lock().unwrap_or_else(|e| e.into_inner()).as_ref().map(|c| c.store().clone())
    }

    pub fn data_addr(&self) -> Option<SocketAddr> {
        self.context.lock().unwrap_or_else(|e| e.into_inner()).as_ref().map(|c| c.data_addr())
    }

    /// Graceful teardown: buffered objects are released, then everything stops.
    pub fn shutdown(&self) {
        if self.state() == InstanceState::Dead {
            return;
        }
        self.state.send_replace(InstanceState::Draining);
        self.stop();
    }

    /// Abrupt failure: everything stops and nobody is told. The autoscaler
    /// notices when the metric reports dry up.
    pub fn kill(&self) {
        self.halt();
    }

    pub(crate) fn mark_dead(&self) {
        self.state.send_replace(InstanceState::Dead);
    }

    fn stop(&self) {
        self.halt();
        self.mark_dead();
    }

    fn halt(&self) {
        self.boot.abort();
        if let Some(t) = self.server.lock().unwrap_or_else(|e| e.into_inner()).take() {
            t.abort();
        }
        if let Some(ctx) = self.context.lock().unwrap_or_else(|e| e.into_inner()).take() {
            ctx.shutdown();
        }
        self.qp.stop();
    }
}

impl Drop for Instance {
    fn drop(&mut self) {
        self.stop();
    }
}

async fn boot_function_server(spec: &FunctionSpec, env: &InstanceEnv) -> std::io::Result<(Arc<SdkContext>, SocketAddr, JoinHandle<()>)> {
    let ctx = SdkContext::start(env.link.clone(), env.transport).await?;
    let listener = TcpListener::bind(SocketAddr::new(env.link.host, 0)).await?;
    let addr = listener.local_addr()?;
    let opts = ServeOptions { function_url: spec.url.clone(), ledger: env.ledger.clone() };
    let task = tokio::spawn(serve(ctx.clone(), listener, spec.handler.clone(), opts));
    Ok((ctx, addr, task))
}
