//! Cluster entry point. Routes each envelope to the least-loaded Ready
//! instance and holds it in a per-function FIFO while none is Ready.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use tokio::io::BufReader;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot, watch, Notify};
use tokio::task::{JoinHandle, JoinSet};

use super::envelope::{read_envelope, write_envelope, InvocationEnvelope, HEADER_SLACK};
use super::metrics::{InstanceId, InstanceState};
use crate::error::ErrorCode;

struct Pending {
    env: InvocationEnvelope,
    reply: oneshot::Sender<InvocationEnvelope>,
}

struct Route {
    state: InstanceState,
    outstanding: u32,
    dispatch: mpsc::UnboundedSender<Pending>,
}

struct RouteState {
    concurrency: u32,
    instances: BTreeMap<InstanceId, Route>,
    pending: VecDeque<Pending>,
}

impl RouteState {
    /// Least-loaded Ready instance, lowest id on ties. With none Ready, a
    /// buffered envelope may be bound to a Booting instance with a free slot
    /// so its queue proxy can start pulling while the instance boots.
    fn pick(&self) -> Option<InstanceId> {
        let least = |state: InstanceState, cap: u32| {
            self.instances
                .iter()
                .filter(|(_, r)| r.state == state && r.outstanding < cap)
                .min_by_key(|(id, r)| (r.outstanding, **id))
                .map(|(id, _)| *id)
        };
        least(InstanceState::Ready, u32::MAX).or_else(|| least(InstanceState::Booting, self.concurrency))
    }

    fn drain_pending(&mut self) {
        while !self.pending.is_empty() {
            let Some(id) = self.pick() else { return };
            let p = self.pending.pop_front().expect("non-empty");
            let route = self.instances.get_mut(&id).expect("picked");
            route.outstanding += 1;
            if let Err(mpsc::error::SendError(p)) = route.dispatch.send(p) {
                route.outstanding -= 1;
                route.state = InstanceState::Dead;
                self.pending.push_front(p);
            }
        }
    }
}

/// Per-function load as the activator sees it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RouteLoad {
    pub pending: u32,
    pub outstanding: BTreeMap<InstanceId, u32>,
}

impl RouteLoad {
    pub fn total(&self) -> u32 {
        self.pending + self.outstanding.values().sum::<u32>()
    }
}

pub(crate) struct ActivatorShared {
    routes: Mutex<HashMap<String, RouteState>>,
    inline_limit: usize,
    scaler: Arc<Notify>,
}

impl ActivatorShared {
    fn routes(&self) -> std::sync::MutexGuard<'_, HashMap<String, RouteState>> {
        self.routes.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn submit(&self, env: InvocationEnvelope) -> Result<oneshot::Receiver<InvocationEnvelope>, InvocationEnvelope> {
        let mut routes = self.routes();
        let Some(route) = routes.get_mut(&env.function_url) else {
            let msg = format!("no function registered at `{}`", env.function_url);
            return Err(env.fail(ErrorCode::UnknownFunction, msg));
        };
        let (tx, rx) = oneshot::channel();
        route.pending.push_back(Pending { env, reply: tx });
        route.drain_pending();
        if !route.pending.is_empty() {
            self.scaler.notify_one();
        }
        Ok(rx)
    }

    fn finished(&self, url: &str, id: InstanceId) {
        let mut routes = self.routes();
        if let Some(route) = routes.get_mut(url) {
            if let Some(r) = route.instances.get_mut(&id) {
                r.outstanding = r.outstanding.saturating_sub(1);
            }
            route.drain_pending();
        }
        self.scaler.notify_one();
    }

    fn requeue(&self, url: &str, id: InstanceId, p: Pending) {
        let mut routes = self.routes();
        match routes.get_mut(url) {
            Some(route) => {
                if let Some(r) = route.instances.get_mut(&id) {
                    r.outstanding = r.outstanding.saturating_sub(1);
                    r.state = InstanceState::Dead;
                }
                route.pending.push_front(p);
                route.drain_pending();
            }
            None => {
                let _ = p.reply.send(p.env.fail(ErrorCode::UnknownFunction, "function removed"));
            }
        }
        self.scaler.notify_one();
    }

    fn set_state(&self, url: &str, id: InstanceId, state: InstanceState) {
        let mut routes = self.routes();
        if let Some(route) = routes.get_mut(url) {
            if state == InstanceState::Dead {
                route.instances.remove(&id);
            } else if let Some(r) = route.instances.get_mut(&id) {
                r.state = state;
            }
            route.drain_pending();
        }
        self.scaler.notify_one();
    }
}

pub struct Activator {
    addr: SocketAddr,
    shared: Arc<ActivatorShared>,
    accept: JoinHandle<()>,
    tasks: Mutex<Vec<JoinHandle<()>>>,
}

impl Activator {
    pub(crate) async fn bind(addr: SocketAddr, inline_limit: usize, scaler: Arc<Notify>) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(ActivatorShared { routes: Mutex::default(), inline_limit, scaler });
        let accept = tokio::spawn(accept_loop(listener, shared.clone()));
        Ok(Self { addr, shared, accept, tasks: Mutex::default() })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub(crate) fn register_function(&self, url: &str, concurrency: u32) {
        self.shared.routes().insert(
            url.to_owned(),
            RouteState { concurrency: concurrency.max(1), instances: BTreeMap::new(), pending: VecDeque::new() },
        );
    }

    pub fn functions(&self) -> Vec<String> {
        let mut v: Vec<String> = self.shared.routes().keys().cloned().collect();
        v.sort();
        v
    }

    /// Adds an instance and follows its lifecycle until it dies.
    pub(crate) fn add_instance(&self, url: &str, id: InstanceId, qp_addr: SocketAddr, mut states: watch::Receiver<InstanceState>) {
        let (tx, rx) = mpsc::unbounded_channel();
        {
            let mut routes = self.shared.routes();
            let Some(route) = routes.get_mut(url) else { return };
            let state = *states.borrow_and_update();
            route.instances.insert(id, Route { state, outstanding: 0, dispatch: tx });
            route.drain_pending();
        }
        let dispatcher = tokio::spawn(dispatcher(self.shared.clone(), url.to_owned(), id, qp_addr, rx));
        let shared = self.shared.clone();
        let url = url.to_owned();
        let follower = tokio::spawn(async move {
            loop {
                if states.changed().await.is_err() {
                    shared.set_state(&url, id, InstanceState::Dead);
                    return;
                }
                let state = *states.borrow_and_update();
                shared.set_state(&url, id, state);
                if state == InstanceState::Dead {
                    return;
                }
            }
        });
        let mut tasks = self.tasks.lock().unwrap_or_else(|e| e.into_inner());
        tasks.retain(|t| !t.is_finished());
        tasks.push(dispatcher);
        tasks.push(follower);
    }

    /// Marks an idle instance as draining; `false` if it still has work.
    pub(crate) fn begin_drain(&self, url: &str, id: InstanceId) -> bool {
        let mut routes = self.shared.routes();
        let Some(r) = routes.get_mut(url).and_then(|route| route.instances.get_mut(&id)) else { return true };
        if r.outstanding > 0 {
            return false;
        }
        r.state = InstanceState::Draining;
        true
    }

    pub fn load(&self, url: &str) -> RouteLoad {
        let routes = self.shared.routes();
        routes
            .get(url)
            .map(|route| RouteLoad {
                pending: route.pending.len() as u32,
                outstanding: route.instances.iter().map(|(id, r)| (*id, r.outstanding)).collect(),
            })
            .unwrap_or_default()
    }

    pub fn shutdown(&self) {
        self.accept.abort();
        for t in self.tasks.lock().unwrap_or_else(|e| e.into_inner()).drain(..) {
            t.abort();
        }
    }
}

impl Drop for Activator {
    fn drop(&mut self) {
        self.shutdown();
    }
}

async fn accept_loop(listener: TcpListener, shared: Arc<ActivatorShared>) {
    let mut conns = JoinSet::new();
    loop {
        tokio::select! {
            accepted = listener.accept() => {
                let Ok((stream, _)) = accepted else { continue };
                conns.spawn(handle_client(stream, shared.clone()));
            }
            Some(_) = conns.join_next(), if !conns.is_empty() => {}
        }
    }
}

async fn handle_client(stream: TcpStream, shared: Arc<ActivatorShared>) {
    let _ = stream.set_nodelay(true);
    let mut stream = BufReader::new(stream);
    let Ok(env) = read_envelope(&mut stream, shared.inline_limit + HEADER_SLACK).await else { return };
    let resp = if env.inline_body.len() > shared.inline_limit {
        let msg = format!("inline body of {} bytes exceeds the {} byte limit", env.inline_body.len(), shared.inline_limit);
        env.fail(ErrorCode::BadRequest, msg)
    } else {
        let failed = env.fail(ErrorCode::InstanceFailed, "request dropped");
        match shared.submit(env) {
            Ok(rx) => rx.await.unwrap_or(failed),
            Err(resp) => resp,
        }
    };
    let _ = write_envelope(stream.get_mut(), &resp).await;
}

/// Hands envelopes to one instance's queue proxy in order. A refused
/// connection puts the envelope back at the head of the queue; once an
/// envelope has been sent it is never retried.
async fn dispatcher(shared: Arc<ActivatorShared>, url: String, id: InstanceId, qp: SocketAddr, mut rx: mpsc::UnboundedReceiver<Pending>) {
    let mut inflight = JoinSet::new();
    loop {
        let p = tokio::select! {
            p = rx.recv() => match p { Some(p) => p, None => break },
            Some(_) = inflight.join_next(), if !inflight.is_empty() => continue,
        };
        let mut stream = match TcpStream::connect(qp).await {
            Ok(s) => s,
            Err(_) => {
                shared.requeue(&url, id, p);
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        if write_envelope(&mut stream, &p.env).await.is_err() {
            shared.requeue(&url, id, p);
            continue;
        }
        let (shared, url) = (shared.clone(), url.clone());
        inflight.spawn(async move {
            let mut stream = BufReader::new(stream);
            let resp = match read_envelope(&mut stream, shared.inline_limit + HEADER_SLACK).await {
                Ok(resp) => resp,
                Err(e) => p.env.fail(ErrorCode::InstanceFailed, format!("instance {id} dropped the request: {e}")),
            };
            shared.finished(&url, id);
            let _ = p.reply.send(resp);
        });
    }
    while inflight.join_next().await.is_some() {}
}
