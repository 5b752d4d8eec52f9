//! Keeps `clamp(ceil(outstanding / concurrency), min_scale, max_scale)`
//! instances alive per function and retires ones idle past keep-alive.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use tokio::sync::Notify;
use tokio::task::JoinHandle;

use super::activator::Activator;
use super::instance::{FunctionSpec, Instance, InstanceEnv};
use super::metrics::{desired_instances, InstanceId, InstanceState};

/// Consecutive missed reports after which an instance is presumed dead.
const MISSED_REPORTS: u32 = 10;

pub(crate) struct Fleet {
    specs: BTreeMap<String, FunctionSpec>,
    env: InstanceEnv,
    activator: Arc<Activator>,
    instances: Mutex<HashMap<String, BTreeMap<InstanceId, Arc<Instance>>>>,
    next_id: AtomicU64,
}

impl Fleet {
    pub(crate) fn new(specs: Vec<FunctionSpec>, env: InstanceEnv, activator: Arc<Activator>) -> Self {
        for s in &specs {
            activator.register_function(&s.url, s.concurrency);
        }
        Self {
            specs: specs.into_iter().map(|s| (s.url.clone(), s)).collect(),
            env,
            activator,
            instances: Mutex::default(),
            next_id: AtomicU64::new(0),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, BTreeMap<InstanceId, Arc<Instance>>>> {
        self.instances.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub(crate) fn instances(&self, url: &str) -> Vec<Arc<Instance>> {
        self.lock().get(url).map(|m| m.values().cloned().collect()).unwrap_or_default()
    }

    pub(crate) fn all(&self) -> Vec<Arc<Instance>> {
        self.lock().values().flat_map(|m| m.values().cloned()).collect()
    }

    pub(crate) fn find(&self, id: InstanceId) -> Option<Arc<Instance>> {
        self.lock().values().find_map(|m| m.get(&id).cloned())
    }

    async fn spawn(&self, spec: &FunctionSpec) -> std::io::Result<()> {
        let id = InstanceId(self.next_id.fetch_add(1, Ordering::Relaxed));
        let inst = Instance::launch(id, spec, &self.env).await?;
        self.lock().entry(spec.url.clone()).or_default().insert(id, inst.clone());
        self.activator.add_instance(&spec.url, id, inst.qp_addr(), inst.subscribe());
        Ok(())
    }

    /// One scaling pass over every function.
    pub(crate) async fn reconcile(&self) {
        let deadline = self.env.metrics_interval * MISSED_REPORTS;
        for inst in self.all() {
            if inst.state() != InstanceState::Dead && inst.last_report().1.elapsed() > deadline {
                tracing::warn!(instance = %inst.id(), "no metric reports, marking dead");
                inst.mark_dead();
            }
        }
        for spec in self.specs.values() {
            let live: Vec<Arc<Instance>> = {
                let mut all = self.lock();
                let m = all.entry(spec.url.clone()).or_default();
                m.retain(|_, i| i.state() != InstanceState::Dead);
                m.values().filter(|i| i.state() != InstanceState::Draining).cloned().collect()
            };
            let load = self.activator.load(&spec.url);
            let desired = desired_instances(load.total(), spec.concurrency, spec.min_scale, spec.max_scale) as usize;

            for _ in live.len()..desired {
                if let Err(e) = self.spawn(spec).await {
                    tracing::warn!(url = %spec.url, error = %e, "instance launch failed");
                    break;
                }
            }

            if live.len() > desired {
                let now = Instant::now();
                let mut surplus = live.len() - desired;
                for inst in live.iter().rev() {
                    if surplus == 0 {
                        break;
                    }
                    let m = inst.last_report().0;
                    let idle = inst.state() == InstanceState::Ready
                        && m.load() == 0
                        && load.outstanding.get(&inst.id()).copied().unwrap_or(0) == 0
                        && now.duration_since(m.last_active) >= spec.keep_alive;
                    if idle && self.activator.begin_drain(&spec.url, inst.id()) {
                        tracing::debug!(instance = %inst.id(), "scaling down");
                        inst.shutdown();
                        surplus -= 1;
                    }
                }
            }
        }
    }

    pub(crate) fn shutdown(&self) {
        for inst in self.lock().drain().flat_map(|(_, m)| m.into_values()) {
            inst.shutdown();
        }
    }
}

/// Runs [`Fleet::reconcile`] every interval and whenever poked.
pub(crate) fn spawn_autoscaler(fleet: Arc<Fleet>, poke: Arc<Notify>, interval: Duration) -> JoinHandle<()> {
    tokio::spawn(async move {
        loop {
            fleet.reconcile().await;
            tokio::select! {
                _ = tokio::time::sleep(interval) => {}
                _ = poke.notified() => {}
            }
        }
    })
}
