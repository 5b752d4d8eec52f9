//! A whole mini-cluster in one process: activator, autoscaler, instances and
//! the two storage services, each on its own local port.

use std::collections::{BTreeSet, HashMap};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tokio::sync::Notify;
use tokio::task::JoinHandle;

use crate::controlplane::envelope::DEFAULT_INLINE_LIMIT;
use crate::controlplane::{spawn_autoscaler, Activator, Fleet, FunctionSpec, Instance, InstanceEnv, InstanceId, InstanceState};
use crate::costmodel::{RunLedger, DEFAULT_MEMORY_GB};
use crate::dataplane::{ObjectStore, TransferConfig, TransferSettings};
use crate::refcrypto::ProviderSecret;
use crate::sdk::{ExecutionLedger, HandlerRegistry, ProviderLink, Sdk, SdkContext, Transport};
use crate::storage::{unix_now, StorageClient, StorageKind, StorageProfile, StorageServer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FunctionConfig {
    pub url: String,
    /// Name in the [`HandlerRegistry`].
    pub handler: String,
    pub min_scale: u32,
    pub max_scale: u32,
    pub concurrency: u32,
    pub keep_alive_ms: u64,
    pub boot_delay_ms: u64,
}

impl Default for FunctionConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            handler: String::new(),
            min_scale: 0,
            max_scale: 32,
            concurrency: 1,
            keep_alive_ms: 60_000,
            boot_delay_ms: 50,
        }
    }
}

impl FunctionConfig {
    pub fn new(url: impl Into<String>, handler: impl Into<String>) -> Self {
        Self { url: url.into(), handler: handler.into(), ..Self::default() }
    }

    /// `min_scale = max_scale = n`.
    pub fn fixed(mut self, n: u32) -> Self {
        self.min_scale = n;
        self.max_scale = n;
        self
    }

    pub fn boot_delay_ms(mut self, ms: u64) -> Self {
        self.boot_delay_ms = ms;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageServiceConfig {
    pub kind: StorageKind,
    /// 0 picks a free port.
    #[serde(default)]
    pub port: u16,
    #[serde(default)]
    pub profile: Option<StorageProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub host: IpAddr,
    /// 0 picks a free port.
    pub activator_port: u16,
    pub functions: Vec<FunctionConfig>,
    pub transfer: TransferConfig,
    /// Default transport of function instances.
    pub transport: Transport,
    pub storage: Vec<StorageServiceConfig>,
    pub metrics_interval_ms: u64,
    pub inline_limit: usize,
    pub split_threshold: usize,
    /// Memory footprint used for compute billing.
    pub memory_gb: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            host: IpAddr::V4(Ipv4Addr::LOCALHOST),
            activator_port: 0,
            functions: Vec::new(),
            transfer: TransferConfig::default(),
            transport: Transport::Xdt,
            storage: vec![
                StorageServiceConfig { kind: StorageKind::ColdStore, port: 0, profile: None },
                StorageServiceConfig { kind: StorageKind::MemCache, port: 0, profile: None },
            ],
            metrics_interval_ms: 100,
            inline_limit: DEFAULT_INLINE_LIMIT,
            split_threshold: 0,
            memory_gb: DEFAULT_MEMORY_GB,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("invalid cluster config: {0}")]
    Config(String),
    #[error("cannot bind {what} on port {port}: {source}")]
    Bind {
        what: String,
        port: u16,
        #[source]
        source: std::io::Error,
    },
    #[error("reading {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("no function registered at `{0}`")]
    UnknownFunction(String),
    #[error("timed out waiting for {0}")]
    Timeout(String),
}

impl ClusterConfig {
    pub fn with_functions(functions: impl IntoIterator<Item = FunctionConfig>) -> Self {
        Self { functions: functions.into_iter().collect(), ..Self::default() }
    }

    pub fn load(path: &Path) -> Result<Self, ClusterError> {
        let text = std::fs::read_to_string(path).map_err(|source| ClusterError::Read { path: path.display().to_string(), source })?;
        serde_json::from_str(&text).map_err(|source| ClusterError::Parse { path: path.display().to_string(), source })
    }

    pub fn validate(&self, registry: &HandlerRegistry) -> Result<(), ClusterError> {
        let bad = |m: String| Err(ClusterError::Config(m));
        self.transfer.validate().map_err(ClusterError::Config)?;
        if self.metrics_interval_ms == 0 {
            return bad("metrics_interval_ms must be positive".into());
        }
        if self.inline_limit == 0 {
            return bad("inline_limit must be positive".into());
        }
        if !(self.memory_gb > 0.0 && self.memory_gb.is_finite()) {
            return bad(format!("memory_gb must be positive, got {}", self.memory_gb));
        }
        let mut ports = BTreeSet::new();
        let named = std::iter::once(("activator".to_owned(), self.activator_port))
            .chain(self.storage.iter().map(|s| (format!("{} service", s.kind), s.port)));
        for (what, port) in named {
            if port != 0 && !ports.insert(port) {
                let source = std::io::Error::new(std::io::ErrorKind::AddrInUse, "port is assigned to another component");
                return Err(ClusterError::Bind { what, port, source });
            }
        }
        let mut kinds = BTreeSet::new();
        for s in &self.storage {
            if !kinds.insert(s.kind.as_str()) {
                return bad(format!("storage service {} configured twice", s.kind));
            }
            if let Some(p) = &s.profile {
                p.validate().map_err(|e| ClusterError::Config(format!("{}: {e}", s.kind)))?;
            }
        }
        let mut urls = BTreeSet::new();
        for f in &self.functions {
            if f.url.is_empty() {
                return bad("function url must not be empty".into());
            }
            if !urls.insert(f.url.as_str()) {
                return bad(format!("function `{}` defined twice", f.url));
            }
            if registry.get(&f.handler).is_none() {
                return bad(format!("function `{}` uses unknown handler `{}`", f.url, f.handler));
            }
            if f.max_scale == 0 || f.min_scale > f.max_scale {
                return bad(format!("function `{}`: need 0 <= min_scale <= max_scale and max_scale >= 1", f.url));
            }
            if f.concurrency == 0 {
                return bad(format!("function `{}`: concurrency must be at least 1", f.url));
            }
        }
        Ok(())
    }
}

pub struct Cluster {
    config: ClusterConfig,
    secret: ProviderSecret,
    settings: TransferSettings,
    ledger: ExecutionLedger,
    activator: Arc<Activator>,
    fleet: Arc<Fleet>,
    autoscaler: JoinHandle<()>,
    storage: Vec<(StorageKind, StorageServer)>,
    driver: Arc<SdkContext>,
}

impl std::fmt::Debug for Cluster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cluster")
            .field("activator", &self.activator.local_addr())
            .field("functions", &self.activator.functions())
            .finish_non_exhaustive()
    }
}

impl Cluster {
    pub async fn start(config: ClusterConfig, registry: &HandlerRegistry) -> Result<Self, ClusterError> {
        config.validate(registry)?;
        let secret = ProviderSecret::generate();
        let settings = TransferSettings::new(config.transfer);
        let host = config.host;

        let mut storage = Vec::new();
        for s in &config.storage {
            let profile = s.profile.clone().unwrap_or_else(|| StorageProfile::for_kind(s.kind));
            let server = StorageServer::bind(SocketAddr::new(host, s.port), profile)
                .await
                .map_err(|source| ClusterError::Bind { what: format!("{} service", s.kind), port: s.port, source })?;
            storage.push((s.kind, server));
        }

        let poke = Arc::new(Notify::new());
        let activator = Activator::bind(SocketAddr::new(host, config.activator_port), config.inline_limit, poke.clone())
            .await
            .map_err(|source| ClusterError::Bind { what: "activator".into(), port: config.activator_port, source })?;
        let activator = Arc::new(activator);

        let mut link = ProviderLink::new(secret.clone(), activator.local_addr());
        link.storage = storage.iter().map(|(k, s)| (*k, s.local_addr())).collect::<HashMap<_, _>>();
        link.settings = settings.clone();
        link.inline_limit = config.inline_limit;
        link.split_threshold = config.split_threshold;
        link.host = host;

        let specs = config
            .functions
            .iter()
            .map(|f| FunctionSpec {
                url: f.url.clone(),
                handler: registry.get(&f.handler).expect("validated"),
                min_scale: f.min_scale,
                max_scale: f.max_scale,
                concurrency: f.concurrency,
                keep_alive: Duration::from_millis(f.keep_alive_ms),
                boot_delay: Duration::from_millis(f.boot_delay_ms),
            })
            .collect();
        let ledger = ExecutionLedger::new();
        let metrics_interval = Duration::from_millis(config.metrics_interval_ms);
        let env = InstanceEnv { link: link.clone(), transport: config.transport, ledger: ledger.clone(), metrics_interval };
        let fleet = Arc::new(Fleet::new(specs, env, activator.clone()));
        fleet.reconcile().await;
        let autoscaler = spawn_autoscaler(fleet.clone(), poke, metrics_interval);

        let driver = SdkContext::start(link, config.transport)
            .await
            .map_err(|source| ClusterError::Bind { what: "driver data server".into(), port: 0, source })?;

        Ok(Self {
            config,
            secret,
            settings,
            ledger,
            activator,
            fleet,
            autoscaler,
            storage,
            driver,
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn activator_addr(&self) -> SocketAddr {
        self.activator.local_addr()
    }

    /// SDK view for the driver, using the cluster's default transport.
    pub fn client(&self) -> Sdk {
        self.driver.sdk()
    }

    pub fn driver_store(&self) -> &ObjectStore {
        self.driver.store()
    }

    /// Everything an out-of-process driver needs to join as a trusted SDK.
    pub fn provider_link(&self) -> ProviderLink {
        self.driver.link().clone()
    }

    pub fn secret(&self) -> &ProviderSecret {
        &self.secret
    }

    /// Transfer parameters shared by every component; adjustable between runs.
    pub fn settings(&self) -> &TransferSettings {
        &self.settings
    }

    pub fn ledger(&self) -> &ExecutionLedger {
        &self.ledger
    }

    pub fn storage_client(&self, kind: StorageKind) -> Option<StorageClient> {
        self.storage.iter().find(|(k, _)| *k == kind).map(|(_, s)| StorageClient::new(s.local_addr()))
    }

    pub fn storage_addrs(&self) -> Vec<(StorageKind, SocketAddr)> {
        self.storage.iter().map(|(k, s)| (*k, s.local_addr())).collect()
    }

    pub fn instances(&self, url: &str) -> Vec<Arc<Instance>> {
        self.fleet.instances(url)
    }

    pub fn all_instances(&self) -> Vec<Arc<Instance>> {
        self.fleet.all()
    }

    pub fn instance(&self, id: InstanceId) -> Option<Arc<Instance>> {
        self.fleet.find(id)
    }

    /// Abruptly kills an instance. Returns `false` if it is unknown.
    pub fn kill_instance(&self, id: InstanceId) -> bool {
        match self.fleet.find(id) {
            Some(i) => {
                i.kill();
                true
            }
            None => false,
        }
    }

    /// Waits until `url` has at least `n` ready instances.
    pub async fn wait_ready(&self, url: &str, n: usize, timeout: Duration) -> Result<(), ClusterError> {
        if !self.activator.functions().iter().any(|f| f == url) {
            return Err(ClusterError::UnknownFunction(url.to_owned()));
        }
        let deadline = Instant::now() + timeout;
        loop {
            let ready = self.fleet.instances(url).iter().filter(|i| i.state() == InstanceState::Ready).count();
            if ready >= n {
                return Ok(());
            }
            if Instant::now() >= deadline {
                return Err(ClusterError::Timeout(format!("{n} ready instance(s) of `{url}`")));
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
    }

    /// Waits for every function to reach its `min_scale` ready instances.
    pub async fn wait_min_scale(&self, timeout: Duration) -> Result<(), ClusterError> {
        for f in &self.config.functions {
            self.wait_ready(&f.url, f.min_scale as usize, timeout).await?;
        }
        Ok(())
    }

    /// Collects a cost ledger for the executions recorded since `mark`.
    pub async fn run_ledger(&self, transport: Transport, mark: usize, since_unix: f64) -> RunLedger {
        let mut objects = Vec::new();
        if let Some(kind) = transport.storage_kind() {
            if let Some(c) = self.storage_client(kind) {
                objects = c.ledger(since_unix).await.unwrap_or_default();
            }
        }
        RunLedger {
            transport: transport.as_str().to_owned(),
            memory_gb: self.config.memory_gb,
            executions: self.ledger.since(mark),
            objects,
            finished_at: unix_now(),
        }
    }

    pub fn shutdown(&self) {
        self.autoscaler.abort();
        self.activator.shutdown();
        self.fleet.shutdown();
        self.driver.shutdown();
        for (_, s) in &self.storage {
            s.shutdown();
        }
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        self.shutdown();
    }
}
