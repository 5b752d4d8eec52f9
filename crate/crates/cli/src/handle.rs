//! Connection details a separate driver process needs to join a running cluster.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use xdt::dataplane::{TransferConfig, TransferSettings};
use xdt::refcrypto::ProviderSecret;
use xdt::sdk::{ProviderLink, SdkContext, Transport};
use xdt::storage::StorageKind;
use xdt::Cluster;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterHandle {
    pub activator: SocketAddr,
    /// Hex-encoded provider secret. Whoever holds this file is trusted.
    pub secret: String,
    pub storage: HashMap<StorageKind, SocketAddr>,
    pub transfer: TransferConfig,
    pub inline_limit: usize,
    pub split_threshold: usize,
}

impl ClusterHandle {
    pub fn of(cluster: &Cluster) -> Self {
        let cfg = cluster.config();
        Self {
            activator: cluster.activator_addr(),
            secret: cluster.secret().to_provisioning_hex(),
            storage: cluster.storage_addrs().into_iter().collect(),
            transfer: cluster.settings().get(),
            inline_limit: cfg.inline_limit,
            split_threshold: cfg.split_threshold,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), String> {
        let json = serde_json::to_vec_pretty(self).expect("handle serializes");
        std::fs::write(path, json).map_err(|e| format!("writing {}: {e}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let raw = std::fs::read(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
        serde_json::from_slice(&raw).map_err(|e| format!("parsing {}: {e}", path.display()))
    }

    pub async fn connect(&self) -> Result<Arc<SdkContext>, String> {
        let secret = ProviderSecret::from_provisioning_hex(&self.secret).ok_or("handle carries a malformed secret")?;
        let mut link = ProviderLink::new(secret, self.activator);
        link.storage = self.storage.clone();
        link.settings = TransferSettings::new(self.transfer);
        link.inline_limit = self.inline_limit;
        link.split_threshold = self.split_threshold;
        SdkContext::start(link, Transport::Xdt).await.map_err(|e| format!("starting driver data server: {e}"))
    }
}
