use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::costmodel::BillingUnit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StorageKind {
    ColdStore,
    MemCache,
}

impl StorageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StorageKind::ColdStore => "cold-store",
            StorageKind::MemCache => "mem-cache",
        }
    }
}

impl fmt::Display for StorageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StorageKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cold-store" => Ok(StorageKind::ColdStore),
            "mem-cache" => Ok(StorageKind::MemCache),
            other => Err(format!("unknown storage profile `{other}`")),
        }
    }
}

/// Service characteristics injected by the emulated storage daemon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageProfile {
    pub name: StorageKind,
    /// Fixed delay added to every request.
    #[serde(with = "millis")]
    pub per_op_latency: Duration,
    /// Bytes per second; payload time is `len / bandwidth_cap`.
    pub bandwidth_cap: u64,
    pub price_rate: f64,
    pub billing_unit: BillingUnit,
}

impl StorageProfile {
    pub fn cold_store() -> Self {
        Self {
            name: StorageKind::ColdStore,
            per_op_latency: Duration::from_millis(15),
            bandwidth_cap: 200 * 1024 * 1024,
            price_rate: 0.02,
            billing_unit: BillingUnit::Month,
        }
    }

    pub fn mem_cache() -> Self {
        Self {
            name: StorageKind::MemCache,
            per_op_latency: Duration::from_millis(1),
            bandwidth_cap: 1024 * 1024 * 1024,
            price_rate: 0.02,
            billing_unit: BillingUnit::Hour,
        }
    }

    pub fn for_kind(kind: StorageKind) -> Self {
        match kind {
            StorageKind::ColdStore => Self::cold_store(),
            StorageKind::MemCache => Self::mem_cache(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.bandwidth_cap == 0 {
            return Err(format!("{}: bandwidth_cap must be positive", self.name));
        }
        if !(self.price_rate >= 0.0) {
            return Err(format!("{}: price_rate must be non-negative", self.name));
        }
        Ok(())
    }

    /// Injected service time for one request moving `len` payload bytes.
    pub fn service_time(&self, len: usize) -> Duration {
        self.per_op_latency + Duration::from_secs_f64(len as f64 / self.bandwidth_cap as f64)
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64() * 1e3)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let ms = f64::deserialize(d)?;
        if !(ms >= 0.0) {
            return Err(serde::de::Error::custom("latency must be non-negative"));
        }
        Ok(Duration::from_secs_f64(ms / 1e3))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_mib_at_100_mib_per_sec_is_100ms_plus_latency() {
        let p = StorageProfile {
            per_op_latency: Duration::from_millis(10),
            bandwidth_cap: 100 * 1024 * 1024,
            ..StorageProfile::cold_store()
        };
        assert_eq!(p.service_time(10 * 1024 * 1024), Duration::from_millis(110));
    }

    #[test]
    fn json_uses_milliseconds() {
        let p = StorageProfile::mem_cache();
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(v["per_op_latency"], 1.0);
        assert_eq!(v["name"], "mem-cache");
        let back: StorageProfile = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn zero_bandwidth_invalid() {
        let p = StorageProfile { bandwidth_cap: 0, ..StorageProfile::cold_store() };
        assert!(p.validate().is_err());
    }
}
