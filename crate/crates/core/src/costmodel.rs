//! Developer-facing cost of a workflow: per-invocation fee, compute billed by
//! GB-seconds, and storage billed by GB per billing unit under a
//! minimal-residency assumption (data freed right after its last retrieval).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::storage::LedgerEntry;

pub const HOURS_PER_MONTH: f64 = 730.5;
pub const DEFAULT_MEMORY_GB: f64 = 0.5;
pub const BYTES_PER_GB: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BillingUnit {
    Month,
    Hour,
    /// Nothing is billed for storage (direct transfers).
    None,
}

impl BillingUnit {
    pub fn seconds(self) -> Option<f64> {
        match self {
            BillingUnit::Month => Some(HOURS_PER_MONTH * 3600.0),
            BillingUnit::Hour => Some(3600.0),
            BillingUnit::None => None,
        }
    }

    /// Residency in seconds as a fraction of one billing unit.
    pub fn fraction(self, secs: f64) -> f64 {
        self.seconds().map_or(0.0, |unit| secs / unit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PricingProfile {
    pub invocation_fee: f64,
    /// Currency per GB-second.
    pub compute_rate: f64,
    /// Currency per GB per billing unit.
    pub storage_rate: f64,
    pub billing_unit: BillingUnit,
}

impl PricingProfile {
    pub const LAMBDA_INVOCATION_FEE: f64 = 2e-7;
    pub const LAMBDA_COMPUTE_RATE: f64 = 1.6667e-5;

    pub fn xdt() -> Self {
        Self {
            invocation_fee: Self::LAMBDA_INVOCATION_FEE,
            compute_rate: Self::LAMBDA_COMPUTE_RATE,
            storage_rate: 0.0,
            billing_unit: BillingUnit::None,
        }
    }

    pub fn cold_store() -> Self {
        Self { storage_rate: 0.02, billing_unit: BillingUnit::Month, ..Self::xdt() }
    }

    pub fn mem_cache() -> Self {
        Self { storage_rate: 0.02, billing_unit: BillingUnit::Hour, ..Self::xdt() }
    }

    pub fn validate(&self) -> Result<(), String> {
        let rates = [self.invocation_fee, self.compute_rate, self.storage_rate];
        if rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err("pricing rates must be finite and non-negative".into());
        }
        if self.billing_unit == BillingUnit::None && self.storage_rate != 0.0 {
            return Err("billing_unit none requires storage_rate 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub duration_s: f64,
    pub memory_gb: f64,
    pub bytes_stored_gb: f64,
    /// Fraction of one billing unit the stored bytes were resident.
    pub residency: f64,
}

impl InvocationRecord {
    pub fn compute_only(duration_s: f64) -> Self {
        Self { duration_s, memory_gb: DEFAULT_MEMORY_GB, bytes_stored_gb: 0.0, residency: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub compute: f64,
    pub storage: f64,
    pub total: f64,
}

impl std::ops::AddAssign for CostBreakdown {
    fn add_assign(&mut self, rhs: Self) {
        self.compute += rhs.compute;
        self.storage += rhs.storage;
        self.total += rhs.total;
    }
}

pub fn invocation_breakdown(rec: &InvocationRecord, p: &PricingProfile) -> CostBreakdown {
    let compute = p.invocation_fee + rec.duration_s * rec.memory_gb * p.compute_rate;
    let storage = match p.billing_unit {
        BillingUnit::None => 0.0,
        _ => rec.bytes_stored_gb * rec.residency * p.storage_rate,
    };
    CostBreakdown { compute, storage, total: compute + storage }
}

pub fn invocation_cost(rec: &InvocationRecord, p: &PricingProfile) -> f64 {
    invocation_breakdown(rec, p).total
}

pub fn workflow_cost(records: &[InvocationRecord], p: &PricingProfile) -> CostBreakdown {
    let mut sum = CostBreakdown::default();
    for r in records {
        sum += invocation_breakdown(r, p);
    }
    sum
}

/// Pricing profiles keyed by transport name (`xdt`, `cold-store`, `mem-cache`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingConfig {
    pub profiles: BTreeMap<String, PricingProfile>,
}

impl Default for PricingConfig {
    fn default() -> Self {
        Self {
            profiles: BTreeMap::from([
                ("xdt".to_owned(), PricingProfile::xdt()),
                ("cold-store".to_owned(), PricingProfile::cold_store()),
                ("mem-cache".to_owned(), PricingProfile::mem_cache()),
            ]),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CostError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("invalid pricing for `{transport}`: {reason}")]
    Invalid { transport: String, reason: String },
    #[error("no pricing profile for transport `{0}`")]
    MissingProfile(String),
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CostError> {
    let display = path.display().to_string();
    let raw = std::fs::read(path).map_err(|source| CostError::Read { path: display.clone(), source })?;
    serde_json::from_slice(&raw).map_err(|source| CostError::Parse { path: display, source })
}

impl PricingConfig {
    pub fn load(path: &Path) -> Result<Self, CostError> {
        let cfg: Self = load_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CostError> {
        for (t, p) in &self.profiles {
            p.validate().map_err(|reason| CostError::Invalid { transport: t.clone(), reason })?;
        }
        Ok(())
    }

    pub fn profile(&self, transport: &str) -> Result<&PricingProfile, CostError> {
        self.profiles.get(transport).ok_or_else(|| CostError::MissingProfile(transport.to_owned()))
    }
}

/// One handler execution as logged by a function server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionLog {
    pub request_id: String,
    pub function_url: String,
    pub duration_s: f64,
    /// Storage keys this execution wrote (through-storage transports only).
    #[serde(default)]
    pub stored_keys: Vec<String>,
    /// Object bytes this execution made retrievable (puts, split invokes,
    /// large responses).
    #[serde(default)]
    pub bytes_put: u64,
}

/// Everything a cost estimate needs from one benchmark or demo run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub transport: String,
    #[serde(default = "default_memory")]
    pub memory_gb: f64,
    pub executions: Vec<ExecutionLog>,
    /// Storage-service residency records; empty for direct transfers.
    #[serde(default)]
    pub objects: Vec<LedgerEntry>,
    /// Unix seconds used to close the window of objects never fully read.
    pub finished_at: f64,
}

fn default_memory() -> f64 {
    DEFAULT_MEMORY_GB
}

impl RunLedger {
    pub fn load(path: &Path) -> Result<Self, CostError> {
        load_json(path)
    }

    /// Folds the ledger into invocation records. Each execution carries the
    /// objects it stored; objects written by the driver are billed to one
    /// zero-duration driver record.
    pub fn records(&self, billing: BillingUnit) -> Vec<InvocationRecord> {
        let by_key: HashMap<&str, &LedgerEntry> = self.objects.iter().map(|e| (e.key.as_str(), e)).collect();
        let mut attributed = std::collections::HashSet::new();
        let storage_of = |keys: &mut dyn Iterator<Item = &LedgerEntry>| {
            let (mut gb, mut gb_units) = (0.0, 0.0);
            for e in keys {
                let g = e.bytes as f64 / BYTES_PER_GB;
                gb += g;
                gb_units += g * billing.fraction(e.residency_secs(self.finished_at));
            }
            (gb, if gb > 0.0 { gb_units / gb } else { 0.0 })
        };

        let mut out = Vec::with_capacity(self.executions.len() + 1);
        for ex in &self.executions {
            let mut mine = ex.stored_keys.iter().filter_map(|k| by_key.get(k.as_str()).copied());
            let (gb, residency) = storage_of(&mut mine);
            attributed.extend(ex.stored_keys.iter().map(String::as_str));
            out.push(InvocationRecord { duration_s: ex.duration_s, memory_gb: self.memory_gb, bytes_stored_gb: gb, residency });
        }
        let mut rest = self.objects.iter().filter(|e| !attributed.contains(e.key.as_str()));
        let (gb, residency) = storage_of(&mut rest);
        out.push(InvocationRecord { duration_s: 0.0, memory_gb: self.memory_gb, bytes_stored_gb: gb, residency });
        out
    }

    pub fn cost(&self, pricing: &PricingConfig) -> Result<CostBreakdown, CostError> {
        let p = pricing.profile(&self.transport)?;
        Ok(workflow_cost(&self.records(p.billing_unit), p))
    }
}

/// Per-transport (compute, storage, total) rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub rows: Vec<(String, CostBreakdown)>,
}

impl CostTable {
    pub fn from_ledgers(ledgers: &[RunLedger], pricing: &PricingConfig) -> Result<Self, CostError> {
        let rows = ledgers
            .iter()
            .map(|l| Ok((l.transport.clone(), l.cost(pricing)?)))
            .collect::<Result<_, CostError>>()?;
        Ok(Self { rows })
    }

    pub fn get(&self, transport: &str) -> Option<&CostBreakdown> {
        self.rows.iter().find(|(t, _)| t == transport).map(|(_, c)| c)
    }
}

impl fmt::Display for CostTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>14} {:>14} {:>14}", "transport", "Comp (USD)", "Stor (USD)", "Total (USD)")?;
        for (t, c) in &self.rows {
            writeln!(f, "{:<12} {:>14.4e} {:>14.4e} {:>14.4e}", t, c.compute, c.storage, c.total)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(duration_s: f64, memory_gb: f64, gb: f64, residency: f64) -> InvocationRecord {
        InvocationRecord { duration_s, memory_gb, bytes_stored_gb: gb, residency }
    }

    #[test]
    fn xdt_one_second_half_gb() {
        let c = invocation_cost(&rec(1.0, 0.5, 3.0, 0.5), &PricingProfile::xdt());
        let expected = 2e-7 + 0.5 * 1.6667e-5;
        assert!((c - expected).abs() < 1e-15, "{c} vs {expected}");
    }

    #[test]
    fn idle_invocation_costs_the_fee() {
        for p in [PricingProfile::xdt(), PricingProfile::cold_store(), PricingProfile::mem_cache()] {
            assert_eq!(invocation_cost(&rec(0.0, 0.5, 0.0, 0.0), &p), p.invocation_fee);
        }
    }

    #[test]
    fn hour_vs_month_ratio() {
        let secs = 90.0;
        let hourly = BillingUnit::Hour.fraction(secs) * 0.02;
        let monthly = BillingUnit::Month.fraction(secs) * 0.02;
        let ratio = hourly / monthly;
        assert!((ratio - 730.5).abs() < 1e-9);
    }

    #[test]
    fn none_billing_requires_zero_storage_rate() {
        let p = PricingProfile { storage_rate: 0.01, ..PricingProfile::xdt() };
        assert!(p.validate().is_err());
        assert!(PricingProfile { compute_rate: -1.0, ..PricingProfile::xdt() }.validate().is_err());
        PricingConfig::default().validate().unwrap();
    }

    #[test]
    fn ledger_attributes_storage_to_writers() {
        let entry = |key: &str, bytes: u64, stored: f64, read: f64| LedgerEntry {
            key: key.into(),
            bytes,
            stored_at: stored,
            last_read_at: Some(read),
            reads: 1,
            reads_remaining: Some(0),
        };
        let ledger = RunLedger {
            transport: "mem-cache".into(),
            memory_gb: 0.5,
            executions: vec![ExecutionLog {
                request_id: "r".into(),
                function_url: "map".into(),
                duration_s: 2.0,
                stored_keys: vec!["a".into(), "b".into()],
                bytes_put: 4_000_000_000,
            }],
            objects: vec![entry("a", 1_000_000_000, 0.0, 36.0), entry("b", 3_000_000_000, 0.0, 72.0), entry("c", 2_000_000_000, 0.0, 18.0)],
            finished_at: 100.0,
        };
        let recs = ledger.records(BillingUnit::Hour);
        assert_eq!(recs.len(), 2);
        // 1 GB * 0.01 h + 3 GB * 0.02 h = 0.07 GB-h over 4 GB.
        assert!((recs[0].bytes_stored_gb * recs[0].residency - 0.07).abs() < 1e-12);
        assert!((recs[1].bytes_stored_gb * recs[1].residency - 0.01).abs() < 1e-12);
        let cost = ledger.cost(&PricingConfig::default()).unwrap();
        assert!((cost.storage - 0.08 * 0.02).abs() < 1e-12);
    }

    #[test]
    fn unread_objects_resident_until_run_end() {
        let e = LedgerEntry { key: "k".into(), bytes: 1, stored_at: 10.0, last_read_at: Some(12.0), reads: 1, reads_remaining: Some(1) };
        assert_eq!(e.residency_secs(20.0), 10.0);
        let done = LedgerEntry { reads_remaining: Some(0), ..e };
        assert_eq!(done.residency_secs(20.0), 2.0);
    }

    proptest! {
        #[test]
        fn linear_in_duration_memory_and_bytes(
            d in 0.0f64..100.0, m in 0.1f64..4.0, gb in 0.0f64..10.0, r in 0.0f64..1.0, k in 0.1f64..10.0,
        ) {
            for p in [PricingProfile::xdt(), PricingProfile::cold_store(), PricingProfile::mem_cache()] {
                let base = invocation_breakdown(&rec(d, m, gb, r), &p);
                let scaled_d = invocation_breakdown(&rec(k * d, m, gb, r), &p);
                let scaled_m = invocation_breakdown(&rec(d, k * m, gb, r), &p);
                let scaled_b = invocation_breakdown(&rec(d, m, k * gb, r), &p);
                let var = base.compute - p.invocation_fee;
                prop_assert!(((scaled_d.compute - p.invocation_fee) - k * var).abs() <= 1e-12 * (1.0 + k * var.abs()));
                prop_assert!(((scaled_m.compute - p.invocation_fee) - k * var).abs() <= 1e-12 * (1.0 + k * var.abs()));
                prop_assert!((scaled_b.storage - k * base.storage).abs() <= 1e-12 * (1.0 + k * base.storage));
            }
        }
    }
}
