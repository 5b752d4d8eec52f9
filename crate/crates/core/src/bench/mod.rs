//! Microbenchmarks for the four communication patterns, parameter sweeps and
//! the word-count workflow.

pub mod handlers;
mod report;
pub mod wordcount;

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use futures::future::try_join_all;
use serde::{Deserialize, Serialize};

pub use report::{write_csv, RunReport, SweepRow, CSV_HEADER};

use crate::cluster::{ClusterConfig, FunctionConfig};
use crate::dataplane::{StreamingMode, TransferSettings};
use crate::refcrypto::XdtReference;
use crate::sdk::{Sdk, SdkError, Transport};
use handlers::{payload, sha256_hex, ProduceRequest, Produced, RefList, CONSUMER, FETCH, GATHER, PRODUCER};

pub const WARMUP_REPS: usize = 3;
pub const DEFAULT_REPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pattern {
    #[serde(rename = "1-1")]
    OneToOne,
    #[serde(rename = "scatter")]
    Scatter,
    #[serde(rename = "gather")]
    Gather,
    #[serde(rename = "broadcast")]
    Broadcast,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Pattern::OneToOne, Pattern::Scatter, Pattern::Gather, Pattern::Broadcast];

    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::OneToOne => "1-1",
            Pattern::Scatter => "scatter",
            Pattern::Gather => "gather",
            Pattern::Broadcast => "broadcast",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1-1" | "one-to-one" => Ok(Pattern::OneToOne),
            _ => Pattern::ALL
                .into_iter()
                .find(|p| p.as_str() == s)
                .ok_or_else(|| format!("unknown pattern `{s}` (expected 1-1, scatter, gather or broadcast)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub pattern: Pattern,
    pub fan_degree: u32,
    pub object_size: usize,
    pub repetitions: usize,
    pub transport: Transport,
    /// Base seed for payload generation.
    pub seed: u64,
}

impl PatternSpec {
    pub fn new(pattern: Pattern, object_size: usize, transport: Transport) -> Self {
        Self { pattern, fan_degree: 1, object_size, repetitions: DEFAULT_REPS, transport, seed: 1 }
    }

    pub fn fan(mut self, k: u32) -> Self {
        self.fan_degree = k;
        self
    }

    pub fn reps(mut self, n: usize) -> Self {
        self.repetitions = n;
        self
    }

    /// One-to-one always has fan degree 1.
    pub fn fan_degree(&self) -> u32 {
        match self.pattern {
            Pattern::OneToOne => 1,
            _ => self.fan_degree,
        }
    }

    /// Bytes delivered to consumers per repetition.
    pub fn bytes_per_rep(&self) -> u64 {
        self.object_size as u64 * self.fan_degree() as u64
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.fan_degree == 0 {
            return Err(BenchError::Config("fan degree must be at least 1".into()));
        }
        if self.repetitions == 0 {
            return Err(BenchError::Config("need at least one repetition".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BenchError {
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Sdk(#[from] SdkError),
    #[error("bad benchmark config: {0}")]
    Config(String),
}

/// Cluster layout for benchmarks with fan degree up to `max_fan`: every
/// function runs a fixed number of warm instances.
pub fn bench_config(max_fan: u32) -> ClusterConfig {
    let k = max_fan.max(1);
    let mut cfg = ClusterConfig::with_functions([
        FunctionConfig::new(PRODUCER, PRODUCER).fixed(k),
        FunctionConfig::new(CONSUMER, CONSUMER).fixed(k),
        FunctionConfig::new(FETCH, FETCH).fixed(k),
        FunctionConfig::new(GATHER, GATHER).fixed(1),
        FunctionConfig::new(handlers::ECHO, handlers::ECHO).fixed(1),
        FunctionConfig::new(handlers::WC_MAP, handlers::WC_MAP).fixed(4),
        FunctionConfig::new(handlers::WC_REDUCE, handlers::WC_REDUCE).fixed(2),
    ]);
    // Harness control messages (reference lists, produce requests) stay inline.
    cfg.split_threshold = 1024;
    cfg
}

/// One timed repetition; `Ok` only if every payload verified.
async fn run_once(sdk: &Sdk, spec: &PatternSpec, seed: u64) -> Result<Duration, BenchError> {
    let k = spec.fan_degree() as usize;
    let size = spec.object_size;
    let verify = |what: &str, got: &str, want: &str| {
        if got == want {
            Ok(())
        } else {
            Err(BenchError::Verification(format!("{what}: hash {got} != expected {want}")))
        }
    };

    match spec.pattern {
        Pattern::OneToOne | Pattern::Scatter => {
            let objects: Vec<_> = (0..k as u64).map(|i| payload(seed + i, size)).collect();
            let expected: Vec<_> = objects.iter().map(|o| sha256_hex(o)).collect();
            let started = Instant::now();
            let calls = objects.into_iter().map(|o| {
                let sdk = sdk.clone();
                async move { sdk.invoke(CONSUMER, o).await }
            });
            let digests = try_join_all(calls).await?;
            let elapsed = started.elapsed();
            for (i, (d, e)) in digests.iter().zip(&expected).enumerate() {
                verify(&format!("consumer {i}"), &String::from_utf8_lossy(d), e)?;
            }
            Ok(elapsed)
        }
        Pattern::Gather => {
            let expected: Vec<_> = (0..k as u64).map(|i| sha256_hex(&payload(seed + i, size))).collect();
            let started = Instant::now();
            let produces = (0..k as u64).map(|i| {
                let sdk = sdk.clone();
                let req = handlers::to_json(&ProduceRequest { seed: seed + i, size, n: 1 });
                async move { sdk.invoke(PRODUCER, req).await.and_then(|b| handlers::from_json::<Produced>(&b)) }
            });
            let produced = try_join_all(produces).await?;
            let refs = produced.iter().map(|p| p.reference.clone()).collect();
            let got = sdk.invoke(GATHER, handlers::to_json(&RefList { refs })).await?;
            let elapsed = started.elapsed();
            let got: Vec<String> = handlers::from_json(&got)?;
            if got.len() != k {
                return Err(BenchError::Verification(format!("gather returned {} objects, expected {k}", got.len())));
            }
            for (i, ((g, p), e)) in got.iter().zip(&produced).zip(&expected).enumerate() {
                verify(&format!("producer {i}"), &p.sha256, e)?;
                verify(&format!("gathered object {i}"), g, e)?;
            }
            Ok(elapsed)
        }
        Pattern::Broadcast => {
            let expected = sha256_hex(&payload(seed, size));
            let started = Instant::now();
            let req = handlers::to_json(&ProduceRequest { seed, size, n: k as u32 });
            let produced: Produced = handlers::from_json(&sdk.invoke(PRODUCER, req).await?)?;
            let fetches = (0..k).map(|_| {
                let sdk = sdk.clone();
                let token = produced.reference.clone();
                async move { sdk.invoke(FETCH, token.into_bytes()).await }
            });
            let got = try_join_all(fetches).await?;
            let elapsed = started.elapsed();
            verify("producer", &produced.sha256, &expected)?;
            for (i, g) in got.iter().enumerate() {
                verify(&format!("consumer {i}"), &String::from_utf8_lossy(g), &expected)?;
            }
            // The reference is used up: one more retrieval must fail.
            match sdk.get(&XdtReference::from_token(produced.reference)).await {
                Err(_) => Ok(elapsed),
                Ok(_) => Err(BenchError::Verification(format!("retrieval {} of an object put for {k} succeeded", k + 1))),
            }
        }
    }
}

/// Runs [`WARMUP_REPS`] discarded plus `spec.repetitions` measured repetitions.
pub async fn run_pattern(driver: &Sdk, spec: &PatternSpec) -> Result<RunReport, BenchError> {
    spec.validate()?;
    let sdk = driver.with_transport(spec.transport);
    let k = spec.fan_degree() as u64;
    let mut latencies = Vec::with_capacity(spec.repetitions);
    for rep in 0..WARMUP_REPS + spec.repetitions {
        let seed = spec.seed.wrapping_add(rep as u64 * k);
        let t = run_once(&sdk, spec, seed).await?;
        if rep >= WARMUP_REPS {
            latencies.push(t);
        }
    }
    Ok(RunReport::new(*spec, latencies))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    ObjectSize,
    FanDegree,
    BufferDepth,
    StreamingMode,
    Transport,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::ObjectSize => "object_size",
            SweepAxis::FanDegree => "fan_degree",
            SweepAxis::BufferDepth => "buffer_depth",
            SweepAxis::StreamingMode => "streaming_mode",
            SweepAxis::Transport => "transport",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "object_size" | "size" => Ok(SweepAxis::ObjectSize),
            "fan_degree" | "fan" => Ok(SweepAxis::FanDegree),
            "buffer_depth" => Ok(SweepAxis::BufferDepth),
            "streaming_mode" | "mode" => Ok(SweepAxis::StreamingMode),
            "transport" => Ok(SweepAxis::Transport),
            _ => Err(format!("unknown sweep axis `{s}`")),
        }
    }
}

/// Parses sizes such as `10KiB`, `1MiB`, `4M`, `65536`.
pub fn parse_size(s: &str) -> Result<usize, String> {
    let t = s.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let n: usize = num.parse().map_err(|_| format!("bad size `{s}`"))?;
    let mult = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "k" | "kb" | "kib" => 1 << 10,
        "m" | "mb" | "mib" => 1 << 20,
        "g" | "gb" | "gib" => 1 << 30,
        _ => return Err(format!("bad size unit in `{s}`")),
    };
    n.checked_mul(mult).ok_or_else(|| format!("size `{s}` overflows"))
}

/// One [`run_pattern`] per value. Buffer-depth and streaming-mode values are
/// applied to `settings` for the duration of their run.
pub async fn sweep(
    driver: &Sdk,
    settings: Option<&TransferSettings>,
    base: &PatternSpec,
    axis: SweepAxis,
    values: &[String],
) -> Result<Vec<SweepRow>, BenchError> {
    let needs_settings = matches!(axis, SweepAxis::BufferDepth | SweepAxis::StreamingMode);
    if needs_settings && settings.is_none() {
        return Err(BenchError::Config(format!("sweeping {axis} needs an in-process cluster")));
    }
    let original = settings.map(|s| s.get());
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let mut spec = *base;
        let bad = |e: String| BenchError::Config(format!("{axis} value `{v}`: {e}"));
        match axis {
            SweepAxis::ObjectSize => spec.object_size = parse_size(v).map_err(bad)?,
            SweepAxis::FanDegree => spec.fan_degree = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            SweepAxis::Transport => spec.transport = v.parse().map_err(bad)?,
            SweepAxis::BufferDepth | SweepAxis::StreamingMode => {
                let s = settings.expect("checked");
                let mut cfg = original.expect("checked");
                if axis == SweepAxis::BufferDepth {
                    cfg.buffer_depth = parse_size(v).map_err(bad)?;
                } else {
                    cfg.streaming_mode = v.parse::<StreamingMode>().map_err(bad)?;
                }
                s.set(cfg).map_err(bad)?;
            }
        }
        let result = run_pattern(driver, &spec).await;
        rows.push(SweepRow { axis, value: v.clone(), spec, result });
    }
    if let (Some(s), Some(cfg)) = (settings, original) {
        s.set(cfg).map_err(BenchError::Config)?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("10KiB"), Ok(10 * 1024));
        assert_eq!(parse_size("1MiB"), Ok(1 << 20));
        assert_eq!(parse_size("4M"), Ok(4 << 20));
        assert_eq!(parse_size("65536"), Ok(65536));
        assert!(parse_size("ten").is_err());
        assert!(parse_size("1TiB").is_err());
    }

    #[test]
    fn one_to_one_forces_fan_one() {
        let s = PatternSpec::new(Pattern::OneToOne, 100, Transport::Xdt).fan(8);
        assert_eq!(s.fan_degree(), 1);
        assert_eq!(s.bytes_per_rep(), 100);
        assert_eq!(PatternSpec::new(Pattern::Gather, 100, Transport::Xdt).fan(8).bytes_per_rep(), 800);
    }

    #[test]
    fn names_round_trip() {
        for p in Pattern::ALL {
            assert_eq!(p.as_str().parse::<Pattern>(), Ok(p));
        }
        for a in [SweepAxis::ObjectSize, SweepAxis::FanDegree, SweepAxis::BufferDepth, SweepAxis::StreamingMode, SweepAxis::Transport] {
            assert_eq!(a.as_str().parse::<SweepAxis>(), Ok(a));
        }
    }
}
