use std::io::{self, Write};
use std::time::Duration;

use super::{BenchError, PatternSpec, SweepAxis};

pub const CSV_HEADER: &str = "pattern,transport,object_size,fan,rep,latency_us,eff_bw_bps";

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub spec: PatternSpec,
    /// Measured repetitions, in run order.
    pub latencies: Vec<Duration>,
    pub median: Duration,
    pub p99: Duration,
    /// Bytes delivered per repetition over the median latency.
    pub effective_bandwidth: f64,
}

impl RunReport {
    pub fn new(spec: PatternSpec, latencies: Vec<Duration>) -> Self {
        let mut sorted = latencies.clone();
        sorted.sort();
        let median = median(&sorted);
        let p99 = percentile(&sorted, 0.99);
        let effective_bandwidth = bandwidth(spec.bytes_per_rep(), median);
        Self { spec, latencies, median, p99, effective_bandwidth }
    }
}

fn median(sorted: &[Duration]) -> Duration {
    match sorted.len() {
        0 => Duration::ZERO,
        n if n % 2 == 1 => sorted[n / 2],
        n => (sorted[n / 2 - 1] + sorted[n / 2]) / 2,
    }
}

/// Nearest-rank percentile.
fn percentile(sorted: &[Duration], q: f64) -> Duration {
    if sorted.is_empty() {
        return Duration::ZERO;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn bandwidth(bytes: u64, latency: Duration) -> f64 {
    if latency.is_zero() {
        0.0
    } else {
        bytes as f64 / latency.as_secs_f64()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub spec: PatternSpec,
    pub result: Result<RunReport, BenchError>,
}

fn row(w: &mut impl Write, spec: &PatternSpec, rep: &str, latency: Duration, bw: f64) -> io::Result<()> {
    writeln!(
        w,
        "{},{},{},{},{},{},{:.0}",
        spec.pattern,
        spec.transport,
        spec.object_size,
        spec.fan_degree(),
        rep,
        latency.as_micros(),
        bw
    )
}

/// One `median` row per run (plus one row per repetition with `per_rep`).
/// Failed runs appear as `ERROR` rows with empty measurements.
pub fn write_csv<'a>(
    w: &mut impl Write,
    runs: impl IntoIterator<Item = (Option<String>, &'a PatternSpec, &'a Result<RunReport, BenchError>)>,
    per_rep: bool,
) -> io::Result<()> {
    writeln!(w, "# gather latencies include the producers' put() calls")?;
    writeln!(w, "{CSV_HEADER}")?;
    for (label, spec, result) in runs {
        if let Some(l) = label {
            writeln!(w, "# {l}")?;
        }
        match result {
            Ok(r) => {
                if per_rep {
                    for (i, l) in r.latencies.iter().enumerate() {
                        row(w, spec, &i.to_string(), *l, bandwidth(spec.bytes_per_rep(), *l))?;
                    }
                }
                row(w, spec, "median", r.median, r.effective_bandwidth)?;
            }
            Err(e) => {
                writeln!(w, "# error: {e}")?;
                writeln!(w, "{},{},{},{},ERROR,,", spec.pattern, spec.transport, spec.object_size, spec.fan_degree())?;
            }
        }
    }
    Ok(())
}

impl SweepRow {
    pub fn label(&self) -> String {
        format!("{}={}", self.axis, self.value)
    }
}
