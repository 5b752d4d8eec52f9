mod handle;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use xdt::bench::{self, handlers, wordcount, BenchError, Pattern, PatternSpec, RunReport, SweepAxis};
use xdt::costmodel::{CostTable, PricingConfig, RunLedger};
use xdt::sdk::{Sdk, SdkContext, Transport};
use xdt::storage::{unix_now, StorageKind, StorageProfile, StorageServer};
use xdt::{Cluster, ClusterConfig};

use handle::ClusterHandle;

/// Exit status for runs whose results failed verification.
const EXIT_FAILED: u8 = 1;
/// Exit status for bad input: config, flags, files.
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "xdt", version, about = "Single-host serverless mini-cluster with direct function-to-function transfers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Start a cluster from a JSON config and run it until interrupted.
    Up {
        #[arg(long)]
        config: PathBuf,
        /// Write connection details here so `bench --cluster` can drive this cluster.
        #[arg(long)]
        handle_file: Option<PathBuf>,
    },
    /// Run one transfer pattern or a sweep and print CSV.
    Bench(BenchArgs),
    /// Price run ledgers and print a (compute, storage, total) table.
    Cost {
        /// Run ledger JSON; repeat for several transports.
        #[arg(long, required = true)]
        ledger: Vec<PathBuf>,
        /// Pricing JSON; built-in profiles when omitted.
        #[arg(long)]
        pricing: Option<PathBuf>,
    },
    /// Run a standalone emulated storage daemon.
    Storaged {
        #[arg(long, default_value = "cold-store")]
        profile: StorageKind,
        #[arg(long)]
        latency_ms: Option<u64>,
        /// Bandwidth cap in MiB/s.
        #[arg(long)]
        bandwidth_mbps: Option<u64>,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: SocketAddr,
    },
    /// Run the word-count workflow, verify it and print its cost.
    Demo(DemoArgs),
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long, default_value = "1-1")]
    pattern: Pattern,
    #[arg(long, default_value = "1MiB", value_parser = bench::parse_size)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    fan: u32,
    /// Defaults to XDT_TRANSPORT, then xdt.
    #[arg(long)]
    transport: Option<Transport>,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// object_size, fan_degree, buffer_depth, streaming_mode or transport.
    #[arg(long, requires = "values")]
    sweep: Option<SweepAxis>,
    /// Comma-separated values for the swept axis.
    #[arg(long, value_delimiter = ',', requires = "sweep")]
    values: Vec<String>,
    /// Also emit one row per repetition.
    #[arg(long)]
    per_rep: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Drive a cluster started with `up --handle-file` instead of an in-process one.
    #[arg(long)]
    cluster: Option<PathBuf>,
}

#[derive(clap::Args)]
struct DemoArgs {
    /// Repeat to pick transports; all three when omitted.
    #[arg(long)]
    transport: Vec<Transport>,
    #[arg(long, default_value = "1MiB", value_parser = bench::parse_size)]
    corpus_size: usize,
    #[arg(long, default_value_t = 4)]
    mappers: u32,
    #[arg(long, default_value_t = 2)]
    reducers: u32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Write `<transport>.json` run ledgers into this directory.
    #[arg(long)]
    ledger_dir: Option<PathBuf>,
    #[arg(long)]
    pricing: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Up { config, handle_file } => up(&config, handle_file.as_deref()).await,
        Cmd::Bench(args) => run_bench(args).await,
        Cmd::Cost { ledger, pricing } => cost(&ledger, pricing.as_deref()),
        Cmd::Storaged { profile, latency_ms, bandwidth_mbps, listen } => storaged(profile, latency_ms, bandwidth_mbps, listen).await,
        Cmd::Demo(args) => demo(args).await,
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

type CmdResult = Result<(), (u8, String)>;

fn usage(e: impl std::fmt::Display) -> (u8, String) {
    (EXIT_USAGE, e.to_string())
}

fn failed(e: impl std::fmt::Display) -> (u8, String) {
    (EXIT_FAILED, e.to_string())
}

async fn interrupted() {
    let _ = tokio::signal::ctrl_c().await;
}

async fn up(config: &Path, handle_file: Option<&Path>) -> CmdResult {
    let cfg = ClusterConfig::load(config).map_err(usage)?;
    let cluster = Cluster::start(cfg, &handlers::registry()).await.map_err(usage)?;
    println!("activator {}", cluster.activator_addr());
    for (kind, addr) in cluster.storage_addrs() {
        println!("storage {kind} {addr}");
    }
    cluster.wait_min_scale(Duration::from_secs(30)).await.map_err(failed)?;
    for i in cluster.all_instances() {
        println!("instance {} {} {}", i.id(), i.function_url(), i.qp_addr());
    }
    if let Some(path) = handle_file {
        ClusterHandle::of(&cluster).save(path).map_err(usage)?;
        println!("handle {}", path.display());
    }
    println!("READY");
    interrupted().await;
    cluster.shutdown();
    println!("stopped");
    Ok(())
}

fn bench_output(out: Option<&Path>) -> Result<Box<dyn Write>, (u8, String)> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| usage(format!("creating {}: {e}", p.display())))?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

async fn run_bench(args: BenchArgs) -> CmdResult {
    let transport = match args.transport {
        Some(t) => t,
        None => Transport::from_env().map_err(usage)?,
    };
    let base = PatternSpec { seed: args.seed, ..PatternSpec::new(args.pattern, args.size, transport).fan(args.fan).reps(args.reps) };
    base.validate().map_err(usage)?;

    let max_fan = match args.sweep {
        Some(SweepAxis::FanDegree) => args.values.iter().filter_map(|v| v.parse::<u32>().ok()).max().unwrap_or(1).max(args.fan),
        _ => args.fan,
    };
    let (cluster, external): (Option<Cluster>, Option<std::sync::Arc<SdkContext>>) = match &args.cluster {
        Some(path) => (None, Some(ClusterHandle::load(path).map_err(usage)?.connect().await.map_err(usage)?)),
        None => {
            let c = Cluster::start(bench::bench_config(max_fan), &handlers::registry()).await.map_err(usage)?;
            c.wait_min_scale(Duration::from_secs(30)).await.map_err(failed)?;
            (Some(c), None)
        }
    };
    let driver: Sdk = match (&cluster, &external) {
        (Some(c), _) => c.client(),
        (None, Some(ctx)) => ctx.sdk(),
        (None, None) => unreachable!("one driver is always set"),
    };
    let settings = cluster.as_ref().map(|c| c.settings());

    let mut out = bench_output(args.out.as_deref())?;
    let mut failures = 0;
    match args.sweep {
        None => {
            let result = bench::run_pattern(&driver, &base).await;
            failures += report_failure(&base, &result);
            bench::write_csv(&mut out, [(None, &base, &result)], args.per_rep).map_err(usage)?;
        }
        Some(axis) => {
            let rows = bench::sweep(&driver, settings, &base, axis, &args.values).await.map_err(usage)?;
            for r in &rows {
                failures += report_failure(&r.spec, &r.result);
            }
            bench::write_csv(&mut out, rows.iter().map(|r| (Some(r.label()), &r.spec, &r.result)), args.per_rep).map_err(usage)?;
        }
    }
    out.flush().map_err(usage)?;
    if failures > 0 {
        return Err(failed(format!("{failures} run(s) failed")));
    }
    Ok(())
}

fn report_failure(spec: &PatternSpec, result: &Result<RunReport, BenchError>) -> usize {
    match result {
        Ok(r) => {
            eprintln!(
                "verified {} {} size={} fan={}: {} reps, {} consumer(s) each",
                spec.pattern,
                spec.transport,
                spec.object_size,
                spec.fan_degree(),
                r.latencies.len(),
                spec.fan_degree()
            );
            0
        }
        Err(e) => {
            eprintln!("FAILED {} {} size={} fan={}: {e}", spec.pattern, spec.transport, spec.object_size, spec.fan_degree());
            1
        }
    }
}

fn load_pricing(path: Option<&Path>) -> Result<PricingConfig, (u8, String)> {
    match path {
        Some(p) => PricingConfig::load(p).map_err(usage),
        None => Ok(PricingConfig::default()),
    }
}

fn cost(ledgers: &[PathBuf], pricing: Option<&Path>) -> CmdResult {
    let pricing = load_pricing(pricing)?;
    let ledgers = ledgers.iter().map(|p| RunLedger::load(p)).collect::<Result<Vec<_>, _>>().map_err(usage)?;
    let table = CostTable::from_ledgers(&ledgers, &pricing).map_err(usage)?;
    print!("{table}");
    Ok(())
}

async fn storaged(kind: StorageKind, latency_ms: Option<u64>, bandwidth_mbps: Option<u64>, listen: SocketAddr) -> CmdResult {
    let mut profile = StorageProfile::for_kind(kind);
    if let Some(ms) = latency_ms {
        profile.per_op_latency = Duration::from_millis(ms);
    }
    if let Some(mbps) = bandwidth_mbps {
        profile.bandwidth_cap = mbps.saturating_mul(1 << 20);
    }
    profile.validate().map_err(usage)?;
    let server = StorageServer::bind(listen, profile)
        .await
        .map_err(|e| usage(format!("cannot bind {kind} service on port {}: {e}", listen.port())))?;
    println!("storage {kind} {}", server.local_addr());
    println!("READY");
    interrupted().await;
    server.shutdown();
    Ok(())
}

async fn demo(args: DemoArgs) -> CmdResult {
    let pricing = load_pricing(args.pricing.as_deref())?;
    let transports = if args.transport.is_empty() { Transport::ALL.to_vec() } else { args.transport };
    let spec = wordcount::WordcountSpec { mappers: args.mappers, reducers: args.reducers, corpus_bytes: args.corpus_size, seed: args.seed };
    if let Some(dir) = &args.ledger_dir {
        std::fs::create_dir_all(dir).map_err(|e| usage(format!("creating {}: {e}", dir.display())))?;
    }

    let mut cfg = bench::bench_config(1);
    for f in &mut cfg.functions {
        if f.url == handlers::WC_MAP {
            f.min_scale = args.mappers.max(1);
            f.max_scale = f.min_scale;
        } else if f.url == handlers::WC_REDUCE {
            f.min_scale = args.reducers.max(1);
            f.max_scale = f.min_scale;
        }
    }
    let cluster = Cluster::start(cfg, &handlers::registry()).await.map_err(usage)?;
    cluster.wait_min_scale(Duration::from_secs(30)).await.map_err(failed)?;
    let truth = handlers::sha256_hex(wordcount::brute_force(&spec).as_bytes());

    let mut ledgers = Vec::new();
    let mut mismatches = 0;
    for t in transports {
        let (mark, since) = (cluster.ledger().len(), unix_now());
        let outcome = wordcount::run(&cluster.client().with_transport(t), &spec).await.map_err(failed)?;
        let ok = outcome.output_hash == truth;
        if !ok {
            mismatches += 1;
        }
        println!(
            "word count {t}: {} in {:.1} ms, {} byte corpus, output sha256 {}",
            if ok { "verified" } else { "MISMATCH" },
            outcome.latency.as_secs_f64() * 1e3,
            spec.corpus_bytes,
            &outcome.output_hash[..16]
        );
        let ledger = cluster.run_ledger(t, mark, since).await;
        if let Some(dir) = &args.ledger_dir {
            let path = dir.join(format!("{t}.json"));
            let json = serde_json::to_vec_pretty(&ledger).expect("ledger serializes");
            std::fs::write(&path, json).map_err(|e| usage(format!("writing {}: {e}", path.display())))?;
        }
        ledgers.push(ledger);
    }
    let table = CostTable::from_ledgers(&ledgers, &pricing).map_err(usage)?;
    print!("{table}");
    if mismatches > 0 {
        return Err(failed(format!("{mismatches} word-count run(s) disagreed with the single-process answer")));
    }
    Ok(())
}
