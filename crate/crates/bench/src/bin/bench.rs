use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use mcaslite_bench::{fairness, run_bench, scaling_sweep, Launch, LocalCluster, Mix, Target, WorkloadSpec};

/// Drive mcaslite shards with a synthetic workload and report throughput
/// and latency.
#[derive(Parser, Debug)]
#[command(name = "bench")]
struct Args {
    /// read, write or ado
    #[arg(long, default_value = "write")]
    mix: Mix,
    /// Key length in bytes.
    #[arg(long, default_value_t = 8)]
    key: usize,
    /// Value length in bytes.
    #[arg(long, default_value_t = 16)]
    value: usize,
    #[arg(long, default_value_t = 5)]
    clients: u32,
    #[arg(long, default_value_t = 1)]
    shards: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Operations per client.
    #[arg(long)]
    ops: Option<u64>,
    /// Seconds per run.
    #[arg(long)]
    duration: Option<f64>,
    /// random, same or set:N. Defaults to random for writes, set:1000 for
    /// reads and same for ADO invokes.
    #[arg(long)]
    target: Option<Target>,
    /// Pool size per client, MiB.
    #[arg(long, default_value_t = 64)]
    pool_mib: u64,
    /// Existing shards to drive, comma separated. Without this the bench
    /// starts its own shards in-process.
    #[arg(long, value_delimiter = ',')]
    servers: Vec<SocketAddr>,
    /// Run one client per process instead of per thread.
    #[arg(long)]
    processes: bool,
    /// Also sweep 1..=shards and add the scaling table.
    #[arg(long)]
    sweep: bool,
    /// Also run 1..=N clients on one shard and add the fairness table.
    #[arg(long)]
    fairness: Option<u32>,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Internal: run as a worker attached to this control socket.
    #[arg(long, hide = true)]
    worker: Option<SocketAddr>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    if let Some(control) = args.worker {
        return match mcaslite_bench::worker::worker_main(control) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("worker: {e}");
                ExitCode::FAILURE
            }
        };
    }
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}

fn run(args: &Args) -> Result<(), Box<dyn std::error::Error>> {
    let target = args.target.unwrap_or(match args.mix {
        Mix::Write => Target::Random,
        Mix::Read => Target::KeySet(1000),
        Mix::Ado => Target::SameKey,
    });
    let duration = args.duration.map(Duration::from_secs_f64);
    let spec = WorkloadSpec {
        mix: args.mix,
        key_len: args.key,
        value_len: args.value,
        clients: args.clients,
        shards: args.shards,
        ops: args.ops.or(if duration.is_some() { None } else { Some(100_000) }),
        duration,
        target,
        seed: args.seed,
        pool_size: args.pool_mib << 20,
    };
    spec.validate()?;
    let launch = if args.processes { Launch::Processes { exe: std::env::current_exe()? } } else { Launch::Threads };

    let mut report = if args.servers.is_empty() {
        let cluster = LocalCluster::for_spec(&spec)?;
        run_bench(&spec, &cluster.addrs(), &launch)?
    } else {
        run_bench(&spec, &args.servers, &launch)?
    };
    if args.sweep {
        let per_shard = WorkloadSpec { clients: spec.clients.div_ceil(spec.shards), ..spec.clone() };
        report.scaling = Some(scaling_sweep(&per_shard, spec.shards, &launch)?.0);
    }
    if let Some(n) = args.fairness {
        let f = WorkloadSpec { ops: None, duration: Some(duration.unwrap_or(Duration::from_secs(2))), ..spec.clone() };
        report.fairness = Some(fairness(&f, n, &launch)?);
    }

    for p in report.write_all(&args.out)? {
        println!("wrote {}", p.display());
    }
    println!(
        "{} ops in {:.3} s: {:.0} ops/s aggregate, p50 {:.1} us, p99 {:.1} us",
        report.total_ops,
        report.wall_secs,
        report.aggregate_ops_per_sec,
        report.percentiles.p50 as f64 / 1e3,
        report.percentiles.p99 as f64 / 1e3
    );
    for c in &report.clients {
        println!("  client {} (shard {}): {} ops, {:.0} ops/s, {} errors", c.client, c.shard, c.ops, c.ops_per_sec, c.errors);
    }
    if let Some(rows) = &report.scaling {
        println!("shards  aggregate ops/s  linear ops/s  degradation");
        for r in rows {
            println!("{:>6}  {:>15.0}  {:>12.0}  {:>10.1}%", r.shards, r.aggregate_ops_per_sec, r.linear_ops_per_sec, 100.0 * r.degradation);
        }
    }
    if let Some(rows) = &report.fairness {
        println!("clients  min/max  max share deviation");
        for r in rows {
            println!("{:>7}  {:>7.3}  {:>18.1}%", r.clients, r.min_max_ratio, 100.0 * r.max_share_deviation);
        }
    }
    for f in &report.failures {
        eprintln!("failure: {f}");
    }
    Ok(())
}
