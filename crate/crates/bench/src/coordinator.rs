//! Launch the clients, hold them at the start barrier, collect results.

use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::{Child, Command};
use std::time::{Duration, Instant};

use mcaslite_core::pmem::Pmem;
use mcaslite_server::{start_shard, ShardHandle, ShardSpec};

use crate::histogram::{summarize, BINS};
use crate::report::{ClientSummary, Report};
use crate::worker::{recv, send, worker_main, ClientResult, Control};
use crate::workload::{Mix, WorkloadSpec};
use crate::BenchError;

/// How long the coordinator waits on a worker that has gone quiet before
/// the run starts.
const SETUP_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Clone, Debug)]
pub enum Launch {
    /// Worker threads in this process.
    Threads,
    /// One worker process per client: `exe --worker <control addr>`.
    Processes { exe: PathBuf },
}

/// Shards started in this process; they stop when this is dropped.
pub struct LocalCluster {
    shards: Vec<ShardHandle>,
}

impl LocalCluster {
    /// `n` loopback shards, each on its own sparse in-memory arena big
    /// enough for `clients_per_shard` pools of `pool_size`.
    pub fn start(n: u32, clients_per_shard: u32, pool_size: u64, plugins: &[&str]) -> Result<Self, BenchError> {
        let arena = (u64::from(clients_per_shard) * (pool_size + (4 << 20)) + (256 << 20)).next_power_of_two();
        let mut shards = Vec::new();
        for id in 0..n {
            let mut s = ShardSpec::local(Pmem::crash_sim(arena));
            s.id = id;
            s.plugins = plugins.iter().map(|p| p.to_string()).collect();
            shards.push(start_shard(s).map_err(|e| BenchError::Server(e.to_string()))?);
        }
        Ok(Self { shards })
    }

    /// Shards suited to `spec`: passthru for the ADO mix.
    pub fn for_spec(spec: &WorkloadSpec) -> Result<Self, BenchError> {
        let plugins: &[&str] = if spec.mix == Mix::Ado { &["passthru"] } else { &[] };
        Self::start(spec.shards, spec.clients.div_ceil(spec.shards), spec.pool_size, plugins)
    }

    pub fn addrs(&self) -> Vec<SocketAddr> {
        self.shards.iter().map(|s| s.addr()).collect()
    }
}

struct Worker {
    stream: TcpStream,
    reader: BufReader<TcpStream>,
    client: u32,
}

fn io(e: std::io::Error) -> BenchError {
    BenchError::Io(e.to_string())
}

fn spawn(launch: &Launch, control: SocketAddr, n: u32) -> Result<(Vec<std::thread::JoinHandle<()>>, Vec<Child>), BenchError> {
    let mut threads = Vec::new();
    let mut children = Vec::new();
    for _ in 0..n {
        match launch {
            Launch::Threads => threads.push(std::thread::spawn(move || {
                if let Err(e) = worker_main(control) {
                    log::warn!("worker: {e}");
                }
            })),
            Launch::Processes { exe } => children.push(
                Command::new(exe)
                    .arg("--worker")
                    .arg(control.to_string())
                    .spawn()
                    .map_err(|e| BenchError::Io(format!("spawn {}: {e}", exe.display())))?,
            ),
        }
    }
    Ok((threads, children))
}

/// Run `spec` against `servers` (client `c` uses `servers[c % len]`).
pub fn run_bench(spec: &WorkloadSpec, servers: &[SocketAddr], launch: &Launch) -> Result<Report, BenchError> {
    spec.validate().map_err(BenchError::Spec)?;
    if servers.len() < spec.shards as usize {
        return Err(BenchError::Spec(format!("{} shards requested, {} servers given", spec.shards, servers.len())));
    }
    for a in &servers[..spec.shards as usize] {
        TcpStream::connect_timeout(a, Duration::from_secs(5)).map_err(|e| BenchError::Connect(format!("{a}: {e}")))?;
    }
    let listener = TcpListener::bind("127.0.0.1:0").map_err(io)?;
    let control = listener.local_addr().map_err(io)?;
    let (threads, mut children) = spawn(launch, control, spec.clients)?;
    // unique per run, so reruns against a long-lived server never collide
    let stamp = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_nanos());
    let run = format!("{}-{stamp:x}", std::process::id());

    let outcome = (|| {
        listener.set_nonblocking(true).map_err(io)?;
        let mut workers = Vec::new();
        let deadline = Instant::now() + SETUP_TIMEOUT;
        while workers.len() < spec.clients as usize {
            match listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false).map_err(io)?;
                    stream.set_read_timeout(Some(SETUP_TIMEOUT)).map_err(io)?;
                    let mut reader = BufReader::new(stream.try_clone().map_err(io)?);
                    match recv(&mut reader).map_err(io)? {
                        Control::Hello => {}
                        m => return Err(BenchError::Worker(format!("expected hello, got {m:?}"))),
                    }
                    let client = workers.len() as u32;
                    workers.push(Worker { stream, reader, client });
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() > deadline {
                        return Err(BenchError::Worker(format!("only {} of {} workers connected", workers.len(), spec.clients)));
                    }
                    std::thread::sleep(Duration::from_millis(2));
                }
                Err(e) => return Err(io(e)),
            }
        }
        for w in &mut workers {
            let server = servers[spec.shard_of(w.client) as usize];
            let pool = format!("bench-{run}-{}", w.client);
            send(&mut w.stream, &Control::Assign { client: w.client, spec: spec.clone(), server, pool }).map_err(io)?;
        }
        let mut failures = Vec::new();
        let mut ready = Vec::new();
        for mut w in workers {
            match recv(&mut w.reader) {
                Ok(Control::Ready) => ready.push(w),
                Ok(Control::Failed(e)) => failures.push(format!("client {}: {e}", w.client)),
                Ok(m) => failures.push(format!("client {}: unexpected {m:?}", w.client)),
                Err(e) => failures.push(format!("client {}: {e}", w.client)),
            }
        }
        let start = Instant::now();
        for w in &mut ready {
            send(&mut w.stream, &Control::Go).map_err(io)?;
        }
        let mut results = Vec::new();
        for mut w in ready {
            w.stream.set_read_timeout(None).map_err(io)?;
            match recv(&mut w.reader) {
                Ok(Control::Done(r)) => results.push(*r),
                Ok(m) => failures.push(format!("client {}: unexpected {m:?}", w.client)),
                Err(e) => failures.push(format!("client {}: aborted: {e}", w.client)),
            }
        }
        Ok((results, failures, start.elapsed()))
    })();

    for t in threads {
        let _ = t.join();
    }
    for c in &mut children {
        if outcome.is_err() {
            let _ = c.kill();
        }
        let _ = c.wait();
    }
    let (results, failures, span) = outcome?;
    Ok(assemble(spec, results, failures, span))
}

/// Fold client results into a report. Aggregate throughput is total ops
/// over the longest client run, so it equals the per-client sum measured
/// on one clock.
pub fn assemble(spec: &WorkloadSpec, mut results: Vec<ClientResult>, failures: Vec<String>, span: Duration) -> Report {
    results.sort_by_key(|r| r.client);
    let wall_ns = results.iter().map(|r| r.elapsed_ns).max().unwrap_or(0);
    let total_ops: u64 = results.iter().map(|r| r.ops).sum();
    let mut samples: Vec<u64> = results.iter().flat_map(|r| r.samples.iter().copied()).collect();
    let (histogram, percentiles) = summarize(&mut samples, BINS);
    let clients = results
        .iter()
        .map(|r| ClientSummary {
            client: r.client,
            shard: r.shard,
            ops: r.ops,
            errors: r.errors,
            echo_failures: r.echo_failures,
            elapsed_secs: r.elapsed_ns as f64 / 1e9,
            ops_per_sec: rate(r.ops, r.elapsed_ns),
            key_digest: r.key_digest,
            host: r.host.clone(),
        })
        .collect();
    Report {
        spec: spec.clone(),
        clients,
        total_ops,
        wall_secs: wall_ns as f64 / 1e9,
        coordinator_secs: span.as_secs_f64(),
        aggregate_ops_per_sec: rate(total_ops, wall_ns),
        histogram,
        percentiles,
        failures,
        scaling: None,
        fairness: None,
    }
}

pub fn rate(ops: u64, ns: u64) -> f64 {
    if ns == 0 {
        0.0
    } else {
        ops as f64 * 1e9 / ns as f64
    }
}
