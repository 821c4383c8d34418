//! One simulated client, and the control-socket protocol that lines the
//! clients up behind a common start barrier.
//!
//! Control messages are single JSON lines. A worker says `Hello`, gets an
//! `Assign`, prepares its pool, says `Ready`, waits for `Go`, runs, and
//! finishes with `Done` or `Failed`.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::Instant;

use mcaslite_client::{Pool, Session};
use mcaslite_core::hash::hash64;
use serde::{Deserialize, Serialize};

use crate::workload::{value_for, KeyStream, Mix, WorkloadSpec};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HostInfo {
    pub hostname: String,
    pub pid: u32,
    pub os: String,
    pub arch: String,
}

impl HostInfo {
    pub fn here() -> Self {
        let hostname = std::fs::read_to_string("/proc/sys/kernel/hostname")
            .map(|s| s.trim().to_string())
            .or_else(|_| std::env::var("HOSTNAME"))
            .unwrap_or_else(|_| "unknown".into());
        Self { hostname, pid: std::process::id(), os: std::env::consts::OS.into(), arch: std::env::consts::ARCH.into() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClientResult {
    pub client: u32,
    pub shard: u32,
    pub ops: u64,
    pub errors: u64,
    /// ADO replies that did not echo the request.
    pub echo_failures: u64,
    pub elapsed_ns: u64,
    /// Per-operation latency, ns.
    pub samples: Vec<u64>,
    /// Hash over the keys used, in order; equal seeds give equal digests.
    pub key_digest: u64,
    pub host: HostInfo,
}

#[derive(Debug, Serialize, Deserialize)]
pub enum Control {
    Hello,
    Assign { client: u32, spec: WorkloadSpec, server: SocketAddr, pool: String },
    Ready,
    Go,
    Done(Box<ClientResult>),
    Failed(String),
}

pub fn send(w: &mut impl Write, m: &Control) -> std::io::Result<()> {
    let mut line = serde_json::to_vec(m)?;
    line.push(b'\n');
    w.write_all(&line)?;
    w.flush()
}

pub fn recv(r: &mut impl BufRead) -> std::io::Result<Control> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(std::io::ErrorKind::UnexpectedEof.into());
    }
    Ok(serde_json::from_str(&line)?)
}

/// A client with its pool open, ready to run.
pub struct Prepared {
    spec: WorkloadSpec,
    client: u32,
    session: Session,
    pool: Pool,
    pool_name: String,
    keys: KeyStream,
}

pub fn prepare(spec: &WorkloadSpec, client: u32, server: SocketAddr, pool_name: &str) -> Result<Prepared, String> {
    let mut session = Session::connect(server).map_err(|e| format!("client {client}: {e}"))?;
    let pool = session.create_pool(pool_name, spec.pool_size).map_err(|e| format!("create pool {pool_name}: {e}"))?;
    let keys = KeyStream::new(spec, client);
    if spec.mix == Mix::Read {
        let v = value_for(spec, client);
        for k in keys.key_set() {
            session.put(pool, k, &v).map_err(|e| format!("populate: {e}"))?;
        }
    }
    Ok(Prepared { spec: spec.clone(), client, session, pool, pool_name: pool_name.to_string(), keys })
}

impl Prepared {
    /// Run the workload from now until the op count or the duration runs out.
    pub fn run(mut self) -> ClientResult {
        let spec = &self.spec;
        let value = value_for(spec, self.client);
        let limit = spec.ops.unwrap_or(if spec.duration.is_some() { u64::MAX } else { 0 });
        let mut samples = Vec::with_capacity(limit.min(4 << 20) as usize);
        let (mut errors, mut echo_failures, mut digest) = (0, 0, 0u64);
        let start = Instant::now();
        let deadline = spec.duration.map(|d| start + d);
        let mut ops = 0;
        while ops < limit && deadline.map_or(true, |d| Instant::now() < d) {
            let key = self.keys.next_key();
            digest = hash64(digest, &key);
            let t = Instant::now();
            let ok = match spec.mix {
                Mix::Write => self.session.put(self.pool, &key, &value).is_ok(),
                Mix::Read => match self.session.get(self.pool, &key) {
                    Ok(v) => {
                        self.session.free_memory(v);
                        true
                    }
                    Err(_) => false,
                },
                Mix::Ado => match self.session.invoke_ado(self.pool, &key, &value, 0, spec.value_len.max(1) as u64) {
                    Ok(out) => {
                        if out.len() != 1 || out[0] != value {
                            echo_failures += 1;
                        }
                        true
                    }
                    Err(_) => false,
                },
            };
            samples.push(t.elapsed().as_nanos() as u64);
            if !ok {
                errors += 1;
            }
            ops += 1;
        }
        let elapsed_ns = start.elapsed().as_nanos() as u64;
        let _ = self.session.close_pool(self.pool);
        let _ = self.session.delete_pool(&self.pool_name);
        ClientResult {
            client: self.client,
            shard: spec.shard_of(self.client),
            ops,
            errors,
            echo_failures,
            elapsed_ns,
            samples,
            key_digest: digest,
            host: HostInfo::here(),
        }
    }
}

/// Worker side of the control protocol, for threads and processes alike.
pub fn worker_main(control: SocketAddr) -> Result<(), String> {
    let stream = TcpStream::connect(control).map_err(|e| format!("control socket: {e}"))?;
    let mut w = stream.try_clone().map_err(|e| e.to_string())?;
    let mut r = BufReader::new(stream);
    let io = |e: std::io::Error| e.to_string();
    send(&mut w, &Control::Hello).map_err(io)?;
    let Control::Assign { client, spec, server, pool } = recv(&mut r).map_err(io)? else {
        return Err("expected an assignment".into());
    };
    let prepared = match prepare(&spec, client, server, &pool) {
        Ok(p) => p,
        Err(e) => {
            send(&mut w, &Control::Failed(e.clone())).map_err(io)?;
            return Err(e);
        }
    };
    send(&mut w, &Control::Ready).map_err(io)?;
    match recv(&mut r).map_err(io)? {
        Control::Go => {}
        m => return Err(format!("expected go, got {m:?}")),
    }
    let result = prepared.run();
    send(&mut w, &Control::Done(Box::new(result))).map_err(io)
}
