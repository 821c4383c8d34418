//! Shard side of an ADO: launches it, moves messages, notices its death.

use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use mcaslite_core::pmem::MemoryView;

use crate::message::{AdoToShard, Bootstrap, ShardToAdo};
use crate::plugin::PluginRegistry;
use crate::uipc::{Endpoint, Queue};
use crate::{runtime, AdoError, Result};

const READY_TIMEOUT: Duration = Duration::from_secs(20);

enum Worker {
    Thread(Option<JoinHandle<()>>),
    Process(Child),
}

impl Worker {
    fn alive(&mut self) -> bool {
        match self {
            Worker::Thread(h) => h.as_ref().is_some_and(|h| !h.is_finished()),
            Worker::Process(c) => matches!(c.try_wait(), Ok(None)),
        }
    }
}

pub struct AdoHost {
    ep: Endpoint,
    worker: Worker,
    queue_file: Option<PathBuf>,
}

impl std::fmt::Debug for AdoHost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AdoHost").field("pid", &self.pid()).field("queue_file", &self.queue_file).finish()
    }
}

impl AdoHost {
    /// Run the ADO on a thread of this process, over `memory`.
    pub fn spawn_thread(boot: Bootstrap, registry: PluginRegistry, memory: Box<dyn MemoryView>) -> Result<Self> {
        let q = Queue::in_memory();
        let ado = q.ado_end();
        let handle = std::thread::Builder::new()
            .name(format!("ado-{:x}", boot.pool))
            .spawn(move || {
                let memory_for = move |_: &Bootstrap| Ok(memory);
                if let Err(e) = runtime::serve(ado, &registry, Box::new(memory_for), &mut || true) {
                    log::debug!("ado thread exited: {e}");
                }
            })
            .map_err(|e| AdoError::Launch(e.to_string()))?;
        let mut host = Self { ep: q.shard_end(), worker: Worker::Thread(Some(handle)), queue_file: None };
        host.handshake(boot)?;
        Ok(host)
    }

    /// Run the ADO as a child process (`exe --queue <file>`), with its queue
    /// segment in `dir`. The child maps the arena file named in `boot`.
    pub fn spawn_process(boot: Bootstrap, exe: &Path, dir: &Path) -> Result<Self> {
        let path = dir.join(format!("mcaslite.{}.{}.uipc", boot.shard, boot.pool));
        // a previous ADO for this pool that died without cleaning up
        let _ = std::fs::remove_file(&path);
        let q = Queue::create_file(&path)?;
        let child = Command::new(exe)
            .arg("--queue")
            .arg(&path)
            .stdin(Stdio::null())
            .spawn()
            .map_err(|e| {
                let _ = std::fs::remove_file(&path);
                AdoError::Launch(format!("{}: {e}", exe.display()))
            })?;
        let mut host = Self { ep: q.shard_end(), worker: Worker::Process(child), queue_file: Some(path) };
        host.handshake(boot)?;
        Ok(host)
    }

    fn handshake(&mut self, boot: Bootstrap) -> Result<()> {
        self.send(&ShardToAdo::Bootstrap(boot))?;
        match self.recv_timeout(READY_TIMEOUT)? {
            Some(AdoToShard::Ready) => Ok(()),
            Some(AdoToShard::Failed(e)) => Err(AdoError::Launch(e)),
            Some(m) => Err(AdoError::Malformed(format!("expected ready, got {m:?}"))),
            None => Err(AdoError::Launch("ADO did not start in time".into())),
        }
    }

    pub fn pid(&self) -> Option<u32> {
        match &self.worker {
            Worker::Process(c) => Some(c.id()),
            Worker::Thread(_) => None,
        }
    }

    pub fn is_alive(&mut self) -> bool {
        !self.ep.queue().is_closed() && self.worker.alive()
    }

    pub fn send(&mut self, m: &ShardToAdo) -> Result<()> {
        let worker = &mut self.worker;
        self.ep.tx.send(&m.encode(), &mut || worker.alive())
    }

    /// Next message if one is waiting. Fails with `Disconnected` once the
    /// ADO is gone and nothing is left to read.
    pub fn poll(&mut self) -> Result<Option<AdoToShard>> {
        if let Some(b) = self.ep.rx.try_recv()? {
            return Ok(Some(AdoToShard::decode(&b)?));
        }
        if !self.is_alive() {
            // drain anything published just before death
            return match self.ep.rx.try_recv()? {
                Some(b) => Ok(Some(AdoToShard::decode(&b)?)),
                None => Err(AdoError::Disconnected),
            };
        }
        Ok(None)
    }

    pub fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<AdoToShard>> {
        let deadline = Instant::now() + timeout;
        let mut spins = 0u32;
        loop {
            if let Some(m) = self.poll()? {
                return Ok(Some(m));
            }
            if Instant::now() >= deadline {
                return Ok(None);
            }
            spins += 1;
            if spins > 100 {
                std::thread::sleep(Duration::from_micros(50));
            } else {
                std::thread::yield_now();
            }
        }
    }

    /// Kill a process ADO outright; a thread ADO is told to stop.
    pub fn kill(&mut self) {
        self.ep.queue().close();
        if let Worker::Process(c) = &mut self.worker {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

impl Drop for AdoHost {
    fn drop(&mut self) {
        if self.is_alive() {
            let _ = self.ep.tx.try_send(&ShardToAdo::Shutdown.encode());
        }
        self.ep.queue().close();
        match &mut self.worker {
            Worker::Thread(h) => {
                // a plugin stuck in do_work would block here forever
                if let Some(h) = h.take() {
                    if h.is_finished() {
                        let _ = h.join();
                    }
                }
            }
            Worker::Process(c) => {
                let deadline = Instant::now() + Duration::from_millis(500);
                while matches!(c.try_wait(), Ok(None)) && Instant::now() < deadline {
                    std::thread::sleep(Duration::from_millis(2));
                }
                let _ = c.kill();
                let _ = c.wait();
            }
        }
        if let Some(p) = &self.queue_file {
            let _ = std::fs::remove_file(p);
        }
    }
}
