//! The ADO side of the queue pair: bootstrap, then run work items through
//! the loaded plugins one at a time.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mcaslite_core::pmem::{ExtentView, MemoryView, Pmem};

use crate::message::{AdoToShard, Bootstrap, CallbackRequest, CallbackResult, ShardToAdo};
use crate::plugin::{AdoPlugin, Context, Params, PluginRegistry};
use crate::uipc::{Endpoint, Queue};
use crate::{AdoError, Result};

/// Builds the plugin's window onto pool memory from the bootstrap message.
pub type MemoryFor<'a> = dyn FnOnce(&Bootstrap) -> std::result::Result<Box<dyn MemoryView>, String> + 'a;

fn send(ep: &mut Endpoint, m: &AdoToShard, alive: &mut dyn FnMut() -> bool) -> Result<()> {
    ep.tx.send(&m.encode(), alive)
}

fn recv(ep: &mut Endpoint, alive: &mut dyn FnMut() -> bool) -> Result<ShardToAdo> {
    Ok(ShardToAdo::decode(&ep.rx.recv(alive)?)?)
}

fn panic_text(p: &(dyn std::any::Any + Send)) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "plugin panicked".into())
}

/// Ask the shard to run a callback and wait for its reply. Cluster events
/// that arrive in the meantime are held for after the work item.
fn callback(
    ep: &mut Endpoint,
    alive: &mut dyn FnMut() -> bool,
    held: &mut Vec<ShardToAdo>,
    work_id: u64,
    request: CallbackRequest,
) -> Result<CallbackResult> {
    send(ep, &AdoToShard::Callback { work_id, request }, alive)?;
    loop {
        match recv(ep, alive)? {
            ShardToAdo::CallbackReply { work_id: id, result } if id == work_id => {
                return result.map_err(|(s, m)| AdoError::Status(s, m));
            }
            ShardToAdo::Shutdown => return Err(AdoError::Disconnected),
            m @ ShardToAdo::ClusterEvent { .. } => held.push(m),
            m => return Err(AdoError::Malformed(format!("unexpected {m:?} during callback"))),
        }
    }
}

/// Serve one pool until shutdown or disconnection.
pub fn serve(
    mut ep: Endpoint,
    registry: &PluginRegistry,
    memory_for: Box<MemoryFor<'_>>,
    alive: &mut dyn FnMut() -> bool,
) -> Result<()> {
    let boot = match recv(&mut ep, alive)? {
        ShardToAdo::Bootstrap(b) => b,
        m => return Err(AdoError::Malformed(format!("expected bootstrap, got {m:?}"))),
    };
    let params: Params = boot.params.iter().cloned().collect();
    let setup = || -> std::result::Result<_, String> {
        if boot.plugins.is_empty() {
            return Err("no plugins configured".into());
        }
        let mut plugins: Vec<Box<dyn AdoPlugin>> =
            boot.plugins.iter().map(|n| registry.create(n, &params)).collect::<std::result::Result<_, _>>()?;
        for p in &mut plugins {
            p.register_mapped_memory(&boot.extents);
        }
        Ok(plugins)
    };
    let mut plugins = match setup() {
        Ok(p) => p,
        Err(e) => {
            send(&mut ep, &AdoToShard::Failed(e.clone()), alive)?;
            return Err(AdoError::Launch(e));
        }
    };
    let mut memory = match memory_for(&boot) {
        Ok(m) => m,
        Err(e) => {
            send(&mut ep, &AdoToShard::Failed(e.clone()), alive)?;
            return Err(AdoError::Launch(e));
        }
    };
    send(&mut ep, &AdoToShard::Ready, alive)?;
    log::debug!("ado for pool {:#x} ready with {:?}", boot.pool, boot.plugins);

    let mut next = 0usize;
    let mut held = Vec::new();
    loop {
        let msg = match (!held.is_empty()).then(|| held.remove(0)) {
            Some(m) => m,
            None => match recv(&mut ep, alive) {
                Ok(m) => m,
                Err(AdoError::Disconnected) => break,
                Err(e) => return Err(e),
            },
        };
        match msg {
            ShardToAdo::Work(w) => {
                let which = next % plugins.len();
                next += 1;
                let work_id = w.work_id;
                let result = {
                    let ep = &mut ep;
                    let held = &mut held;
                    let alive = &mut *alive;
                    let mut cb = move |r: CallbackRequest| callback(ep, alive, held, work_id, r);
                    let mut ctx = Context::new(memory.as_mut(), &mut cb, &params);
                    let plugin = &mut plugins[which];
                    catch_unwind(AssertUnwindSafe(|| plugin.do_work(&mut ctx, &w)))
                        .unwrap_or_else(|p| Err(format!("plugin panicked: {}", panic_text(p.as_ref()))))
                };
                let done = AdoToShard::Complete { work_id, plugin: which as u32, result };
                if let Err(e) = send(&mut ep, &done, alive) {
                    log::debug!("ado for pool {:#x}: cannot complete work {work_id}: {e}", boot.pool);
                    break;
                }
            }
            ShardToAdo::ClusterEvent { sender, kind, content } => {
                for p in &mut plugins {
                    p.cluster_event(&sender, &kind, &content);
                }
            }
            ShardToAdo::Shutdown => break,
            m => return Err(AdoError::Malformed(format!("unexpected {m:?}"))),
        }
    }
    for p in &mut plugins {
        p.shutdown();
    }
    Ok(())
}

/// Entry point of a standalone ADO process attached to `queue_path`.
/// Exits once the parent shard dies or closes the queue.
pub fn process_main(queue_path: &Path, registry: &PluginRegistry) -> i32 {
    let q = match Queue::open_file(queue_path) {
        Ok(q) => q,
        Err(e) => {
            eprintln!("mcas-ado: {e}");
            return 2;
        }
    };
    // SAFETY: getppid has no preconditions.
    let parent = unsafe { libc::getppid() };
    let mut alive = move || unsafe { libc::getppid() } == parent;
    let memory_for = |b: &Bootstrap| -> std::result::Result<Box<dyn MemoryView>, String> {
        let path = b.arena_path.as_deref().ok_or("process mode needs an arena file")?;
        if !Path::new(path).is_file() {
            return Err(format!("{path} does not exist"));
        }
        let (pmem, _) = Pmem::map_file(Path::new(path), 0).map_err(|e| e.to_string())?;
        Ok(Box::new(ExtentView::new(pmem, b.extents.clone())))
    };
    match serve(q.ado_end(), registry, Box::new(memory_for), &mut alive) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("mcas-ado: {e}");
            1
        }
    }
}
