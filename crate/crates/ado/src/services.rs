//! Shard-side execution of plugin callbacks against a pool's engine.
//!
//! Locking is the caller's business: the shard decides which keys a work
//! item may open or erase before it calls [`execute`]. This function only
//! touches the engine and keeps the secondary index (if any) in step.

use mcaslite_core::engine::KvEngine;
use mcaslite_core::index::SecondaryIndex;
use mcaslite_core::protocol::Status;
use mcaslite_core::Error;

use crate::message::{CallbackRequest, CallbackResult, RefEntry};

pub type Reply = Result<CallbackResult, (Status, String)>;

fn fail(e: Error) -> (Status, String) {
    ((&e).into(), e.to_string())
}

/// Pairs in key order, so iteration positions are stable ordinals.
fn sorted(engine: &dyn KvEngine) -> Result<Vec<RefEntry>, Error> {
    let mut v: Vec<RefEntry> =
        engine.iterate()?.into_iter().map(|(key, value, time)| RefEntry { key, value, time }).collect();
    v.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(v)
}

pub fn execute(engine: &mut dyn KvEngine, index: Option<&mut SecondaryIndex>, req: &CallbackRequest) -> Reply {
    run(engine, index, req).map_err(fail)
}

fn run(engine: &mut dyn KvEngine, index: Option<&mut SecondaryIndex>, req: &CallbackRequest) -> Result<CallbackResult, Error> {
    Ok(match req {
        CallbackRequest::CreateKey { key, len } => {
            let (value, created) = engine.create_key(key, *len)?;
            if let Some(ix) = index {
                ix.insert(key);
            }
            CallbackResult::Key { value, created }
        }
        CallbackRequest::OpenKey { key } => CallbackResult::Key { value: engine.locate_stable(key)?, created: false },
        CallbackRequest::EraseKey { key } => {
            engine.erase(key)?;
            if let Some(ix) = index {
                ix.remove(key);
            }
            CallbackResult::Done
        }
        CallbackRequest::ResizeValue { key, len } => {
            CallbackResult::Key { value: engine.resize_value(key, *len)?, created: false }
        }
        CallbackRequest::AllocateMemory { size } => CallbackResult::Offset(engine.allocate_memory(*size)?),
        CallbackRequest::FreeMemory { offset, size } => {
            engine.free_memory(*offset, *size)?;
            CallbackResult::Done
        }
        CallbackRequest::GetRefVector { t_begin, t_end } => {
            let end = if *t_end == 0 { u32::MAX } else { *t_end };
            CallbackResult::Refs(sorted(engine)?.into_iter().filter(|r| r.time >= *t_begin && r.time <= end).collect())
        }
        CallbackRequest::Iterate { position, max } => {
            let all = sorted(engine)?;
            let start = (*position as usize).min(all.len());
            let end = start.saturating_add((*max).max(1) as usize).min(all.len());
            let next = (end < all.len()).then_some(end as u64);
            CallbackResult::Page { entries: all[start..end].to_vec(), next }
        }
        CallbackRequest::FindKey { expr, kind, begin } => {
            let ix = index.ok_or(Error::NoIndex)?;
            let (key, next) = ix.find(expr, *kind, *begin)?;
            CallbackResult::Found { key, next }
        }
        CallbackRequest::GetPoolInfo => {
            let i = engine.pool_info();
            CallbackResult::PoolInfo { size: i.size, free_bytes: i.free_bytes, count: i.count }
        }
        CallbackRequest::Unlock { .. } => CallbackResult::Done,
    })
}
