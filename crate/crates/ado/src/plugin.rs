//! Plugin interface: what a plugin implements and what it may call back.

use std::collections::BTreeMap;

use mcaslite_core::engine::ValueLoc;
use mcaslite_core::index::MatchKind;
use mcaslite_core::pmem::MemoryView;

use crate::message::{CallbackRequest, CallbackResult, RefEntry, WorkRequest};
use crate::{AdoError, Result};

pub type Params = BTreeMap<String, String>;
pub type Work = WorkRequest;

pub trait AdoPlugin: Send {
    /// Called once with the pool extents the plugin may touch.
    fn register_mapped_memory(&mut self, _extents: &[(u64, u64)]) {}

    /// Handle one invocation or signal. The returned buffers travel back to
    /// the client as the response vector; an error becomes `E_ADO_FAULT`.
    fn do_work(&mut self, ctx: &mut Context<'_>, work: &Work) -> std::result::Result<Vec<Vec<u8>>, String>;

    fn cluster_event(&mut self, _sender: &str, _kind: &str, _content: &str) {}

    fn shutdown(&mut self) {}
}

pub type Callbacks<'a> = dyn FnMut(CallbackRequest) -> Result<CallbackResult> + 'a;

/// A plugin's handle on pool memory and on the shard during one work item.
pub struct Context<'a> {
    memory: &'a mut dyn MemoryView,
    callbacks: &'a mut Callbacks<'a>,
    pub params: &'a Params,
}

fn mapped<T>(r: mcaslite_core::Result<T>, offset: u64, len: u64) -> Result<T> {
    r.map_err(|e| match e {
        mcaslite_core::Error::Range { .. } => AdoError::MapFail { offset, len },
        e => e.into(),
    })
}

fn unexpected<T>(r: CallbackResult) -> Result<T> {
    Err(AdoError::Malformed(format!("unexpected callback result {r:?}")))
}

impl<'a> Context<'a> {
    pub fn new(memory: &'a mut dyn MemoryView, callbacks: &'a mut Callbacks<'a>, params: &'a Params) -> Self {
        Self { memory, callbacks, params }
    }

    pub fn read(&self, offset: u64, len: u64) -> Result<Vec<u8>> {
        mapped(self.memory.read_vec(offset, len), offset, len)
    }

    pub fn read_value(&self, v: ValueLoc) -> Result<Vec<u8>> {
        self.read(v.offset, v.len)
    }

    pub fn read_u64(&self, offset: u64) -> Result<u64> {
        mapped(self.memory.read_u64(offset), offset, 8)
    }

    pub fn write(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        mapped(self.memory.write(offset, data), offset, data.len() as u64)
    }

    pub fn write_u64(&mut self, offset: u64, v: u64) -> Result<()> {
        mapped(self.memory.write_u64(offset, v), offset, 8)
    }

    pub fn persist(&mut self, offset: u64, len: u64) -> Result<()> {
        mapped(self.memory.persist(offset, len), offset, len)
    }

    pub fn write_persist(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        self.write(offset, data)?;
        self.persist(offset, data.len() as u64)
    }

    pub fn call(&mut self, req: CallbackRequest) -> Result<CallbackResult> {
        (self.callbacks)(req)
    }

    /// Open `key`, creating it with `len` zeroed bytes if absent. The key
    /// stays locked until the work item completes.
    pub fn create_key(&mut self, key: &[u8], len: u64) -> Result<(ValueLoc, bool)> {
        match self.call(CallbackRequest::CreateKey { key: key.to_vec(), len })? {
            CallbackResult::Key { value, created } => Ok((value, created)),
            r => unexpected(r),
        }
    }

    pub fn open_key(&mut self, key: &[u8]) -> Result<ValueLoc> {
        match self.call(CallbackRequest::OpenKey { key: key.to_vec() })? {
            CallbackResult::Key { value, .. } => Ok(value),
            r => unexpected(r),
        }
    }

    pub fn erase_key(&mut self, key: &[u8]) -> Result<()> {
        self.call(CallbackRequest::EraseKey { key: key.to_vec() }).map(|_| ())
    }

    pub fn resize_value(&mut self, key: &[u8], len: u64) -> Result<ValueLoc> {
        match self.call(CallbackRequest::ResizeValue { key: key.to_vec(), len })? {
            CallbackResult::Key { value, .. } => Ok(value),
            r => unexpected(r),
        }
    }

    pub fn allocate_memory(&mut self, size: u64) -> Result<u64> {
        match self.call(CallbackRequest::AllocateMemory { size })? {
            CallbackResult::Offset(o) => Ok(o),
            r => unexpected(r),
        }
    }

    pub fn free_memory(&mut self, offset: u64, size: u64) -> Result<()> {
        self.call(CallbackRequest::FreeMemory { offset, size }).map(|_| ())
    }

    pub fn get_ref_vector(&mut self, t_begin: u32, t_end: u32) -> Result<Vec<RefEntry>> {
        match self.call(CallbackRequest::GetRefVector { t_begin, t_end })? {
            CallbackResult::Refs(v) => Ok(v),
            r => unexpected(r),
        }
    }

    pub fn iterate(&mut self, position: u64, max: u32) -> Result<(Vec<RefEntry>, Option<u64>)> {
        match self.call(CallbackRequest::Iterate { position, max })? {
            CallbackResult::Page { entries, next } => Ok((entries, next)),
            r => unexpected(r),
        }
    }

    pub fn find_key(&mut self, expr: &[u8], kind: MatchKind, begin: u64) -> Result<(Vec<u8>, u64)> {
        match self.call(CallbackRequest::FindKey { expr: expr.to_vec(), kind, begin })? {
            CallbackResult::Found { key, next } => Ok((key, next)),
            r => unexpected(r),
        }
    }

    /// (size, free bytes, pair count)
    pub fn get_pool_info(&mut self) -> Result<(u64, u64, u64)> {
        match self.call(CallbackRequest::GetPoolInfo)? {
            CallbackResult::PoolInfo { size, free_bytes, count } => Ok((size, free_bytes, count)),
            r => unexpected(r),
        }
    }

    pub fn unlock(&mut self, key: &[u8]) -> Result<()> {
        self.call(CallbackRequest::Unlock { key: key.to_vec() }).map(|_| ())
    }
}

pub type Factory = fn(&Params) -> std::result::Result<Box<dyn AdoPlugin>, String>;

/// Plugins known to this build, looked up by name.
#[derive(Clone, Default)]
pub struct PluginRegistry {
    factories: BTreeMap<String, Factory>,
}

impl std::fmt::Debug for PluginRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

/// Strip shared-library decoration, so `libcomponent-adoplugin-passthru.so`
/// names the `passthru` plugin.
pub fn canonical_name(name: &str) -> &str {
    let n = name.rsplit('/').next().unwrap_or(name);
    let n = n.strip_suffix(".so").unwrap_or(n);
    n.strip_prefix("libcomponent-adoplugin-").unwrap_or(n)
}

impl PluginRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The test and example plugins shipped with this crate.
    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        crate::plugins::register_builtins(&mut r);
        r
    }

    pub fn register(&mut self, name: &str, f: Factory) {
        self.factories.insert(name.to_string(), f);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(canonical_name(name))
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn create(&self, name: &str, params: &Params) -> std::result::Result<Box<dyn AdoPlugin>, String> {
        let f = self.factories.get(canonical_name(name)).ok_or_else(|| format!("unknown plugin {name:?}"))?;
        f(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_names_are_canonical() {
        assert_eq!(canonical_name("libcomponent-adoplugin-passthru.so"), "passthru");
        assert_eq!(canonical_name("/opt/lib/libcomponent-adoplugin-sleep.so"), "sleep");
        assert_eq!(canonical_name("passthru"), "passthru");
        let r = PluginRegistry::with_builtins();
        assert!(r.contains("libcomponent-adoplugin-passthru.so"));
        assert!(!r.contains("libcomponent-adoplugin-rustexample.so"));
        assert!(r.create("nope", &Params::new()).is_err());
    }
}
