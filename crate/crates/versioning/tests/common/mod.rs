//! In-process stand-in for a shard running the versioning plugin: the
//! same key creation and detached placement the shard does for an
//! invoke-put, then the plugin called directly on this thread.

#![allow(dead_code)]

use mcaslite_ado::message::{CallbackRequest, WorkRequest};
use mcaslite_ado::plugin::{Context, Params};
use mcaslite_ado::{services, AdoError, AdoPlugin};
use mcaslite_core::engine::{create_engine, open_engine, EngineKind, EngineOptions, KvEngine, ValueLoc};
use mcaslite_core::pmem::{ExtentView, Image, Pmem};
use mcaslite_versioning::message::{Reply, Request};
use mcaslite_versioning::{root_size, VersionRoot, Versioning};

const MIB: u64 = 1 << 20;
pub const EXT: [(u64, u64); 1] = [(32 * MIB, 64 * MIB)];
pub const CAPACITY: u64 = 128 * MIB;

pub struct Local {
    pub pmem: Pmem,
    pub engine: Box<dyn KvEngine>,
    pub kind: EngineKind,
    plugin: Versioning,
    max_versions: u64,
    /// Every free the plugin asked for, in order.
    pub frees: Vec<u64>,
    /// Every detached allocation handed to the plugin.
    pub placed: Vec<u64>,
}

impl Local {
    pub fn new(kind: EngineKind, max_versions: u64) -> Self {
        let pmem = Pmem::crash_sim(CAPACITY);
        let engine = create_engine(kind, pmem.clone(), &EXT, &EngineOptions::default()).unwrap();
        Self::with(pmem, engine, kind, max_versions)
    }

    pub fn reopen(image: Image, kind: EngineKind, max_versions: u64) -> Result<Self, String> {
        let pmem = Pmem::from_image(image);
        let engine = open_engine(kind, pmem.clone(), &EXT, &EngineOptions::default()).map_err(|e| e.to_string())?;
        Ok(Self::with(pmem, engine, kind, max_versions))
    }

    fn with(pmem: Pmem, engine: Box<dyn KvEngine>, kind: EngineKind, max_versions: u64) -> Self {
        Self { pmem, engine, kind, plugin: Versioning::new(max_versions), max_versions, frees: Vec::new(), placed: Vec::new() }
    }

    fn run(&mut self, w: &WorkRequest) -> Result<Vec<Vec<u8>>, String> {
        let mut view = ExtentView::new(self.pmem.clone(), EXT.to_vec());
        let engine = &mut self.engine;
        let frees = &mut self.frees;
        let mut cb = |req: CallbackRequest| {
            if let CallbackRequest::FreeMemory { offset, .. } = req {
                frees.push(offset);
            }
            services::execute(engine.as_mut(), None, &req).map_err(|(s, m)| AdoError::Status(s, m))
        };
        let params = Params::new();
        let mut ctx = Context::new(&mut view, &mut cb, &params);
        self.plugin.do_work(&mut ctx, w)
    }

    pub fn vput(&mut self, key: &[u8], value: &[u8]) -> Result<u64, String> {
        let mut created = false;
        if self.engine.locate(key).is_err() {
            created = self.engine.create_key(key, root_size(self.max_versions)).map_err(|e| e.to_string())?.1;
        }
        let size = (value.len() as u64).max(1);
        let off = self.engine.allocate_memory(size).map_err(|e| e.to_string())?;
        self.pmem.write_persist(off, value).map_err(|e| e.to_string())?;
        self.placed.push(off);
        let root = self.engine.locate_stable(key).map_err(|e| e.to_string())?;
        let w = WorkRequest {
            work_id: 1,
            key: key.to_vec(),
            values: vec![root],
            detached: Some(ValueLoc { offset: off, len: value.len() as u64 }),
            request: Request::Put.encode(),
            new_root: created,
            signal: false,
        };
        let out = self.run(&w)?;
        match Reply::decode(&Request::Put, &out[0]).map_err(|e| e.0)? {
            Reply::Stored { timestamp } => Ok(timestamp),
            r => Err(format!("{r:?}")),
        }
    }

    /// `Ok(None)` when the version is not retained; `Err` for an absent key.
    pub fn vget(&mut self, key: &[u8], index: i64) -> Result<Option<(Vec<u8>, u64)>, String> {
        let root = self.engine.locate_stable(key).map_err(|e| e.to_string())?;
        let req = Request::Get { index };
        let w = WorkRequest {
            work_id: 1,
            key: key.to_vec(),
            values: vec![root],
            detached: None,
            request: req.encode(),
            new_root: false,
            signal: false,
        };
        let out = self.run(&w)?;
        match Reply::decode(&req, &out[0]).map_err(|e| e.0)? {
            Reply::Version { timestamp, value } => Ok(Some((value, timestamp))),
            Reply::NoVersion(_) => Ok(None),
            r => Err(format!("{r:?}")),
        }
    }

    /// Recover `key`'s root the way the plugin does on its next work item,
    /// then list the retained values oldest first. An absent key has none.
    pub fn history(&mut self, key: &[u8]) -> Result<Vec<Vec<u8>>, String> {
        let Ok(root) = self.engine.locate_stable(key) else { return Ok(Vec::new()) };
        let mut view = ExtentView::new(self.pmem.clone(), EXT.to_vec());
        let mut cb = |_: CallbackRequest| -> mcaslite_ado::Result<_> { Err(AdoError::Malformed("no callbacks".into())) };
        let params = Params::new();
        let mut ctx = Context::new(&mut view, &mut cb, &params);
        let r = VersionRoot::new(root.offset, root.len);
        r.open(&mut ctx, self.max_versions).map_err(|e| e.to_string())?;
        let mut out = Vec::new();
        for v in r.history(&ctx).map_err(|e| e.to_string())? {
            out.push(ctx.read(v.offset, v.len).map_err(|e| e.to_string())?);
        }
        Ok(out)
    }
}

/// What a hand-run ring of `n` slots retains after `puts`: the last `n`.
pub fn expected(puts: &[Vec<u8>], n: usize) -> Vec<Vec<u8>> {
    puts[puts.len().saturating_sub(n)..].to_vec()
}
