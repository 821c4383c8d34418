//! Server side: the `versioning` ADO plugin.
//!
//! A put arrives as an invoke-put with a detached value. The plugin links
//! that value into the key's ring and frees the version it displaced. A
//! get reads back one retained version. Params: `max_versions` (default
//! [`DEFAULT_MAX_VERSIONS`]) sizes rings created from now on; existing
//! roots keep the length they were created with.

use std::time::{SystemTime, UNIX_EPOCH};

use mcaslite_ado::plugin::{AdoPlugin, Context, Params, PluginRegistry, Work};
use mcaslite_ado::AdoError;

use crate::message::{Reply, Request};
use crate::root::{Version, VersionRoot};

pub const DEFAULT_MAX_VERSIONS: u64 = 8;
pub const PLUGIN_NAME: &str = "versioning";

pub fn register(r: &mut PluginRegistry) {
    r.register(PLUGIN_NAME, |p| Ok(Box::new(Versioning::from_params(p)?)));
}

#[derive(Debug)]
pub struct Versioning {
    max_versions: u64,
}

impl Versioning {
    pub fn new(max_versions: u64) -> Self {
        Self { max_versions }
    }

    pub fn from_params(p: &Params) -> Result<Self, String> {
        let n = match p.get("max_versions") {
            Some(v) => v.parse::<u64>().map_err(|e| format!("max_versions: {e}"))?,
            None => DEFAULT_MAX_VERSIONS,
        };
        if n == 0 {
            return Err("max_versions must be at least 1".into());
        }
        Ok(Self::new(n))
    }

    fn handle(&self, ctx: &mut Context<'_>, w: &Work, req: Request, linked: &mut bool) -> Result<Reply, AdoError> {
        let loc = *w.values.first().ok_or_else(|| AdoError::Malformed("no root value".into()))?;
        let root = VersionRoot::new(loc.offset, loc.len);
        if w.new_root {
            root.init(ctx, self.max_versions)?;
        } else {
            root.open(ctx, self.max_versions)?;
        }
        match req {
            Request::Put => {
                let d = w.detached.ok_or_else(|| AdoError::Malformed("put without a detached value".into()))?;
                // monotonic per key, even across restarts and clock steps
                let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |t| t.as_nanos() as u64);
                let timestamp = now.max(root.latest_timestamp(ctx)? + 1);
                let old = root.add_version(ctx, Version { offset: d.offset, len: d.len, timestamp })?;
                *linked = true;
                if !old.is_empty() {
                    ctx.free_memory(old.offset, old.len.max(1))?;
                }
                Ok(Reply::Stored { timestamp })
            }
            Request::Get { index } => match root.get_version(ctx, index)? {
                Some(v) => Ok(Reply::Version { timestamp: v.timestamp, value: ctx.read(v.offset, v.len)? }),
                None => Ok(Reply::NoVersion(format!(
                    "version {index} of {} retained",
                    root.count(ctx)?
                ))),
            },
        }
    }
}

impl AdoPlugin for Versioning {
    fn do_work(&mut self, ctx: &mut Context<'_>, w: &Work) -> Result<Vec<Vec<u8>>, String> {
        if w.signal {
            return Ok(Vec::new());
        }
        let mut linked = false;
        let reply = match Request::decode(&w.request) {
            Ok(req) => self.handle(ctx, w, req, &mut linked),
            Err(e) => Ok(Reply::BadRequest(e.0)),
        };
        if let (false, Some(d)) = (linked, w.detached) {
            // nobody else will ever reference it
            let _ = ctx.free_memory(d.offset, d.len.max(1));
        }
        reply.map(|r| vec![r.encode()]).map_err(|e| e.to_string())
    }
}
