//! mcaslite shard server.
//!
//! Each configured shard runs on its own thread with its own arena, pools,
//! lock table and ADO processes. Shards share nothing, so a deployment with
//! several shards is several independent servers in one process.

pub mod config;
pub mod locks;
pub mod session;
pub mod shard;
pub mod stats;

use std::path::{Path, PathBuf};

use mcaslite_ado::PluginRegistry;
use mcaslite_core::engine::EngineOptions;
use mcaslite_core::pmem::Pmem;

pub use config::{load_config, Config, ConfigError, ShardConfig, Signal};
pub use shard::{start_shard, AdoMode, ShardHandle, ShardSpec};

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] mcaslite_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Every plugin this build can run.
pub fn default_registry() -> PluginRegistry {
    let mut r = PluginRegistry::with_builtins();
    mcaslite_versioning::register(&mut r);
    r
}

/// The ADO executable: `ado_path` if it exists, else `mcas-ado` next to the
/// running binary.
pub fn find_ado_exe(cfg: &Config) -> Option<PathBuf> {
    if let Some(p) = cfg.ado_path.as_ref().filter(|p| p.is_file()) {
        return Some(p.clone());
    }
    let me = std::env::current_exe().ok()?;
    let sibling = me.parent()?.join("mcas-ado");
    sibling.is_file().then_some(sibling)
}

/// Open (or create) the shard's arena file and describe the shard.
pub fn shard_spec(cfg: &Config, index: usize, registry: &PluginRegistry) -> Result<ShardSpec, ServerError> {
    let s = &cfg.shards[index];
    let size = s.dax.size.unwrap_or(config::DEFAULT_ARENA_SIZE);
    let (pmem, existed) = Pmem::map_file(&s.dax.path, size)?;
    log::info!(
        "shard {index}: arena {} ({})",
        s.dax.path.display(),
        if existed { "recovering" } else { "new" }
    );
    let ado = match s.ado_mode {
        Some(config::AdoModeChoice::Thread) => AdoMode::Thread,
        _ => match find_ado_exe(cfg) {
            Some(exe) => AdoMode::Process { exe, dir: run_dir(s.port) },
            None if s.ado_mode.is_some() => {
                return Err(ConfigError { field: "ado_path".into(), detail: "no mcas-ado executable found".into() }.into())
            }
            None => AdoMode::Thread,
        },
    };
    if let AdoMode::Process { dir, .. } = &ado {
        std::fs::create_dir_all(dir)?;
    }
    Ok(ShardSpec {
        id: index as u32,
        bind: ([0, 0, 0, 0], s.port).into(),
        pmem,
        backend: s.backend,
        core: s.core,
        plugins: s.ado_plugins.clone(),
        params: s.ado_params.clone(),
        signals: s.ado_signals.clone(),
        ado,
        registry: registry.clone(),
        engine: EngineOptions::default(),
    })
}

fn run_dir(port: u16) -> PathBuf {
    std::env::temp_dir().join(format!("mcaslite-{}-{port}", std::process::id()))
}

/// Start every shard in `cfg`. On failure the shards already started are stopped.
pub fn start(cfg: &Config) -> Result<Vec<ShardHandle>, ServerError> {
    let registry = default_registry();
    let mut shards = Vec::new();
    for i in 0..cfg.shards.len() {
        let spec = shard_spec(cfg, i, &registry)?;
        shards.push(start_shard(spec)?);
    }
    Ok(shards)
}

/// Load and parse a configuration file.
pub fn read_config(path: &Path) -> Result<Config, ServerError> {
    let text = std::fs::read_to_string(path)?;
    Ok(load_config(&text)?)
}
