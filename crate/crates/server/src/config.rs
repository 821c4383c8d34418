//! JSON server configuration.
//!
//! ```json
//! {
//!   "shards": [{
//!     "core": 0, "port": 11911, "default_backend": "hstore",
//!     "dax_config": [{ "path": "/tmp/shard0.arena", "addr": "0x9000000000", "size": 1073741824 }],
//!     "ado_plugins": ["libcomponent-adoplugin-passthru.so"],
//!     "ado_cores": "2", "ado_params": { "sleep_ms": "50" },
//!     "ado_signals": ["post-put", "post-erase"], "ado_mode": "process"
//!   }],
//!   "ado_path": "/usr/local/bin/mcas-ado",
//!   "net_providers": "sockets"
//! }
//! ```
//!
//! `size` (arena bytes for a file that does not exist yet) and `ado_mode`
//! (`thread` or `process`) are local extensions. Unknown keys produce
//! warnings; missing or malformed required keys are errors.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use mcaslite_core::engine::EngineKind;
use serde_json::{Map, Value};

/// Arena capacity used when the arena file does not exist and no `size` is given.
pub const DEFAULT_ARENA_SIZE: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("E_CONFIG({field}): {detail}")]
pub struct ConfigError {
    pub field: String,
    pub detail: String,
}

fn err<T>(field: &str, detail: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError { field: field.into(), detail: detail.into() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Signal {
    PostPut,
    PostErase,
}

impl Signal {
    pub fn name(self) -> &'static str {
        match self {
            Signal::PostPut => "post-put",
            Signal::PostErase => "post-erase",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdoModeChoice {
    Thread,
    Process,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DaxConfig {
    pub path: PathBuf,
    /// Mapping address hint; advisory only.
    pub addr: Option<u64>,
    pub size: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardConfig {
    pub core: Option<usize>,
    pub port: u16,
    pub backend: EngineKind,
    pub dax: DaxConfig,
    pub ado_plugins: Vec<String>,
    pub ado_cores: Option<String>,
    pub ado_params: BTreeMap<String, String>,
    pub ado_signals: BTreeSet<Signal>,
    pub ado_mode: Option<AdoModeChoice>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Config {
    pub shards: Vec<ShardConfig>,
    pub ado_path: Option<PathBuf>,
    pub net_providers: Option<String>,
    pub warnings: Vec<String>,
}

const TOP_KEYS: &[&str] = &["shards", "ado_path", "net_providers", "cluster", "debug_level"];
const SHARD_KEYS: &[&str] = &[
    "core",
    "port",
    "net",
    "default_backend",
    "dax_config",
    "ado_plugins",
    "ado_cores",
    "ado_params",
    "ado_signals",
    "ado_mode",
];
const DAX_KEYS: &[&str] = &["path", "addr", "size"];

fn warn_unknown(obj: &Map<String, Value>, known: &[&str], at: &str, warnings: &mut Vec<String>) {
    for k in obj.keys() {
        if !known.contains(&k.as_str()) {
            warnings.push(format!("unknown key {at}{k:?} ignored"));
        }
    }
}

fn parse_number(v: &Value, field: &str) -> Result<u64, ConfigError> {
    match v {
        Value::Number(n) => n.as_u64().map_or_else(|| err(field, "expected a non-negative integer"), Ok),
        Value::String(s) => {
            let s = s.trim();
            let parsed = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
                Some(h) => u64::from_str_radix(h, 16),
                None => s.parse(),
            };
            parsed.map_or_else(|_| err(field, format!("{s:?} is not a number")), Ok)
        }
        _ => err(field, "expected a number"),
    }
}

fn parse_strings(v: &Value, field: &str) -> Result<Vec<String>, ConfigError> {
    let Value::Array(a) = v else { return err(field, "expected an array of strings") };
    a.iter()
        .map(|s| s.as_str().map(str::to_string).map_or_else(|| err(field, "expected an array of strings"), Ok))
        .collect()
}

fn parse_dax(v: &Value, warnings: &mut Vec<String>, at: &str) -> Result<DaxConfig, ConfigError> {
    let Value::Array(list) = v else { return err("dax_config", "expected an array") };
    let first = match list.as_slice() {
        [] => return err("dax_config", "no entries"),
        [one] => one,
        [first, ..] => {
            warnings.push(format!("{at}: only the first dax_config entry is used"));
            first
        }
    };
    let Value::Object(o) = first else { return err("dax_config", "entries must be objects") };
    warn_unknown(o, DAX_KEYS, &format!("{at}.dax_config."), warnings);
    let path = match o.get("path") {
        Some(Value::String(p)) if !p.is_empty() => PathBuf::from(p),
        Some(_) => return err("path", "expected a non-empty string"),
        None => return err("path", "dax_config entry has no path"),
    };
    let addr = o.get("addr").map(|a| parse_number(a, "addr")).transpose()?;
    let size = o.get("size").map(|s| parse_number(s, "size")).transpose()?;
    Ok(DaxConfig { path, addr, size })
}

fn parse_shard(i: usize, v: &Value, warnings: &mut Vec<String>) -> Result<ShardConfig, ConfigError> {
    let at = format!("shards[{i}]");
    let Value::Object(o) = v else { return err("shards", format!("{at} is not an object")) };
    warn_unknown(o, SHARD_KEYS, &format!("{at}."), warnings);
    let port = match o.get("port") {
        Some(p) => parse_number(p, "port")?,
        None => return err("port", format!("{at} has no port")),
    };
    let port = u16::try_from(port).or_else(|_| err("port", format!("{port} is out of range")))?;
    let core = o.get("core").map(|c| parse_number(c, "core")).transpose()?.map(|c| c as usize);
    let backend = match o.get("default_backend") {
        None => EngineKind::HStore,
        Some(Value::String(b)) => b.parse().or_else(|_| err("default_backend", format!("unknown backend {b:?}")))?,
        Some(_) => return err("default_backend", "expected a string"),
    };
    let dax = match o.get("dax_config") {
        Some(d) => parse_dax(d, warnings, &at)?,
        None => return err("dax_config", format!("{at} has no dax_config")),
    };
    let ado_plugins = o.get("ado_plugins").map(|p| parse_strings(p, "ado_plugins")).transpose()?.unwrap_or_default();
    let ado_cores = match o.get("ado_cores") {
        None => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(Value::Number(n)) => Some(n.to_string()),
        Some(_) => return err("ado_cores", "expected a string or number"),
    };
    let ado_params = match o.get("ado_params") {
        None => BTreeMap::new(),
        Some(Value::Object(m)) => m
            .iter()
            .map(|(k, v)| match v {
                Value::String(s) => Ok((k.clone(), s.clone())),
                Value::Number(_) | Value::Bool(_) => Ok((k.clone(), v.to_string())),
                _ => err("ado_params", format!("value of {k:?} must be a string")),
            })
            .collect::<Result<_, _>>()?,
        Some(_) => return err("ado_params", "expected an object"),
    };
    let ado_signals = o
        .get("ado_signals")
        .map(|s| parse_strings(s, "ado_signals"))
        .transpose()?
        .unwrap_or_default()
        .into_iter()
        .map(|s| match s.as_str() {
            "post-put" => Ok(Signal::PostPut),
            "post-erase" => Ok(Signal::PostErase),
            _ => err("ado_signals", format!("unknown signal {s:?}")),
        })
        .collect::<Result<_, _>>()?;
    let ado_mode = match o.get("ado_mode").map(|m| m.as_str()) {
        None => None,
        Some(Some("thread")) => Some(AdoModeChoice::Thread),
        Some(Some("process")) => Some(AdoModeChoice::Process),
        Some(_) => return err("ado_mode", "expected \"thread\" or \"process\""),
    };
    Ok(ShardConfig { core, port, backend, dax, ado_plugins, ado_cores, ado_params, ado_signals, ado_mode })
}

pub fn load_config(text: &str) -> Result<Config, ConfigError> {
    let root: Value = serde_json::from_str(text).or_else(|e| err("json", e.to_string()))?;
    let Value::Object(o) = &root else { return err("json", "top level must be an object") };
    let mut warnings = Vec::new();
    warn_unknown(o, TOP_KEYS, "", &mut warnings);
    let shards = match o.get("shards") {
        Some(Value::Array(a)) if !a.is_empty() => {
            a.iter().enumerate().map(|(i, s)| parse_shard(i, s, &mut warnings)).collect::<Result<Vec<_>, _>>()?
        }
        Some(_) => return err("shards", "expected a non-empty array"),
        None => return err("shards", "missing"),
    };
    let mut ports = BTreeSet::new();
    let mut paths = BTreeSet::new();
    for s in &shards {
        // port 0 asks for an ephemeral port, so it may repeat
        if s.port != 0 && !ports.insert(s.port) {
            return err("port-conflict", format!("port {} is used by more than one shard", s.port));
        }
        if !paths.insert(s.dax.path.clone()) {
            return err("dax-conflict", format!("{} is used by more than one shard", s.dax.path.display()));
        }
    }
    let ado_path = match o.get("ado_path") {
        None => None,
        Some(Value::String(p)) => Some(PathBuf::from(p)),
        Some(_) => return err("ado_path", "expected a string"),
    };
    let net_providers = match o.get("net_providers") {
        None => None,
        Some(Value::String(p)) => Some(p.clone()),
        Some(_) => return err("net_providers", "expected a string"),
    };
    if net_providers.as_deref().is_some_and(|p| p != "sockets" && p != "tcp") {
        warnings.push(format!("net provider {:?} is not available; serving TCP", net_providers.as_deref().unwrap_or("")));
    }
    Ok(Config { shards, ado_path, net_providers, warnings })
}

impl Config {
    /// Point every shard at `device` (suffixed `.N` when there are several shards).
    pub fn override_device(&mut self, device: &std::path::Path) {
        let many = self.shards.len() > 1;
        for (i, s) in self.shards.iter_mut().enumerate() {
            s.dax.path = if many { PathBuf::from(format!("{}.{i}", device.display())) } else { device.to_path_buf() };
        }
    }
}
