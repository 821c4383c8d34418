//! Built-in plugins used as test fixtures and examples.
//!
//! * `passthru`: echoes the request; does no compute.
//! * `reverse`: echoes the request reversed (tells two plugins apart).
//! * `sleep`: sleeps `sleep_ms` (default 50) then echoes.
//! * `fault`: panics, or aborts the process with `fault_mode=abort`.
//! * `scripted`: runs one callback per request line, for exercising the
//!   callback API end to end. With `signal_log=<key>` it appends every
//!   signal it receives to that key, one line each.

use std::time::Duration;

use mcaslite_core::index::MatchKind;

use crate::plugin::{AdoPlugin, Context, Params, PluginRegistry, Work};
use crate::AdoError;

/// Request prefix of relayed put/erase notifications.
pub const SIGNAL_PREFIX: &[u8] = b"ADO::Signal";

pub fn register_builtins(r: &mut PluginRegistry) {
    r.register("passthru", |_| Ok(Box::new(Passthru)));
    r.register("reverse", |_| Ok(Box::new(Reverse)));
    r.register("sleep", |p| {
        let ms = p.get("sleep_ms").map(|v| v.parse::<u64>()).transpose().map_err(|e| format!("sleep_ms: {e}"))?;
        Ok(Box::new(Sleep { ms: ms.unwrap_or(50) }))
    });
    r.register("fault", |p| Ok(Box::new(Fault { abort: p.get("fault_mode").map(String::as_str) == Some("abort") })));
    r.register("scripted", |p| Ok(Box::new(Scripted { log: p.get("signal_log").cloned() })));
}

struct Passthru;

impl AdoPlugin for Passthru {
    fn do_work(&mut self, _: &mut Context<'_>, w: &Work) -> Result<Vec<Vec<u8>>, String> {
        Ok(vec![w.request.clone()])
    }
}

struct Reverse;

impl AdoPlugin for Reverse {
    fn do_work(&mut self, _: &mut Context<'_>, w: &Work) -> Result<Vec<Vec<u8>>, String> {
        Ok(vec![w.request.iter().rev().copied().collect()])
    }
}

struct Sleep {
    ms: u64,
}

impl AdoPlugin for Sleep {
    fn do_work(&mut self, _: &mut Context<'_>, w: &Work) -> Result<Vec<Vec<u8>>, String> {
        std::thread::sleep(Duration::from_millis(self.ms));
        Ok(vec![w.request.clone()])
    }
}

struct Fault {
    abort: bool,
}

impl AdoPlugin for Fault {
    fn do_work(&mut self, _: &mut Context<'_>, _: &Work) -> Result<Vec<Vec<u8>>, String> {
        if self.abort {
            std::process::abort();
        }
        panic!("fault plugin invoked");
    }
}

struct Scripted {
    log: Option<String>,
}

fn num(s: Option<&str>) -> Result<u64, String> {
    s.ok_or("missing number")?.parse().map_err(|e| format!("{e}"))
}

fn word<'a>(s: Option<&'a str>) -> Result<&'a str, String> {
    s.ok_or_else(|| "missing argument".to_string())
}

fn text(e: AdoError) -> String {
    match e {
        AdoError::Status(s, _) => format!("ERR {s}"),
        AdoError::MapFail { .. } => "ERR E_MAP_FAIL".into(),
        e => format!("ERR {e}"),
    }
}

impl Scripted {
    fn append(ctx: &mut Context<'_>, key: &[u8], data: &[u8]) -> Result<(), AdoError> {
        let (v, _) = ctx.create_key(key, 0)?;
        let v = ctx.resize_value(key, v.len + data.len() as u64)?;
        ctx.write_persist(v.offset + v.len - data.len() as u64, data)
    }

    fn line(ctx: &mut Context<'_>, w: &Work, line: &str) -> Result<String, AdoError> {
        let mut it = line.split_whitespace();
        let cmd = it.next().unwrap_or("");
        let bad = |m: String| AdoError::Malformed(m);
        Ok(match cmd {
            "root" => format!("new_root={} len={}", w.new_root, w.values.first().map_or(0, |v| v.len)),
            "read-root" => {
                let v = w.values.first().ok_or_else(|| bad("no root".into()))?;
                String::from_utf8_lossy(&ctx.read_value(*v)?).into_owned()
            }
            "write-root" => {
                let v = *w.values.first().ok_or_else(|| bad("no root".into()))?;
                let data = line.splitn(2, ' ').nth(1).unwrap_or("").as_bytes();
                if data.len() as u64 > v.len {
                    return Err(bad("data longer than root".into()));
                }
                ctx.write_persist(v.offset, data)?;
                "ok".into()
            }
            "detached" => match w.detached {
                Some(d) => String::from_utf8_lossy(&ctx.read_value(d)?).into_owned(),
                None => "none".into(),
            },
            "create" => {
                let key = word(it.next()).map_err(bad)?;
                let len = num(it.next()).map_err(bad)?;
                let (v, created) = ctx.create_key(key.as_bytes(), len)?;
                format!("{} {} {}", if created { "created" } else { "opened" }, v.offset, v.len)
            }
            "open" => {
                let v = ctx.open_key(word(it.next()).map_err(bad)?.as_bytes())?;
                format!("{} {}", v.offset, v.len)
            }
            "put" => {
                // open-or-create then overwrite from the start
                let key = word(it.next()).map_err(bad)?;
                let data = it.collect::<Vec<_>>().join(" ");
                let (v, _) = ctx.create_key(key.as_bytes(), data.len() as u64)?;
                let v = if v.len != data.len() as u64 { ctx.resize_value(key.as_bytes(), data.len() as u64)? } else { v };
                ctx.write_persist(v.offset, data.as_bytes())?;
                "ok".into()
            }
            "erase" => {
                ctx.erase_key(word(it.next()).map_err(bad)?.as_bytes())?;
                "ok".into()
            }
            "resize" => {
                let key = word(it.next()).map_err(bad)?;
                let v = ctx.resize_value(key.as_bytes(), num(it.next()).map_err(bad)?)?;
                format!("{} {}", v.offset, v.len)
            }
            "alloc" => ctx.allocate_memory(num(it.next()).map_err(bad)?)?.to_string(),
            "free" => {
                let o = num(it.next()).map_err(bad)?;
                ctx.free_memory(o, num(it.next()).map_err(bad)?)?;
                "ok".into()
            }
            "info" => {
                let (s, f, c) = ctx.get_pool_info()?;
                format!("{s} {f} {c}")
            }
            "refs" => ctx.get_ref_vector(0, 0)?.len().to_string(),
            "iterate" => {
                let mut pos = 0;
                let mut keys = Vec::new();
                loop {
                    let (page, next) = ctx.iterate(pos, 2)?;
                    keys.extend(page.into_iter().map(|e| String::from_utf8_lossy(&e.key).into_owned()));
                    match next {
                        Some(n) => pos = n,
                        None => break,
                    }
                }
                keys.join(",")
            }
            "find" => {
                let kind = match word(it.next()).map_err(bad)? {
                    "exact" => MatchKind::Exact,
                    "prefix" => MatchKind::Prefix,
                    _ => MatchKind::Regex,
                };
                let expr = it.next().unwrap_or("");
                let mut pos = 0;
                let mut keys = Vec::new();
                loop {
                    match ctx.find_key(expr.as_bytes(), kind, pos) {
                        Ok((k, next)) => {
                            keys.push(String::from_utf8_lossy(&k).into_owned());
                            pos = next;
                        }
                        Err(AdoError::Status(mcaslite_core::protocol::Status::NoMatch, _)) => break,
                        Err(e) => return Err(e),
                    }
                }
                keys.join(",")
            }
            "unlock" => {
                ctx.unlock(word(it.next()).map_err(bad)?.as_bytes())?;
                "ok".into()
            }
            "peek" => {
                let o = num(it.next()).map_err(bad)?;
                let n = num(it.next()).map_err(bad)?;
                format!("{:?}", ctx.read(o, n)?)
            }
            "" => String::new(),
            other => return Err(bad(format!("unknown command {other:?}"))),
        })
    }
}

impl AdoPlugin for Scripted {
    fn do_work(&mut self, ctx: &mut Context<'_>, w: &Work) -> Result<Vec<Vec<u8>>, String> {
        if w.signal {
            if let Some(log) = &self.log {
                let mut line = w.request.clone();
                line.push(b' ');
                line.extend_from_slice(&w.key);
                line.push(b'\n');
                Self::append(ctx, log.as_bytes(), &line).map_err(|e| e.to_string())?;
            }
            return Ok(vec![w.request.clone()]);
        }
        let script = String::from_utf8(w.request.clone()).map_err(|_| "script is not UTF-8".to_string())?;
        Ok(script
            .lines()
            .map(|l| Self::line(ctx, w, l).unwrap_or_else(text).into_bytes())
            .collect())
    }
}

pub fn params_from<I: IntoIterator<Item = (String, String)>>(it: I) -> Params {
    it.into_iter().collect()
}
