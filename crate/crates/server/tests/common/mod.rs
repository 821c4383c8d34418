#![allow(dead_code)]

use std::collections::BTreeMap;

use mcaslite_client::{Pool, Session};
use mcaslite_core::pmem::Pmem;
use mcaslite_server::{start_shard, ShardHandle, ShardSpec, Signal};

pub const ARENA: u64 = 256 << 20;
pub const POOL: u64 = 32 << 20;

pub fn spec() -> ShardSpec {
    ShardSpec::local(Pmem::crash_sim(ARENA))
}

pub fn with_plugins(mut s: ShardSpec, plugins: &[&str]) -> ShardSpec {
    s.plugins = plugins.iter().map(|p| p.to_string()).collect();
    s
}

pub fn param(mut s: ShardSpec, k: &str, v: &str) -> ShardSpec {
    s.params.insert(k.into(), v.into());
    s
}

pub fn signals(mut s: ShardSpec, sig: &[Signal]) -> ShardSpec {
    s.signals = sig.iter().copied().collect();
    s
}

pub fn start(s: ShardSpec) -> ShardHandle {
    start_shard(s).expect("shard starts")
}

pub fn connect(h: &ShardHandle) -> Session {
    Session::connect(h.addr()).expect("connect")
}

pub fn session_with_pool(h: &ShardHandle, name: &str) -> (Session, Pool) {
    let mut s = connect(h);
    let p = s.create_pool(name, POOL).expect("create pool");
    (s, p)
}

pub fn stats(s: &mut Session) -> BTreeMap<String, u64> {
    s.get_statistics().expect("stats")
}

/// No lock is held and the lock table is self-consistent.
pub fn assert_locks_clean(s: &mut Session) {
    let st = stats(s);
    assert_eq!(st["lock_audit_ok"], 1, "lock audit");
    assert_eq!(st["locks_held"], 0, "locks held");
}

pub fn text(v: &[Vec<u8>]) -> Vec<String> {
    v.iter().map(|b| String::from_utf8_lossy(b).into_owned()).collect()
}
