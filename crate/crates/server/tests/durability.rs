//! Kill the shard right after an acknowledgement and recover from what had
//! reached persistence at that instant.

mod common;

use std::collections::BTreeMap;

use common::*;
use mcaslite_core::arena::PersistentArena;
use mcaslite_core::engine::pool;
use mcaslite_core::engine::EngineOptions;
use mcaslite_core::pmem::{Image, Pmem};
use mcaslite_server::ShardSpec;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Model = BTreeMap<Vec<u8>, Vec<u8>>;

fn recovered(img: Image) -> Model {
    let mut arena = PersistentArena::from_image(img).expect("arena recovers");
    let headers = pool::scan_pools(&mut arena).unwrap();
    assert_eq!(headers.len(), 1);
    let (_, engine) = pool::open_pool(&arena, headers[0].id, &EngineOptions::default()).unwrap();
    engine.audit().unwrap();
    engine.iterate().unwrap().into_iter().map(|(k, _, _)| (k.clone(), engine.get(&k).unwrap())).collect()
}

#[test]
fn acknowledged_mutations_survive_a_kill() {
    let mut rng = StdRng::seed_from_u64(7);
    let s = spec();
    let pmem: Pmem = s.pmem.clone();
    let h = start(s);
    let (mut c, p) = session_with_pool(&h, "p");
    let mut model = Model::new();
    let mut kills = 0;
    for step in 0..1500u32 {
        let key = format!("k{}", rng.random_range(0..64u32)).into_bytes();
        if rng.random_bool(0.25) && model.contains_key(&key) {
            c.erase(p, &key).unwrap();
            model.remove(&key);
        } else {
            let len = rng.random_range(1..3000usize);
            let v: Vec<u8> = (0..len).map(|i| (i as u32 ^ step) as u8).collect();
            c.put(p, &key, &v).unwrap();
            model.insert(key, v);
        }
        if rng.random_bool(0.1) {
            let img = pmem.crash_now(&mut rng).expect("crash-sim memory");
            assert_eq!(recovered(img), model, "after step {step}");
            kills += 1;
        }
    }
    assert!(kills >= 100, "{kills} kill points");
}

#[test]
fn restarted_shard_serves_what_was_acknowledged() {
    let mut rng = StdRng::seed_from_u64(11);
    let s = spec();
    let pmem = s.pmem.clone();
    let h = start(s);
    let (mut c, p) = session_with_pool(&h, "p");
    for i in 0..200u32 {
        c.put(p, &i.to_le_bytes(), &i.to_be_bytes()).unwrap();
    }
    let img = pmem.crash_now(&mut rng).unwrap();
    h.kill();

    let h = start(ShardSpec::local(Pmem::from_image(img)));
    let mut c = connect(&h);
    let p = c.open_pool("p").unwrap();
    for i in 0..200u32 {
        assert_eq!(c.get(p, &i.to_le_bytes()).unwrap(), i.to_be_bytes());
    }
}
