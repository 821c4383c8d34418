mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::*;
use mcaslite_client::{ClientError, Completion, ADO_CREATE_ON_DEMAND, ADO_DETACHED, ADO_NO_OVERWRITE, CONFIG_ADD_INDEX};
use mcaslite_core::pmem::Pmem;
use mcaslite_core::protocol::Status;
use mcaslite_server::{AdoMode, ShardSpec, Signal};

fn status(e: ClientError) -> Status {
    e.status().unwrap_or_else(|| panic!("expected a shard status, got {e}"))
}

#[test]
fn passthru_echoes() {
    let h = start(with_plugins(spec(), &["libcomponent-adoplugin-passthru.so"]));
    let (mut s, p) = session_with_pool(&h, "p");
    s.put(p, b"k", b"root").unwrap();
    for n in [1usize, 4096, 1 << 20] {
        let payload: Vec<u8> = (0..n).map(|i| (i % 241) as u8).collect();
        assert_eq!(s.invoke_ado(p, b"k", &payload, 0, 0).unwrap(), vec![payload]);
        assert_locks_clean(&mut s);
    }
}

#[test]
fn absent_keys_need_a_create_flag_or_a_size() {
    let h = start(with_plugins(spec(), &["scripted"]));
    let (mut s, p) = session_with_pool(&h, "p");
    assert_eq!(status(s.invoke_ado(p, b"none", b"root", 0, 0).unwrap_err()), Status::KeyNotFound);
    assert_eq!(text(&s.invoke_ado(p, b"sized", b"root", 0, 64).unwrap()), ["new_root=true len=64"]);
    assert_eq!(text(&s.invoke_ado(p, b"sized", b"root", 0, 64).unwrap()), ["new_root=false len=64"]);
    assert_eq!(s.get(p, b"sized").unwrap(), [0u8; 64]);
    assert_eq!(text(&s.invoke_ado(p, b"flag", b"root", ADO_CREATE_ON_DEMAND, 0).unwrap()), ["new_root=true len=0"]);
}

#[test]
fn plugins_alternate() {
    let h = start(with_plugins(spec(), &["passthru", "reverse"]));
    let (mut s, p) = session_with_pool(&h, "p");
    s.put(p, b"k", b"v").unwrap();
    for i in 0..100 {
        let out = s.invoke_ado(p, b"k", b"abc", 0, 0).unwrap();
        let expect: &[u8] = if i % 2 == 0 { b"abc" } else { b"cba" };
        assert_eq!(out, vec![expect.to_vec()], "invoke {i}");
        assert_locks_clean(&mut s);
    }
}

#[test]
fn invoke_put_places_the_value_first() {
    let h = start(with_plugins(spec(), &["scripted"]));
    let (mut s, p) = session_with_pool(&h, "p");
    assert_eq!(text(&s.invoke_put_ado(p, b"k", b"read-root\nroot", b"hello", 0, 0).unwrap()), ["hello", "new_root=true len=5"]);
    assert_eq!(text(&s.invoke_put_ado(p, b"k", b"read-root", b"bye", 0, 0).unwrap()), ["bye"]);
    assert_eq!(text(&s.invoke_put_ado(p, b"k", b"read-root", b"zzz", 0, ADO_NO_OVERWRITE).unwrap()), ["bye"]);
    // a larger root than the value leaves zero padding after it
    let out = s.invoke_put_ado(p, b"r", b"root", b"ab", 16, 0).unwrap();
    assert_eq!(text(&out), ["new_root=true len=16"]);
    assert_eq!(s.get(p, b"r").unwrap(), [b"ab".as_slice(), &[0u8; 14]].concat());
}

#[test]
fn detached_values_do_not_touch_the_root() {
    let h = start(with_plugins(spec(), &["scripted"]));
    let (mut s, p) = session_with_pool(&h, "p");
    let out = s.invoke_put_ado(p, b"k", b"root\ndetached", b"payload", 128, ADO_DETACHED).unwrap();
    assert_eq!(text(&out), ["new_root=true len=128", "payload"]);
    assert_eq!(s.get(p, b"k").unwrap(), [0u8; 128]);
    let out = s.invoke_put_ado(p, b"k", b"root\ndetached", b"second", 128, ADO_DETACHED).unwrap();
    assert_eq!(text(&out), ["new_root=false len=128", "second"]);
    assert_eq!(text(&s.invoke_ado(p, b"k", b"detached", 0, 0).unwrap()), ["none"]);
}

#[test]
fn keys_opened_by_a_plugin_are_unlocked_with_the_work() {
    let h = start(with_plugins(spec(), &["scripted"]));
    let (mut s, p) = session_with_pool(&h, "p");
    s.put(p, b"root", b"r").unwrap();
    let out = s.invoke_ado(p, b"root", b"create k2 16\nput k3 three\nopen k3", 0, 0).unwrap();
    assert!(text(&out)[0].starts_with("created "), "{out:?}");
    assert_locks_clean(&mut s);
    s.put(p, b"k2", b"mine now").unwrap();
    assert_eq!(s.get(p, b"k3").unwrap(), b"three");

    let out = s.invoke_ado(p, b"root", b"erase k2\nerase k2\nunlock root\nunlock root", 0, 0).unwrap();
    assert_eq!(text(&out), ["ok", "ERR E_KEY_NOT_FOUND", "ok", "ERR E_INVALID"]);
    assert_locks_clean(&mut s);
}

#[test]
fn callbacks_see_the_pool() {
    let h = start(with_plugins(spec(), &["scripted"]));
    let (mut s, p) = session_with_pool(&h, "p");
    s.configure_pool(p, CONFIG_ADD_INDEX).unwrap();
    for k in ["a1", "a2", "b1", "b2", "b3"] {
        s.put(p, k.as_bytes(), b"x").unwrap();
    }
    let out = text(&s.invoke_ado(p, b"a1", b"iterate\nrefs\nfind prefix b\ninfo", 0, 0).unwrap());
    assert_eq!(out[0], "a1,a2,b1,b2,b3");
    assert_eq!(out[1], "5");
    assert_eq!(out[2], "b1,b2,b3");
    let info: Vec<u64> = out[3].split(' ').map(|n| n.parse().unwrap()).collect();
    assert_eq!(info[0], POOL);
    assert!(info[1] < POOL && info[1] > 0);
    assert_eq!(info[2], 5);
    // keys a plugin creates are indexed like client puts
    s.invoke_ado(p, b"a1", b"create b9 4", 0, 0).unwrap();
    assert_eq!(s.find_all(p, b"b", mcaslite_core::index::MatchKind::Prefix).unwrap().len(), 4);
}

#[test]
fn resize_keeps_the_prefix() {
    let h = start(with_plugins(spec(), &["scripted"]));
    let (mut s, p) = session_with_pool(&h, "p");
    s.put(p, b"k", b"prefix!").unwrap();
    s.invoke_ado(p, b"k", b"resize k 4096", 0, 0).unwrap();
    let v = s.get(p, b"k").unwrap();
    assert_eq!(v.len(), 4096);
    assert_eq!(&v[..7], b"prefix!");
}

#[test]
fn plugin_memory_is_fenced_to_its_pool() {
    let h = start(with_plugins(spec(), &["scripted"]));
    let (mut a, pa) = session_with_pool(&h, "a");
    let (mut b, pb) = session_with_pool(&h, "b");
    b.put(pb, b"k", b"bbbb").unwrap();
    let b_off: u64 = text(&b.invoke_ado(pb, b"k", b"open k", 0, 0).unwrap())[0].split(' ').next().unwrap().parse().unwrap();
    a.put(pa, b"k", b"aaaa").unwrap();
    let out = text(&a.invoke_ado(pa, b"k", format!("peek {b_off} 4").as_bytes(), 0, 0).unwrap());
    assert_eq!(out, ["ERR E_MAP_FAIL"]);
}

#[test]
fn panicking_plugin_faults_and_frees_the_key() {
    let h = start(with_plugins(spec(), &["fault", "passthru"]));
    let (mut s, p) = session_with_pool(&h, "p");
    s.put(p, b"k", b"v").unwrap();
    assert_eq!(status(s.invoke_ado(p, b"k", b"x", 0, 0).unwrap_err()), Status::AdoFault);
    assert_locks_clean(&mut s);
    s.put(p, b"k", b"w").unwrap();
    assert_eq!(s.invoke_ado(p, b"k", b"x", 0, 0).unwrap(), vec![b"x".to_vec()]);
    assert_eq!(stats(&mut s)["ado_faults"], 1);
}

#[test]
fn no_plugins_means_no_ado() {
    let h = start(spec());
    let (mut s, p) = session_with_pool(&h, "p");
    s.put(p, b"k", b"v").unwrap();
    assert_eq!(status(s.invoke_ado(p, b"k", b"x", 0, 0).unwrap_err()), Status::AdoFault);
}

#[test]
fn invoke_locks_the_key_and_others_keep_going() {
    let h = start(param(with_plugins(spec(), &["sleep"]), "sleep_ms", "300"));
    let (mut a, p) = session_with_pool(&h, "p");
    a.put(p, b"busy", b"v").unwrap();
    let mut b = connect(&h);
    let pb = b.open_pool("p").unwrap();

    let t0 = Instant::now();
    let inv = a.async_invoke_ado(p, b"busy", b"zz", 0, 0).unwrap();
    std::thread::sleep(Duration::from_millis(50));
    assert_eq!(status(b.put(pb, b"busy", b"x").unwrap_err()), Status::Locked);
    assert_eq!(status(b.get(pb, b"busy").unwrap_err()), Status::Locked);
    assert_eq!(status(b.erase(pb, b"busy").unwrap_err()), Status::Locked);
    // everything else is served while the plugin works
    for i in 0..50u8 {
        b.put(pb, &[i], b"free").unwrap();
    }
    assert_eq!(stats(&mut b)["locks_held"], 1);
    assert!(t0.elapsed() < Duration::from_millis(250), "other session stalled: {:?}", t0.elapsed());
    assert_eq!(a.wait_for_completion(inv).unwrap(), Completion::Ado(vec![b"zz".to_vec()]));
    assert!(t0.elapsed() >= Duration::from_millis(300));
    assert_locks_clean(&mut b);
    b.put(pb, b"busy", b"x").unwrap();
}

#[test]
fn invokes_on_one_pool_queue_behind_each_other() {
    let h = start(param(with_plugins(spec(), &["sleep"]), "sleep_ms", "60"));
    let (mut a, p) = session_with_pool(&h, "p");
    let mut b = connect(&h);
    let pb = b.open_pool("p").unwrap();
    let t0 = Instant::now();
    let x = a.async_invoke_ado(p, b"x", b"1", ADO_CREATE_ON_DEMAND, 0).unwrap();
    let y = b.async_invoke_ado(pb, b"y", b"2", ADO_CREATE_ON_DEMAND, 0).unwrap();
    assert_eq!(b.wait_for_completion(y).unwrap(), Completion::Ado(vec![b"2".to_vec()]));
    assert_eq!(a.wait_for_completion(x).unwrap(), Completion::Ado(vec![b"1".to_vec()]));
    assert!(t0.elapsed() >= Duration::from_millis(120));
    // with work queued the pool cannot go away
    let z = a.async_invoke_ado(p, b"x", b"3", 0, 0).unwrap();
    let mut c = connect(&h);
    assert_eq!(status(c.delete_pool("p").unwrap_err()), Status::Busy);
    a.wait_for_completion(z).unwrap();
}

#[test]
fn signals_stall_the_client_until_the_plugin_is_done() {
    let sp = signals(param(with_plugins(spec(), &["sleep"]), "sleep_ms", "50"), &[Signal::PostPut]);
    let h = start(sp);
    let (mut s, p) = session_with_pool(&h, "p");
    let t0 = Instant::now();
    s.put(p, b"k", b"v").unwrap();
    let took = t0.elapsed();
    assert!(took >= Duration::from_millis(50), "put returned after {took:?}");
    assert!(took < Duration::from_millis(60) + Duration::from_millis(200), "put took {took:?}");
    // erase is not configured
    let t0 = Instant::now();
    s.erase(p, b"k").unwrap();
    assert!(t0.elapsed() < Duration::from_millis(50));
    let st = stats(&mut s);
    assert_eq!(st["signals"], 1);
    assert_locks_clean(&mut s);
}

#[test]
fn without_signals_puts_never_reach_the_ado() {
    let h = start(param(with_plugins(spec(), &["sleep"]), "sleep_ms", "50"));
    let (mut s, p) = session_with_pool(&h, "p");
    for i in 0..20u8 {
        s.put(p, &[i], b"v").unwrap();
        s.erase(p, &[i]).unwrap();
    }
    let st = stats(&mut s);
    assert_eq!(st.get("signals").copied().unwrap_or(0), 0);
    assert_eq!(st.get("ado_launches").copied().unwrap_or(0), 0);
}

#[test]
fn signal_requests_carry_the_prefix() {
    let sp = signals(param(with_plugins(spec(), &["scripted"]), "signal_log", "log"), &[Signal::PostPut, Signal::PostErase]);
    let h = start(sp);
    let (mut s, p) = session_with_pool(&h, "p");
    s.put(p, b"a", b"1").unwrap();
    s.put(p, b"b", b"2").unwrap();
    s.erase(p, b"a").unwrap();
    let log = String::from_utf8(s.get(p, b"log").unwrap()).unwrap();
    assert_eq!(log, "ADO::Signal::post-put a\nADO::Signal::post-put b\nADO::Signal::post-erase a\n");
    assert_locks_clean(&mut s);
}

#[test]
fn signal_faults_keep_the_original_status() {
    let sp = signals(with_plugins(spec(), &["fault"]), &[Signal::PostPut]);
    let h = start(sp);
    let (mut s, p) = session_with_pool(&h, "p");
    s.put(p, b"k", b"v").unwrap();
    assert_eq!(s.get(p, b"k").unwrap(), b"v");
    assert_eq!(stats(&mut s)["ado_faults"], 1);
    assert_locks_clean(&mut s);
}

#[test]
fn signal_holds_a_read_lock() {
    let sp = signals(param(with_plugins(spec(), &["sleep"]), "sleep_ms", "300"), &[Signal::PostPut]);
    let h = start(sp);
    let (mut a, p) = session_with_pool(&h, "p");
    let mut b = connect(&h);
    let pb = b.open_pool("p").unwrap();
    let put = a.async_put(p, b"k", b"v").unwrap();
    std::thread::sleep(Duration::from_millis(60));
    assert_eq!(b.get(pb, b"k").unwrap(), b"v", "readers pass a read lock");
    assert_eq!(status(b.put(pb, b"k", b"w").unwrap_err()), Status::Locked);
    a.wait_for_completion(put).unwrap();
    b.put(pb, b"k", b"w").unwrap();
}

fn ado_exe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_mcas-ado"))
}

fn process_spec(dir: &tempfile::TempDir, plugins: &[&str]) -> ShardSpec {
    let (pmem, _) = Pmem::map_file(&dir.path().join("arena"), ARENA).unwrap();
    let mut s = with_plugins(ShardSpec::local(pmem), plugins);
    s.ado = AdoMode::Process { exe: ado_exe(), dir: dir.path().to_path_buf() };
    s
}

#[test]
fn process_ado_shares_pool_memory() {
    let dir = tempfile::tempdir().unwrap();
    let h = start(process_spec(&dir, &["scripted"]));
    let (mut s, p) = session_with_pool(&h, "p");
    s.put(p, b"k", b"..........").unwrap();
    assert_eq!(text(&s.invoke_ado(p, b"k", b"write-root from-ado\nread-root", 0, 0).unwrap()), ["ok", "from-ado.."]);
    assert_eq!(s.get(p, b"k").unwrap(), b"from-ado..");
    let pool_id = p.0;
    assert!(dir.path().join(format!("mcaslite.0.{pool_id}.uipc")).exists());
    let out = s.invoke_put_ado(p, b"d", b"detached", b"over the wire", 8, ADO_DETACHED).unwrap();
    assert_eq!(text(&out), ["over the wire"]);
    assert_locks_clean(&mut s);
}

#[test]
fn dead_ado_process_fails_the_work_and_comes_back() {
    let dir = tempfile::tempdir().unwrap();
    let sp = param(process_spec(&dir, &["fault", "passthru"]), "fault_mode", "abort");
    let h = start(sp);
    let (mut s, p) = session_with_pool(&h, "p");
    s.put(p, b"k", b"v").unwrap();
    assert_eq!(status(s.invoke_ado(p, b"k", b"x", 0, 0).unwrap_err()), Status::AdoFault);
    assert_locks_clean(&mut s);
    s.put(p, b"k", b"still writable").unwrap();
    // the relaunched process starts its round robin over, at `fault` again
    assert_eq!(status(s.invoke_ado(p, b"k", b"x", 0, 0).unwrap_err()), Status::AdoFault);
    let st = stats(&mut s);
    assert_eq!(st["ado_launches"], 2);
    assert_eq!(st["ado_faults"], 2);
}

#[test]
fn process_ado_round_robin() {
    let dir = tempfile::tempdir().unwrap();
    let h = start(process_spec(&dir, &["passthru", "reverse"]));
    let (mut s, p) = session_with_pool(&h, "p");
    s.put(p, b"k", b"v").unwrap();
    for i in 0..20 {
        let expect: &[u8] = if i % 2 == 0 { b"ab" } else { b"ba" };
        assert_eq!(s.invoke_ado(p, b"k", b"ab", 0, 0).unwrap(), vec![expect.to_vec()]);
    }
}

#[test]
fn closing_the_pool_stops_its_ado() {
    let dir = tempfile::tempdir().unwrap();
    let h = start(process_spec(&dir, &["passthru"]));
    let (mut s, p) = session_with_pool(&h, "p");
    s.put(p, b"k", b"v").unwrap();
    s.invoke_ado(p, b"k", b"x", 0, 0).unwrap();
    let q = dir.path().join(format!("mcaslite.0.{}.uipc", p.0));
    assert!(q.exists());
    s.close_pool(p).unwrap();
    s.get_statistics().unwrap();
    assert!(!q.exists(), "queue segment left behind");
    let p = s.open_pool("p").unwrap();
    assert_eq!(s.invoke_ado(p, b"k", b"y", 0, 0).unwrap(), vec![b"y".to_vec()]);
    assert_eq!(stats(&mut s)["ado_launches"], 2);
}

mod fuzz {
    use super::*;
    use proptest::prelude::*;

    fn command() -> impl Strategy<Value = String> {
        let key = prop::sample::select(vec!["a", "b", "c", "root"]);
        let n = prop_oneof![Just(0u64), 1u64..5000, Just(u64::MAX / 2)];
        prop_oneof![
            (key.clone(), n.clone()).prop_map(|(k, n)| format!("create {k} {n}")),
            key.clone().prop_map(|k| format!("open {k}")),
            key.clone().prop_map(|k| format!("erase {k}")),
            (key.clone(), n.clone()).prop_map(|(k, n)| format!("resize {k} {n}")),
            (key.clone(), "[a-z]{0,20}").prop_map(|(k, d)| format!("put {k} {d}")),
            n.clone().prop_map(|n| format!("alloc {n}")),
            (any::<u64>(), n.clone()).prop_map(|(o, n)| format!("free {o} {n}")),
            (any::<u64>(), 0u64..64).prop_map(|(o, n)| format!("peek {o} {n}")),
            key.clone().prop_map(|k| format!("unlock {k}")),
            Just("iterate".to_string()),
            Just("refs".to_string()),
            Just("info".to_string()),
            Just("find regex [".to_string()),
            Just("bogus".to_string()),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

        #[test]
        fn random_callbacks_leave_the_shard_sound(scripts in prop::collection::vec(prop::collection::vec(command(), 1..12), 1..6)) {
            let h = start(with_plugins(spec(), &["scripted"]));
            let (mut s, p) = session_with_pool(&h, "p");
            s.put(p, b"root", b"r").unwrap();
            for script in scripts {
                let out = s.invoke_ado(p, b"root", script.join("\n").as_bytes(), ADO_CREATE_ON_DEMAND, 0);
                prop_assert!(out.is_ok(), "{out:?}");
                assert_locks_clean(&mut s);
                for k in ["a", "b", "c"] {
                    match s.get(p, k.as_bytes()) {
                        Ok(_) => {}
                        Err(e) => prop_assert!(e.status() == Some(Status::KeyNotFound) || e.status() == Some(Status::TooLarge), "{e}"),
                    }
                }
            }
            s.put(p, b"root", b"still here").unwrap();
        }
    }
}
