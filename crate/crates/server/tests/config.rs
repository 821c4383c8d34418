use std::collections::BTreeSet;

use mcaslite_client::Session;
use mcaslite_core::engine::EngineKind;
use mcaslite_server::config::{AdoModeChoice, DEFAULT_ARENA_SIZE};
use mcaslite_server::{load_config, Signal};

const LISTING_ONE: &str = r#"{
  "shards" :
  [
    {
      "core" : 0,
      "port" : 11911,
      "net"  : "mlx5_0",
      "default_backend" : "hstore",
      "dax_config" : [{
          "path": "/dev/dax0.0",
          "addr": "0x9000000000" }]
    },
    {
      "core" : 1,
      "port" : 11912,
      "net"  : "mlx5_0",
      "default_backend" : "hstore",
      "dax_config" : [{
          "path": "/dev/dax0.1",
          "addr": "0xA000000000" }]
    }
  ],
  "net_providers" : "verbs"
}"#;

const LISTING_TWO: &str = r#"{
  "shards" :
  [
    {
      "core" : 0,
      "port" : 11911,
      "net"  : "mlx5_0",
      "default_backend" : "hstore",
      "dax_config" : [{
          "path": "/dev/dax0.0",
          "addr": "0x9000000000" }],
      "ado_plugins" : [
        "libcomponent-adoplugin-rustexample.so",
        "libcomponent-adoplugin-passthru.so"
      ],
      "ado_cores" : "2",
      "ado_params" :  {
        "param1" : "some param",
        "param2" : "and another"
      }
    }
  ],
  "ado_path" : "/mcas/build/dist/bin/ado",
  "net_providers" : "verbs"
}"#;

const LISTING_THREE: &str = r#"{
    "cluster" :
    {
        "name" : "server-0",
        "group" : "MCAS-cluster-0",
        "addr" : "10.0.0.101",
        "port" : 11999
    },
    "shards" :
    [
        { "port": 11911, "dax_config": [{ "path": "/dev/dax0.0" }],
          "ado_plugins": ["passthru"], "ado_signals": ["post-put", "post-erase"] }
    ]
}"#;

#[test]
fn two_shard_listing() {
    let c = load_config(LISTING_ONE).unwrap();
    assert_eq!(c.shards.len(), 2);
    assert_eq!(c.shards.iter().map(|s| s.port).collect::<Vec<_>>(), [11911, 11912]);
    assert!(c.shards.iter().all(|s| s.backend == EngineKind::HStore));
    assert_eq!(c.shards[0].core, Some(0));
    assert_eq!(c.shards[1].core, Some(1));
    assert_eq!(c.shards[0].dax.addr, Some(0x90_0000_0000));
    assert_eq!(c.shards[1].dax.addr, Some(0xA0_0000_0000));
    assert_eq!(c.shards[1].dax.path.to_str(), Some("/dev/dax0.1"));
    assert_eq!(c.net_providers.as_deref(), Some("verbs"));
    // verbs is not available here, and that is said out loud
    assert_eq!(c.warnings.len(), 1, "{:?}", c.warnings);
    assert!(c.warnings[0].contains("verbs"));
}

#[test]
fn ado_listing() {
    let c = load_config(LISTING_TWO).unwrap();
    let s = &c.shards[0];
    assert_eq!(s.ado_plugins, ["libcomponent-adoplugin-rustexample.so", "libcomponent-adoplugin-passthru.so"]);
    assert_eq!(s.ado_cores.as_deref(), Some("2"));
    assert_eq!(s.ado_params["param1"], "some param");
    assert_eq!(s.ado_params["param2"], "and another");
    assert_eq!(c.ado_path.as_deref().and_then(|p| p.to_str()), Some("/mcas/build/dist/bin/ado"));
    assert!(s.ado_signals.is_empty());
}

#[test]
fn cluster_listing_and_signals() {
    let c = load_config(LISTING_THREE).unwrap();
    assert!(c.warnings.is_empty(), "{:?}", c.warnings);
    assert_eq!(c.shards[0].ado_signals, BTreeSet::from([Signal::PostPut, Signal::PostErase]));
    assert_eq!(c.shards[0].backend, EngineKind::HStore, "backend defaults to hstore");
}

fn field_of(text: &str) -> String {
    load_config(text).unwrap_err().field
}

#[test]
fn missing_port_names_the_field() {
    let e = load_config(r#"{"shards":[{"dax_config":[{"path":"/a"}]}]}"#).unwrap_err();
    assert_eq!(e.field, "port");
    assert!(e.to_string().starts_with("E_CONFIG(port)"));
}

#[test]
fn conflicts_are_rejected() {
    let ports = r#"{"shards":[{"port":1,"dax_config":[{"path":"/a"}]},{"port":1,"dax_config":[{"path":"/b"}]}]}"#;
    assert_eq!(field_of(ports), "port-conflict");
    let paths = r#"{"shards":[{"port":1,"dax_config":[{"path":"/a"}]},{"port":2,"dax_config":[{"path":"/a"}]}]}"#;
    assert_eq!(field_of(paths), "dax-conflict");
}

#[test]
fn malformed_values_are_errors() {
    assert_eq!(field_of("{"), "json");
    assert_eq!(field_of(r#"{"shards":[]}"#), "shards");
    assert_eq!(field_of(r#"{"shards":[{"port":1}]}"#), "dax_config");
    assert_eq!(field_of(r#"{"shards":[{"port":70000,"dax_config":[{"path":"/a"}]}]}"#), "port");
    assert_eq!(field_of(r#"{"shards":[{"port":1,"default_backend":"btree","dax_config":[{"path":"/a"}]}]}"#), "default_backend");
    assert_eq!(field_of(r#"{"shards":[{"port":1,"ado_signals":["pre-put"],"dax_config":[{"path":"/a"}]}]}"#), "ado_signals");
    assert_eq!(field_of(r#"{"shards":[{"port":1,"dax_config":[{"path":"/a","addr":"0xZZ"}]}]}"#), "addr");
}

#[test]
fn unknown_keys_warn() {
    let c = load_config(r#"{"colour":"blue","shards":[{"port":1,"flavour":2,"dax_config":[{"path":"/a"}]}]}"#).unwrap();
    assert_eq!(c.warnings.len(), 2, "{:?}", c.warnings);
    assert!(c.warnings.iter().any(|w| w.contains("colour")));
    assert!(c.warnings.iter().any(|w| w.contains("flavour")));
}

#[test]
fn extensions_parse() {
    let c = load_config(
        r#"{"shards":[{"port":0,"default_backend":"mapstore","ado_mode":"thread",
            "dax_config":[{"path":"/a","size":134217728}]}]}"#,
    )
    .unwrap();
    assert_eq!(c.shards[0].backend, EngineKind::MapStore);
    assert_eq!(c.shards[0].ado_mode, Some(AdoModeChoice::Thread));
    assert_eq!(c.shards[0].dax.size, Some(128 << 20));
}

#[test]
fn device_override() {
    let mut c = load_config(LISTING_ONE).unwrap();
    c.override_device(std::path::Path::new("/tmp/arena"));
    assert_eq!(c.shards[0].dax.path.to_str(), Some("/tmp/arena.0"));
    assert_eq!(c.shards[1].dax.path.to_str(), Some("/tmp/arena.1"));
    let mut one = load_config(LISTING_THREE).unwrap();
    one.override_device(std::path::Path::new("/tmp/arena"));
    assert_eq!(one.shards[0].dax.path.to_str(), Some("/tmp/arena"));
}

#[test]
fn configured_shards_serve_and_recover_from_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"{{"shards":[
            {{"port":0,"ado_mode":"thread","dax_config":[{{"path":"{a}","size":134217728}}]}},
            {{"port":0,"ado_mode":"thread","default_backend":"hstore-cc","dax_config":[{{"path":"{b}","size":134217728}}]}}
        ]}}"#,
        a = dir.path().join("s0").display(),
        b = dir.path().join("s1").display()
    );
    let cfg = load_config(&text).unwrap();
    assert!(DEFAULT_ARENA_SIZE > 128 << 20);
    let shards = mcaslite_server::start(&cfg).unwrap();
    for (i, h) in shards.iter().enumerate() {
        let mut s = Session::connect(h.addr()).unwrap();
        assert_eq!(s.shard_id(), i as u32);
        let p = s.create_pool("p", 32 << 20).unwrap();
        s.put(p, b"shard", format!("{i}").as_bytes()).unwrap();
    }
    for h in shards {
        h.stop();
    }
    assert_eq!(std::fs::metadata(dir.path().join("s0")).unwrap().len(), 128 << 20);
    let shards = mcaslite_server::start(&cfg).unwrap();
    for (i, h) in shards.iter().enumerate() {
        let mut s = Session::connect(h.addr()).unwrap();
        let p = s.open_pool("p").unwrap();
        assert_eq!(s.get(p, b"shard").unwrap(), format!("{i}").as_bytes());
    }
}
