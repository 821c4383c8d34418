use mcaslite_core::crash::{enumerate, explore, SubsetPolicy};
use mcaslite_core::engine::{create_engine, open_engine, EngineKind, EngineOptions, KvEngine};
use mcaslite_core::pmem::{Image, Pmem};
use mcaslite_core::Error;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{Model, MIB};

/// Pool extents inside a 128 MiB crash-sim device.
pub const EXT: [(u64, u64); 1] = [(32 * MIB, 64 * MIB)];
pub const CAPACITY: u64 = 128 * MIB;

pub fn fresh(kind: EngineKind, opts: &EngineOptions) -> Box<dyn KvEngine> {
    create_engine(kind, Pmem::crash_sim(CAPACITY), &EXT, opts).expect("engine creates")
}

pub fn reopen(kind: EngineKind, img: Image, opts: &EngineOptions) -> mcaslite_core::Result<Box<dyn KvEngine>> {
    open_engine(kind, Pmem::from_image(img), &EXT, opts)
}

/// What has reached persistence, ignoring anything still in cache.
pub fn committed_image(e: &dyn KvEngine) -> Image {
    e.pmem().crash_point().expect("crash-sim memory").committed
}

pub fn contents(e: &dyn KvEngine) -> Model {
    e.iterate()
        .expect("iterate")
        .into_iter()
        .map(|(k, loc, _)| (k, e.pmem().read_vec(loc.offset, loc.len).expect("value readable")))
        .collect()
}

/// `n` random puts, erases, resizes and gets over 2000 keys, mirrored into
/// `model`. Every `audit_every` ops the engine is audited and its count
/// compared. Returns the first disagreement.
pub fn random_ops(e: &mut dyn KvEngine, model: &mut Model, rng: &mut ChaCha8Rng, n: usize, audit_every: usize) -> Result<(), String> {
    for i in 0..n {
        let key = format!("k{}", rng.random_range(0..2000u32)).into_bytes();
        match rng.random_range(0..10) {
            0..=4 => {
                let len = if rng.random_bool(0.5) { rng.random_range(0..30) } else { rng.random_range(0..3000) };
                let v: Vec<u8> = (0..len).map(|_| rng.random()).collect();
                e.put(&key, &v, false).map_err(|err| format!("op {i}: put: {err}"))?;
                model.insert(key, v);
            }
            5..=6 => match e.erase(&key) {
                Ok(()) if model.remove(&key).is_some() => {}
                Err(Error::KeyNotFound) if !model.contains_key(&key) => {}
                r => return Err(format!("op {i}: erase gave {r:?}")),
            },
            7 => {
                if let Some(v) = model.get_mut(&key) {
                    let n = rng.random_range(0..200);
                    e.resize_value(&key, n).map_err(|err| format!("op {i}: resize: {err}"))?;
                    v.resize(n as usize, 0);
                }
            }
            _ => {
                if e.get(&key).ok() != model.get(&key).cloned() {
                    return Err(format!("op {i}: get disagrees with the model"));
                }
            }
        }
        if (i + 1) % audit_every == 0 {
            e.audit().map_err(|err| format!("audit after op {i}: {err}"))?;
            if e.count() != model.len() as u64 {
                return Err(format!("after op {i}: count {} but model has {}", e.count(), model.len()));
            }
        }
    }
    Ok(())
}

/// Run `op` once after `setup`, recording every flush, then reopen every
/// crash image `policy` picks. Each must audit clean and hold exactly the
/// contents from before or after `op`, and the image committed when `op`
/// returned must hold the contents after it. Returns the images checked.
pub fn crash_check(
    kind: EngineKind,
    opts: &EngineOptions,
    setup: impl Fn(&mut dyn KvEngine),
    op: impl Fn(&mut dyn KvEngine),
    policy: SubsetPolicy,
) -> Result<usize, String> {
    let mut e = fresh(kind, opts);
    setup(e.as_mut());
    let pre = contents(e.as_ref());
    e.pmem().start_recording();
    op(e.as_mut());
    let pts = e.pmem().take_recording();
    let post = contents(e.as_ref());
    let acked = reopen(kind, committed_image(e.as_ref()), opts).map_err(|err| err.to_string())?;
    if contents(acked.as_ref()) != post {
        return Err(format!("{kind}: acknowledged operation not durable"));
    }
    let cases = enumerate(&pts, policy, 99);
    let rep = explore(&cases, |c| {
        let r = reopen(kind, c.image.clone(), opts).map_err(|e| e.to_string())?;
        r.audit()?;
        let got = contents(r.as_ref());
        if got == pre || got == post {
            Ok(())
        } else {
            Err(format!("point {}: neither pre nor post", c.point))
        }
    });
    if !rep.ok() {
        return Err(format!("{kind}: {} of {} images failed, first {:?}", rep.failures.len(), rep.checked, rep.failures.first()));
    }
    Ok(rep.checked)
}
