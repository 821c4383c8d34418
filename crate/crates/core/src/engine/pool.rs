//! Pools: named, arena-backed key spaces, each with its own engine.
//!
//! Pool header (first 4 KiB of the pool's first region):
//!
//! ```text
//! 0    magic "MCPL" + version     8   pool id
//! 16   engine code                24  name length
//! 32   requested size             40  creation time (unix s)
//! 48   flags (bit 0: secondary index attached)
//! 64   primary table root (64 B)  128 allocation ledger root (64 B)
//! 256  name (up to 255 bytes)
//! ```
//!
//! The magic is written last on create and cleared first on delete, so a
//! pool found without it at startup was half created or half deleted and
//! its regions are released.

use crate::arena::{extents_of, PersistentArena};
use crate::error::{Error, Result};
use crate::pmem::Pmem;

use super::{create_engine, now_secs, open_engine, EngineKind, EngineOptions, KvEngine};

pub const POOL_MAGIC: u64 = u64::from_le_bytes(*b"MCPL\x01\0\0\0");
pub const POOL_HEADER: u64 = 4096;
pub const KV_ROOT: u64 = 64;
pub const LEDGER_ROOT: u64 = 128;
const NAME_OFF: u64 = 256;
const FLAGS_OFF: u64 = 48;
pub const FLAG_INDEX: u64 = 1;
pub const NAME_MAX: usize = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolHeader {
    pub id: u64,
    pub kind: EngineKind,
    pub name: String,
    pub size: u64,
    pub created: u64,
}

pub fn write_header(pmem: &Pmem, base: u64, h: &PoolHeader) -> Result<()> {
    let mut b = vec![0u8; 56];
    b[8..16].copy_from_slice(&h.id.to_le_bytes());
    b[16..24].copy_from_slice(&h.kind.code().to_le_bytes());
    b[24..32].copy_from_slice(&(h.name.len() as u64).to_le_bytes());
    b[32..40].copy_from_slice(&h.size.to_le_bytes());
    b[40..48].copy_from_slice(&h.created.to_le_bytes());
    pmem.write_persist(base, &b)?;
    pmem.write_persist(base + NAME_OFF, h.name.as_bytes())
}

pub fn seal(pmem: &Pmem, base: u64) -> Result<()> {
    pmem.write_u64_persist(base, POOL_MAGIC)
}

pub fn unseal(pmem: &Pmem, base: u64) -> Result<()> {
    pmem.write_u64_persist(base, 0)
}

pub fn read_flags(pmem: &Pmem, base: u64) -> Result<u64> {
    pmem.read_u64(base + FLAGS_OFF)
}

pub fn write_flags(pmem: &Pmem, base: u64, flags: u64) -> Result<()> {
    pmem.write_u64_persist(base + FLAGS_OFF, flags)
}

/// `None` when the pool is not sealed.
pub fn read_header(pmem: &Pmem, base: u64) -> Result<Option<PoolHeader>> {
    if pmem.read_u64(base)? != POOL_MAGIC {
        return Ok(None);
    }
    let kind = EngineKind::from_code(pmem.read_u64(base + 16)?).ok_or_else(|| Error::Corrupt("pool engine code".into()))?;
    let name_len = pmem.read_u64(base + 24)?;
    if name_len as usize > NAME_MAX {
        return Err(Error::Corrupt("pool name length".into()));
    }
    let name = String::from_utf8(pmem.read_vec(base + NAME_OFF, name_len)?)
        .map_err(|_| Error::Corrupt("pool name".into()))?;
    Ok(Some(PoolHeader {
        id: pmem.read_u64(base + 8)?,
        kind,
        name,
        size: pmem.read_u64(base + 32)?,
        created: pmem.read_u64(base + 40)?,
    }))
}

fn pool_extents(arena: &PersistentArena, id: u64) -> Result<Vec<(u64, u64)>> {
    let regions = arena.regions_of(id);
    if regions.is_empty() {
        return Err(Error::UnknownPool(id));
    }
    Ok(extents_of(&regions))
}

/// Allocate regions for a new pool, format its engine and seal it.
pub fn create_pool(
    arena: &mut PersistentArena,
    name: &str,
    size: u64,
    kind: EngineKind,
    opts: &EngineOptions,
) -> Result<(PoolHeader, Box<dyn KvEngine>)> {
    if name.is_empty() || name.len() > NAME_MAX {
        return Err(Error::Invalid(format!("pool name must be 1..={NAME_MAX} bytes")));
    }
    let id = arena.owners().into_iter().max().unwrap_or(0) + 1;
    arena.region_alloc(id, size)?;
    let pmem = arena.pmem().clone();
    let ext = pool_extents(arena, id)?;
    let header = PoolHeader { id, kind, name: name.to_string(), size, created: now_secs() as u64 };
    let made = write_header(&pmem, ext[0].0, &header).and_then(|_| create_engine(kind, pmem.clone(), &ext, opts));
    match made {
        Ok(engine) => {
            seal(&pmem, ext[0].0)?;
            Ok((header, engine))
        }
        Err(e) => {
            arena.region_free(id)?;
            Err(e)
        }
    }
}

pub fn open_pool(arena: &PersistentArena, id: u64, opts: &EngineOptions) -> Result<(PoolHeader, Box<dyn KvEngine>)> {
    let ext = pool_extents(arena, id)?;
    let pmem = arena.pmem().clone();
    let header = read_header(&pmem, ext[0].0)?.ok_or(Error::UnknownPool(id))?;
    let engine = open_engine(header.kind, pmem, &ext, opts)?;
    Ok((header, engine))
}

/// Unseal, then zero and release the pool's regions.
pub fn delete_pool(arena: &mut PersistentArena, id: u64) -> Result<u64> {
    let ext = pool_extents(arena, id)?;
    unseal(arena.pmem(), ext[0].0)?;
    arena.region_free(id)
}

/// Headers of every sealed pool; unsealed pools are released.
pub fn scan_pools(arena: &mut PersistentArena) -> Result<Vec<PoolHeader>> {
    let mut out = Vec::new();
    for id in arena.owners() {
        let ext = pool_extents(arena, id)?;
        match read_header(arena.pmem(), ext[0].0)? {
            Some(h) if h.id == id => out.push(h),
            _ => {
                log::warn!("releasing incomplete pool {id}");
                arena.region_free(id)?;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crash::{enumerate, explore, SubsetPolicy};

    const MIB: u64 = 1 << 20;

    #[test]
    fn create_open_delete() {
        let mut a = PersistentArena::crash_sim(256 * MIB).unwrap();
        let opts = EngineOptions::default();
        for kind in EngineKind::ALL {
            let (h, mut e) = create_pool(&mut a, &format!("p-{kind}"), 40 * MIB, kind, &opts).unwrap();
            e.put(b"k", b"v", false).unwrap();
            drop(e);
            let (h2, e2) = open_pool(&a, h.id, &opts).unwrap();
            assert_eq!(h2, h);
            if kind != EngineKind::MapStore {
                assert_eq!(e2.get(b"k").unwrap(), b"v");
            }
            assert_eq!(delete_pool(&mut a, h.id).unwrap(), 64 * MIB);
            assert_eq!(open_pool(&a, h.id, &opts).unwrap_err(), Error::UnknownPool(h.id));
        }
        assert_eq!(a.free_bytes(), 224 * MIB);
    }

    #[test]
    fn too_large_and_bad_name() {
        let mut a = PersistentArena::crash_sim(128 * MIB).unwrap();
        let opts = EngineOptions::default();
        assert_eq!(create_pool(&mut a, "big", 200 * MIB, EngineKind::HStore, &opts).unwrap_err(), Error::NoSpace);
        assert!(create_pool(&mut a, "", MIB, EngineKind::HStore, &opts).is_err());
    }

    #[test]
    fn crash_during_create_leaves_no_pool_behind() {
        let mut a = PersistentArena::crash_sim(128 * MIB).unwrap();
        let pm = a.pmem().clone();
        pm.start_recording();
        create_pool(&mut a, "p", MIB, EngineKind::HStore, &EngineOptions::default()).unwrap();
        let pts = pm.take_recording();
        let cases = enumerate(&pts, SubsetPolicy { exhaustive_up_to: 3, samples: 2 }, 1);
        let rep = explore(&cases, |c| {
            let mut a = PersistentArena::from_image(c.image.clone()).map_err(|e| e.to_string())?;
            let pools = scan_pools(&mut a).map_err(|e| e.to_string())?;
            a.audit().map_err(|e| e.to_string())?;
            match pools.len() {
                0 if a.free_bytes() == 96 * MIB => Ok(()),
                1 => open_pool(&a, pools[0].id, &EngineOptions::default()).map(|_| ()).map_err(|e| e.to_string()),
                _ => Err(format!("{} pools, {} free", pools.len(), a.free_bytes())),
            }
        });
        assert!(rep.ok(), "{:?}", &rep.failures[..rep.failures.len().min(3)]);
    }
}
