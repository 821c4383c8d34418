//! Storage core of mcaslite: a persistent-memory style key-value store.
//!
//! The layers, bottom up:
//!
//! * [`pmem`]: flushable byte space (mapped file or crash simulator);
//! * [`arena`]: per-shard arena with a crash-atomic 32 MiB region allocator;
//! * [`cc_heap`]: undo log and crash-consistent heap with a root object;
//! * [`recon_alloc`]: volatile slab/extent allocator rebuilt after restart;
//! * [`engine`]: `hstore`, `hstore-cc` and `mapstore` primary indexes;
//! * [`index`]: ordered secondary key index;
//! * [`protocol`]: framed wire format (fields encoded with [`codec`]);
//! * [`crash`]: crash-state enumeration used by the test suites.

pub mod arena;
pub mod cc_heap;
pub mod codec;
pub mod crash;
pub mod engine;
pub mod error;
pub mod hash;
pub mod index;
pub mod pmem;
pub mod protocol;
pub mod recon_alloc;

pub use error::{Error, Result};
