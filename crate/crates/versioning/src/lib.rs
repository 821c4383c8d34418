//! Multi-version values as an ADO personality.
//!
//! Each key's value is a small root holding a ring of the last few
//! versions; the versions themselves are detached allocations. Updates to
//! the ring go through a one-entry undo log so a crash mid-update rolls
//! back to the previous state.

pub mod client;
pub mod message;
pub mod plugin;
pub mod root;

pub use client::{VersionClient, VersionError};
pub use plugin::{register, Versioning, DEFAULT_MAX_VERSIONS, PLUGIN_NAME};
pub use root::{root_size, Version, VersionRoot};
