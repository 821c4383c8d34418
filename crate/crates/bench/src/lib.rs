//! Load generator for mcaslite shards.
//!
//! A coordinator starts one worker per simulated client (threads, or
//! processes re-running the `bench` binary), holds them at a barrier on a
//! TCP control socket, then gathers per-client counts and latency samples
//! into a [`Report`].

pub mod coordinator;
pub mod histogram;
pub mod report;
pub mod sweep;
pub mod worker;
pub mod workload;

pub use coordinator::{assemble, run_bench, Launch, LocalCluster};
pub use histogram::{summarize, summarize_sequential, LatencyHistogram, Percentiles, BINS};
pub use report::Report;
pub use sweep::{degradation, fairness, fairness_row, scaling_sweep, scaling_table, FairnessRow, ScalingRow};
pub use workload::{KeyStream, Mix, Target, WorkloadSpec};

#[derive(Debug, Clone, thiserror::Error)]
pub enum BenchError {
    #[error("E_INVALID: {0}")]
    Spec(String),
    #[error("E_CONNECT: {0}")]
    Connect(String),
    #[error("server: {0}")]
    Server(String),
    #[error("worker: {0}")]
    Worker(String),
    #[error("i/o: {0}")]
    Io(String),
}
