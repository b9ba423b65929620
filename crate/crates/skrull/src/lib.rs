//! Skrull: a data-scheduling engine and cost simulator for training runs
//! that mix very long and very short sequences.
//!
//! When sequence lengths span several orders of magnitude, sharding every
//! sequence across a context-parallel group wastes the short ones on
//! collective overhead, while placing everything locally overflows ranks or
//! leaves them idle. This crate decides, per iteration, how to batch
//! sequences across data-parallel ranks and which sequences to shard across
//! context-parallel ranks, minimizing a profiled cost model's iteration time
//! under per-rank token capacity.
//!
//! The pieces:
//! - [`cost_model`]: linear compute/communication/memory models fit from
//!   offline profiles, plus the FLOPs and volume estimators they consume.
//! - [`workload`]: length-trace generators calibrated to real corpora,
//!   trace ingestion, and deterministic epoch sampling.
//! - [`dacp`]: per-micro-batch placement (local vs sharded) with roll-back,
//!   and the evaluator scoring a placement.
//! - [`gds`]: global batch balancing across data-parallel ranks and
//!   interleaved micro-batch planning.
//! - [`baselines`]: round-robin, shard-everything, and sorted-batching
//!   reference schedulers.
//! - [`oracle`]: exhaustive-search optima for bounding heuristic quality.
//! - [`simulator`]: multi-iteration replay and report emission.

pub mod baselines;
pub mod cost_model;
pub mod dacp;
pub mod error;
pub mod gds;
pub mod oracle;
pub mod simulator;
pub mod workload;

pub use cost_model::{CostModel, LinearFit, ModelConfig};
pub use dacp::{ClusterConfig, DacpSchedule};
pub use gds::IterationPlan;
pub use simulator::{SchedulerKind, SimConfig, SimReport};
pub use workload::{DistributionSpec, LengthTrace};
