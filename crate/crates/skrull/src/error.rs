//! Error types shared across the crate.

use thiserror::Error;

use crate::cost_model::FitUnits;

/// Errors from building or evaluating cost models.
#[derive(Debug, Error, PartialEq)]
pub enum CostModelError {
    #[error("fit has units {found:?}, expected {expected:?}")]
    UnitMismatch { expected: FitUnits, found: FitUnits },
    #[error("need at least 2 profile points at or above threshold {threshold}, got {available}")]
    InsufficientProfile { threshold: f64, available: usize },
    #[error("memory budget {budget} does not exceed the fit intercept {intercept}")]
    InfeasibleBudget { budget: f64, intercept: f64 },
    #[error("memory fit slope must be positive, got {0}")]
    NonPositiveSlope(f64),
    #[error("invalid model config: {0}")]
    InvalidModel(String),
}

/// Errors from reading traces or profile tables off disk.
#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}: file contains no entries")]
    Empty { path: String },
}

/// Errors from workload generation.
#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid distribution parameters: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("trace has {available} lengths, {requested} requested")]
    TraceTooShort { requested: usize, available: usize },
    #[error("batch size {batch} exceeds trace size {trace}")]
    BatchTooLarge { batch: usize, trace: usize },
}

/// Errors from the micro-batch and iteration schedulers.
#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    /// A sequence could not be placed and roll-back was disabled.
    #[error("sequence of length {seq_len} cannot be placed and roll-back is disabled")]
    RollbackDisabled { seq_len: u64 },
    /// Roll-back was required but the target rank holds no local sequence.
    #[error("roll-back failed: rank {rank} holds no local sequence")]
    RollbackExhausted { rank: usize },
    /// A single sequence cannot fit even when sharded across the CP group.
    #[error("sequence of length {seq_len} exceeds micro-batch capacity {capacity}")]
    OversizedSequence { seq_len: u64, capacity: f64 },
    /// A micro-batch's total tokens exceed the CP group's capacity.
    #[error("micro-batch of {tokens} tokens exceeds capacity {capacity}")]
    BudgetExceeded { tokens: u64, capacity: f64 },
    /// No micro-batch count yielded an all-feasible partition for a DP rank.
    #[error("dp rank {dp_rank}: no micro-batch partition succeeded: {source}")]
    PartitionExhausted {
        dp_rank: usize,
        #[source]
        source: Box<ScheduleError>,
    },
    /// Failure while planning one DP rank's micro-batches.
    #[error("dp rank {dp_rank}, micro-batch {micro_batch}: {source}")]
    MicroBatch {
        dp_rank: usize,
        micro_batch: usize,
        #[source]
        source: Box<ScheduleError>,
    },
}

/// Errors from the exhaustive-search oracle.
#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("no assignment satisfies the per-rank token capacity")]
    Infeasible,
    #[error("instance size {k} exceeds the oracle limit {max_k}")]
    TooManySequences { k: usize, max_k: usize },
    #[error("search space of {states} states exceeds the limit {max_states}")]
    TooManyStates { states: u128, max_states: u64 },
    #[error("joint search supports a single DP rank, got world size {0}")]
    UnsupportedWorldSize(usize),
}

/// Errors from simulation configs and report emission.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
