//! Multi-iteration replay: samples global batches from a trace, plans them
//! under each configured scheduler, accumulates modeled iteration times and
//! per-GPU token peaks, and emits comparison reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    fifo_micro_batches, plan_full_shard, plan_sorted_batching, round_robin_dp_split,
    schedule_round_robin,
};
use crate::cost_model::CostModel;
use crate::dacp::{schedule_dacp, ClusterConfig, DacpSchedule};
use crate::error::{ScheduleError, SimError};
use crate::gds::{eval_iteration, plan_iteration, IterationPlan};
use crate::workload::{generate, load_trace, sample_global_batch, DistributionSpec, LengthTrace};

/// The schedulers the simulator can replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchedulerKind {
    /// Full pipeline: global balancing plus distribution-aware placement.
    #[serde(rename = "skrull")]
    Skrull,
    /// Ablation: plain FIFO micro-batching, distribution-aware placement.
    #[serde(rename = "skrull-dacp-only")]
    SkrullDacpOnly,
    /// FIFO micro-batching with capacity-greedy round-robin placement.
    #[serde(rename = "rr")]
    RoundRobin,
    /// Shard everything across the CP group, FIFO micro-batching.
    #[serde(rename = "full-shard")]
    FullShard,
    /// Sorted consecutive batching, everything sharded.
    #[serde(rename = "sorted")]
    Sorted,
}

impl SchedulerKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Skrull => "skrull",
            Self::SkrullDacpOnly => "skrull-dacp-only",
            Self::RoundRobin => "rr",
            Self::FullShard => "full-shard",
            Self::Sorted => "sorted",
        }
    }

    pub fn all() -> [SchedulerKind; 5] {
        [Self::Skrull, Self::SkrullDacpOnly, Self::RoundRobin, Self::FullShard, Self::Sorted]
    }
}

impl FromStr for SchedulerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "skrull" | "skrull-full" => Ok(Self::Skrull),
            "skrull-dacp-only" | "dacp-only" => Ok(Self::SkrullDacpOnly),
            "rr" | "round-robin" => Ok(Self::RoundRobin),
            "full-shard" => Ok(Self::FullShard),
            "sorted" => Ok(Self::Sorted),
            other => Err(format!(
                "unknown scheduler {other:?}; expected skrull|skrull-dacp-only|rr|full-shard|sorted"
            )),
        }
    }
}

impl std::fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_trace_len() -> usize {
    100_000
}

/// Everything one simulation run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub cluster: ClusterConfig,
    pub cost: CostModel,
    pub dist: DistributionSpec,
    pub iterations: usize,
    pub seed: u64,
    pub schedulers: Vec<SchedulerKind>,
    pub rollback: bool,
    /// Trace size drawn from generator specs; file specs use the whole file.
    #[serde(default = "default_trace_len")]
    pub trace_len: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.iterations == 0 {
            return Err(SimError::InvalidConfig("iterations must be at least 1".into()));
        }
        if self.schedulers.is_empty() {
            return Err(SimError::InvalidConfig("need at least one scheduler".into()));
        }
        let c = &self.cluster;
        if c.cp_degree == 0 || c.dp_worldsize == 0 || c.bucket_tokens == 0 || c.per_dp_batch == 0 {
            return Err(SimError::InvalidConfig("cluster dimensions must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-scheduler aggregates over a run. Errored iterations contribute no
/// time or peak entry; their indices are recorded instead.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchedulerStats {
    pub per_iteration_time: Vec<f64>,
    pub mean_time: f64,
    pub p95_time: f64,
    pub total_time: f64,
    /// Per successful iteration: the lightest and heaviest GPU's peak token
    /// load, the activation-memory imbalance proxy.
    pub peak_tokens_per_rank_min_max: Vec<(f64, f64)>,
    pub dacp_error_count: usize,
    pub errored_iterations: Vec<usize>,
}

impl SchedulerStats {
    fn finalize(&mut self) {
        let n = self.per_iteration_time.len();
        if n == 0 {
            return;
        }
        self.total_time = self.per_iteration_time.iter().sum();
        self.mean_time = self.total_time / n as f64;
        let mut sorted = self.per_iteration_time.clone();
        sorted.sort_by(f64::total_cmp);
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        self.p95_time = sorted[rank - 1];
    }

    /// Iteration indices behind `per_iteration_time`, reconstructed from the
    /// recorded errors.
    pub fn successful_iterations(&self) -> Vec<usize> {
        let total = self.per_iteration_time.len() + self.errored_iterations.len();
        (0..total).filter(|i| !self.errored_iterations.contains(i)).collect()
    }
}

/// Simulation outcome: per-scheduler stats plus speedups against the
/// designated baseline (full-shard when present, else the first scheduler).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub per_scheduler: BTreeMap<String, SchedulerStats>,
    pub speedups: BTreeMap<String, f64>,
}

/// Builds the plan one scheduler produces for one global batch.
pub fn plan_batch(
    kind: SchedulerKind,
    lengths: &[u64],
    cluster: &ClusterConfig,
    cost: &CostModel,
    rollback: bool,
    iteration_seed: u64,
) -> Result<IterationPlan, ScheduleError> {
    match kind {
        SchedulerKind::Skrull => plan_iteration(lengths, cluster, cost, rollback),
        SchedulerKind::SkrullDacpOnly => {
            plan_fifo_with(lengths, cluster, |mb| schedule_dacp(mb, cluster, cost, rollback))
        }
        SchedulerKind::RoundRobin => {
            plan_fifo_with(lengths, cluster, |mb| schedule_round_robin(mb, cluster, rollback))
        }
        SchedulerKind::FullShard => plan_full_shard(lengths, cluster, cost),
        SchedulerKind::Sorted => plan_sorted_batching(lengths, cluster, cost, iteration_seed),
    }
}

/// FIFO batching shared by the placement-only pipelines: deal sequences
/// round-robin across DP ranks, pack under the token budget, then place
/// each micro-batch with the supplied scheduler.
fn plan_fifo_with(
    lengths: &[u64],
    cluster: &ClusterConfig,
    mut place: impl FnMut(&[u64]) -> Result<DacpSchedule, ScheduleError>,
) -> Result<IterationPlan, ScheduleError> {
    let budget = cluster.micro_batch_capacity();
    let mut per_dp = Vec::with_capacity(cluster.dp_worldsize);
    let mut schedules = Vec::with_capacity(cluster.dp_worldsize);
    for (dp_rank, indices) in round_robin_dp_split(lengths.len(), cluster.dp_worldsize)
        .into_iter()
        .enumerate()
    {
        let mbs = fifo_micro_batches(&indices, lengths, budget)?;
        let mut scheds = Vec::with_capacity(mbs.len());
        for (j, mb) in mbs.iter().enumerate() {
            let mb_lengths: Vec<u64> = mb.iter().map(|&k| lengths[k]).collect();
            let sched = place(&mb_lengths).map_err(|e| ScheduleError::MicroBatch {
                dp_rank,
                micro_batch: j,
                source: Box::new(e),
            })?;
            scheds.push(sched);
        }
        per_dp.push(mbs);
        schedules.push(scheds);
    }
    Ok(IterationPlan { global_lengths: lengths.to_vec(), per_dp, schedules })
}

/// Materializes the trace a config draws its batches from.
pub fn resolve_trace(config: &SimConfig) -> Result<LengthTrace, SimError> {
    let trace = match &config.dist {
        DistributionSpec::File { path } => load_trace(Path::new(path))?,
        spec => generate(spec, config.trace_len, config.seed)?,
    };
    Ok(trace)
}

fn iteration_seed(seed: u64, iteration: usize) -> u64 {
    seed ^ (iteration as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Replays `iterations` training steps. Each iteration samples one global
/// batch and plans it under every configured scheduler; a scheduler that
/// errors on an iteration just records the error. Deterministic in the
/// config, including the seed.
pub fn simulate(config: &SimConfig) -> Result<SimReport, SimError> {
    config.validate()?;
    let trace = resolve_trace(config)?;
    let batch_size = config.cluster.global_batch();

    let mut stats: BTreeMap<String, SchedulerStats> = config
        .schedulers
        .iter()
        .map(|k| (k.name().to_string(), SchedulerStats::default()))
        .collect();

    for iteration in 0..config.iterations {
        let batch = sample_global_batch(&trace, batch_size, config.seed, iteration)?;
        let batch_tokens: u64 = batch.iter().sum();
        for &kind in &config.schedulers {
            let entry = stats.get_mut(kind.name()).expect("stats preallocated");
            match plan_batch(
                kind,
                &batch,
                &config.cluster,
                &config.cost,
                config.rollback,
                iteration_seed(config.seed, iteration),
            ) {
                Ok(plan) => {
                    debug_assert!(plan.validate(&config.cluster));
                    debug_assert_eq!(
                        plan.per_dp
                            .iter()
                            .flatten()
                            .flatten()
                            .map(|&k| plan.global_lengths[k])
                            .sum::<u64>(),
                        batch_tokens,
                    );
                    let cost = eval_iteration(&plan, &config.cluster, &config.cost);
                    let peaks = plan.per_gpu_token_peaks(&config.cluster);
                    let min = peaks.iter().cloned().fold(f64::INFINITY, f64::min);
                    let max = peaks.iter().cloned().fold(0.0, f64::max);
                    entry.per_iteration_time.push(cost.iteration_time);
                    entry.peak_tokens_per_rank_min_max.push((min.min(max), max));
                }
                Err(_) => {
                    entry.dacp_error_count += 1;
                    entry.errored_iterations.push(iteration);
                }
            }
        }
    }

    for s in stats.values_mut() {
        s.finalize();
    }

    let baseline = if config.schedulers.contains(&SchedulerKind::FullShard) {
        SchedulerKind::FullShard
    } else {
        config.schedulers[0]
    };
    let baseline_mean = stats[baseline.name()].mean_time;
    let mut speedups = BTreeMap::new();
    for &kind in &config.schedulers {
        let mean = stats[kind.name()].mean_time;
        if baseline_mean > 0.0 && mean > 0.0 {
            speedups.insert(kind.name().to_string(), baseline_mean / mean);
        }
    }

    Ok(SimReport { per_scheduler: stats, speedups })
}

/// One row of the roll-back ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub scheduler: String,
    pub rollback: bool,
    pub total_iterations: usize,
    pub error_iterations: usize,
    pub mean_time: Option<f64>,
    pub speedup_vs_full_shard: Option<f64>,
}

/// Toggles the roll-back safeguard for both placement schedulers on the
/// config's workload, under identical FIFO batching, and compares each
/// variant against the shard-everything baseline on the iterations it
/// survives. With the safeguard off, a workload that needs demotions turns
/// into scheduling errors -- the modeled analogue of running out of memory.
pub fn ablate_rollback(config: &SimConfig) -> Result<Vec<AblationRow>, SimError> {
    config.validate()?;
    let trace = resolve_trace(config)?;
    let batch_size = config.cluster.global_batch();

    let mut batches = Vec::with_capacity(config.iterations);
    let mut baseline_times = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let batch = sample_global_batch(&trace, batch_size, config.seed, iteration)?;
        let baseline = plan_full_shard(&batch, &config.cluster, &config.cost)
            .ok()
            .map(|plan| eval_iteration(&plan, &config.cluster, &config.cost).iteration_time);
        batches.push(batch);
        baseline_times.push(baseline);
    }

    let variants = [
        (SchedulerKind::SkrullDacpOnly, "skrull", true),
        (SchedulerKind::SkrullDacpOnly, "skrull", false),
        (SchedulerKind::RoundRobin, "rr", true),
        (SchedulerKind::RoundRobin, "rr", false),
    ];

    let mut rows = Vec::with_capacity(variants.len());
    for (kind, label, rollback) in variants {
        let mut times = Vec::new();
        let mut base = Vec::new();
        let mut errors = 0;
        for (iteration, batch) in batches.iter().enumerate() {
            match plan_batch(
                kind,
                batch,
                &config.cluster,
                &config.cost,
                rollback,
                iteration_seed(config.seed, iteration),
            ) {
                Ok(plan) => {
                    times.push(eval_iteration(&plan, &config.cluster, &config.cost).iteration_time);
                    if let Some(b) = baseline_times[iteration] {
                        base.push(b);
                    }
                }
                Err(_) => errors += 1,
            }
        }
        let mean_time = (!times.is_empty())
            .then(|| times.iter().sum::<f64>() / times.len() as f64);
        let speedup_vs_full_shard = match (mean_time, base.is_empty()) {
            (Some(mean), false) if mean > 0.0 => {
                Some(base.iter().sum::<f64>() / base.len() as f64 / mean)
            }
            _ => None,
        };
        rows.push(AblationRow {
            scheduler: label.to_string(),
            rollback,
            total_iterations: config.iterations,
            error_iterations: errors,
            mean_time,
            speedup_vs_full_shard,
        });
    }
    Ok(rows)
}

/// Report output encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown format {other:?}; expected json|csv")),
        }
    }
}

/// Writes a report: JSON mirrors [`SimReport`] exactly; CSV emits one row
/// per (scheduler, successful iteration).
pub fn emit_report(
    report: &SimReport,
    format: ReportFormat,
    out: &mut impl Write,
) -> Result<(), SimError> {
    match format {
        ReportFormat::Json => {
            let body = serde_json::to_string(report)?;
            out.write_all(body.as_bytes())?;
            out.write_all(b"\n")?;
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["iteration", "scheduler", "time", "min_peak_tokens", "max_peak_tokens"])?;
            for (name, stats) in &report.per_scheduler {
                let iterations = stats.successful_iterations();
                for (slot, &iteration) in iterations.iter().enumerate() {
                    let (min, max) = stats.peak_tokens_per_rank_min_max[slot];
                    w.write_record([
                        iteration.to_string(),
                        name.clone(),
                        stats.per_iteration_time[slot].to_string(),
                        min.to_string(),
                        max.to_string(),
                    ])?;
                }
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Convenience wrapper writing to a path.
pub fn emit_report_to_path(
    report: &SimReport,
    format: ReportFormat,
    path: &Path,
) -> Result<(), SimError> {
    let mut file = std::fs::File::create(path)?;
    emit_report(report, format, &mut file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost_model::ModelConfig;

    fn small_config() -> SimConfig {
        SimConfig {
            cluster: ClusterConfig::new(2, 1, 4000, 8),
            cost: CostModel::identity(ModelConfig::toy()),
            dist: DistributionSpec::Longtail { location: 5.0, scale: 1.0, max_len: 3000 },
            iterations: 3,
            seed: 11,
            schedulers: SchedulerKind::all().to_vec(),
            rollback: true,
            trace_len: 200,
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let config = small_config();
        let a = simulate(&config).unwrap();
        let b = simulate(&config).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let stats = &a.per_scheduler["skrull"];
        assert_eq!(stats.per_iteration_time.len(), 3);
    }

    #[test]
    fn baseline_speedup_is_exactly_one() {
        let report = simulate(&small_config()).unwrap();
        assert_eq!(report.speedups["full-shard"], 1.0);
    }

    #[test]
    fn ablation_reproduces_rollback_necessity() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        use std::io::Write as _;
        write!(f, "50\n60\n90\n").unwrap();
        let config = SimConfig {
            cluster: ClusterConfig::new(2, 1, 100, 3),
            cost: CostModel::identity(ModelConfig::toy()),
            dist: DistributionSpec::File { path: f.path().display().to_string() },
            iterations: 1,
            seed: 0,
            schedulers: vec![SchedulerKind::Skrull],
            rollback: true,
            trace_len: 3,
        };
        let rows = ablate_rollback(&config).unwrap();
        assert_eq!(rows.len(), 4);
        for row in &rows {
            if row.rollback {
                assert_eq!(row.error_iterations, 0, "{} with rollback", row.scheduler);
                assert!(row.speedup_vs_full_shard.is_some());
            } else {
                assert!(row.error_iterations > 0, "{} without rollback", row.scheduler);
            }
        }
    }

    #[test]
    fn ablation_with_ample_capacity_never_errors() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        use std::io::Write as _;
        write!(f, "50\n60\n90\n").unwrap();
        let config = SimConfig {
            cluster: ClusterConfig::new(2, 1, 100_000, 3),
            cost: CostModel::identity(ModelConfig::toy()),
            dist: DistributionSpec::File { path: f.path().display().to_string() },
            iterations: 1,
            seed: 0,
            schedulers: vec![SchedulerKind::Skrull],
            rollback: true,
            trace_len: 3,
        };
        let rows = ablate_rollback(&config).unwrap();
        assert!(rows.iter().all(|r| r.error_iterations == 0));
    }

    #[test]
    fn empty_report_serializes_to_bare_maps() {
        let report = SimReport::default();
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            r#"{"per_scheduler":{},"speedups":{}}"#
        );
    }

    #[test]
    fn report_round_trips_through_json() {
        let report = simulate(&small_config()).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: SimReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);
    }

    #[test]
    fn csv_report_has_one_row_per_scheduler_iteration() {
        let mut config = small_config();
        config.iterations = 1;
        let report = simulate(&config).unwrap();
        let mut buf = Vec::new();
        emit_report(&report, ReportFormat::Csv, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.trim_end().lines().collect();
        assert_eq!(lines[0], "iteration,scheduler,time,min_peak_tokens,max_peak_tokens");
        assert_eq!(lines.len(), 1 + config.schedulers.len());
    }

    #[test]
    fn scheduler_names_parse_and_print() {
        for kind in SchedulerKind::all() {
            assert_eq!(kind.name().parse::<SchedulerKind>().unwrap(), kind);
        }
        assert!("mystery".parse::<SchedulerKind>().is_err());
    }

    #[test]
    fn config_validation_rejects_degenerate_setups() {
        let mut config = small_config();
        config.iterations = 0;
        assert!(simulate(&config).is_err());
        let mut config = small_config();
        config.schedulers.clear();
        assert!(simulate(&config).is_err());
    }
}
