//! Distribution-aware placement of one micro-batch across a context-parallel
//! group.
//!
//! Every sequence is either *local* (resides wholly on one CP rank, no
//! communication) or *distributed* (sharded as `S/N` tokens on every rank,
//! paying a collective in attention). The evaluator scores a placement as
//! the slowest rank's time, where each rank overlaps the shared collective
//! with its own local compute and then runs its share of distributed
//! compute. The scheduler greedily keeps sequences local, balancing compute
//! load first and capacity second, and falls back to sharding -- rolling
//! back earlier local placements when a rank's token bucket would overflow.

use serde::{Deserialize, Serialize};

use crate::cost_model::{comm_volume, flops, CostModel};
use crate::error::ScheduleError;

/// Assignment value marking a sequence as sharded across all CP ranks.
pub const DISTRIBUTED: i32 = -1;

/// Parallel topology and per-rank capacity shared by all schedulers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    /// Context-parallel group size.
    pub cp_degree: usize,
    /// Data-parallel world size.
    pub dp_worldsize: usize,
    /// Token capacity of one rank's bucket.
    pub bucket_tokens: u64,
    /// Sequences per DP rank in one global batch.
    pub per_dp_batch: usize,
}

impl ClusterConfig {
    pub fn new(cp_degree: usize, dp_worldsize: usize, bucket_tokens: u64, per_dp_batch: usize) -> Self {
        Self { cp_degree, dp_worldsize, bucket_tokens, per_dp_batch }
    }

    /// Token budget of one micro-batch: the whole CP group's capacity.
    pub fn micro_batch_capacity(&self) -> f64 {
        self.bucket_tokens as f64 * self.cp_degree as f64
    }

    /// Sequences in one global batch.
    pub fn global_batch(&self) -> usize {
        self.dp_worldsize * self.per_dp_batch
    }
}

/// One placement decision per sequence: [`DISTRIBUTED`] or a CP rank id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DacpSchedule {
    pub assignment: Vec<i32>,
}

impl DacpSchedule {
    pub fn new(assignment: Vec<i32>) -> Self {
        Self { assignment }
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Every entry is either [`DISTRIBUTED`] or a valid rank id, which also
    /// means every sequence is assigned exactly once.
    pub fn is_valid(&self, cp_degree: usize) -> bool {
        self.assignment.iter().all(|&a| a == DISTRIBUTED || (0..cp_degree as i32).contains(&a))
    }

    pub fn distributed_count(&self) -> usize {
        self.assignment.iter().filter(|&&a| a == DISTRIBUTED).count()
    }
}

/// Capacity/feasibility verdict with per-rank residual capacity. Residuals
/// go negative on the ranks that overflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub feasible: bool,
    pub residuals: Vec<f64>,
}

/// Cost breakdown of one evaluated micro-batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DacpCostBreakdown {
    /// Total modeled time per CP rank.
    pub per_rank_time: Vec<f64>,
    /// Latency of the collective moving all distributed sequences.
    pub comm_time: f64,
    /// Per-rank compute time of the distributed shards.
    pub dist_comp_time: f64,
    /// Compute time of each rank's local sequences.
    pub local_comp_time: Vec<f64>,
    /// Slowest rank: the modeled duration of the micro-batch.
    pub tdacp: f64,
    /// Whether the schedule respects every rank's token capacity.
    pub feasible: bool,
}

fn capacity_tolerance(bucket_tokens: u64) -> f64 {
    1e-9 * (bucket_tokens as f64).max(1.0)
}

/// Scores a placement.
///
/// Per rank: `time_j = max(comm_time, local_comp_time_j) + dist_comp_time`.
/// The collective overlaps with local compute because local sequences never
/// depend on remote shards. An infeasible schedule is still evaluated, just
/// flagged; the caller decides what to do with it.
pub fn eval_tdacp(
    lengths: &[u64],
    schedule: &DacpSchedule,
    cluster: &ClusterConfig,
    cost: &CostModel,
) -> DacpCostBreakdown {
    assert_eq!(lengths.len(), schedule.len(), "one decision per sequence");
    let n = cluster.cp_degree;
    debug_assert!(schedule.is_valid(n));

    let mut local_flops = vec![0.0f64; n];
    let mut dist_flops = 0.0f64;
    let mut dist_tokens = 0u64;
    for (&len, &a) in lengths.iter().zip(&schedule.assignment) {
        if a == DISTRIBUTED {
            dist_flops += flops(len, &cost.model, 1);
            dist_tokens += len;
        } else {
            local_flops[a as usize] += flops(len, &cost.model, 1);
        }
    }

    let comm_time = cost.comm_time(comm_volume(dist_tokens, &cost.model));
    let dist_comp_time = cost.comp_time(dist_flops / n as f64 * cost.shard_penalty);
    let local_comp_time: Vec<f64> = local_flops.iter().map(|&f| cost.comp_time(f)).collect();
    let per_rank_time: Vec<f64> =
        local_comp_time.iter().map(|&l| comm_time.max(l) + dist_comp_time).collect();
    let tdacp = per_rank_time.iter().cloned().fold(0.0, f64::max);
    let feasible = check_feasible(lengths, schedule, cluster).feasible;

    DacpCostBreakdown { per_rank_time, comm_time, dist_comp_time, local_comp_time, tdacp, feasible }
}

/// Token capacity check: every rank must hold its local sequences plus an
/// even `1/N` share of all distributed tokens within the bucket.
pub fn check_feasible(
    lengths: &[u64],
    schedule: &DacpSchedule,
    cluster: &ClusterConfig,
) -> Feasibility {
    assert_eq!(lengths.len(), schedule.len(), "one decision per sequence");
    let n = cluster.cp_degree;
    let capacity = cluster.bucket_tokens as f64;
    let tol = capacity_tolerance(cluster.bucket_tokens);

    let mut local_tokens = vec![0.0f64; n];
    let mut dist_tokens = 0.0f64;
    for (&len, &a) in lengths.iter().zip(&schedule.assignment) {
        if a == DISTRIBUTED {
            dist_tokens += len as f64;
        } else {
            local_tokens[a as usize] += len as f64;
        }
    }
    let shared = dist_tokens / n as f64;
    let residuals: Vec<f64> = local_tokens.iter().map(|&l| capacity - l - shared).collect();
    let feasible = residuals.iter().all(|&r| r >= -tol);
    Feasibility { feasible, residuals }
}

/// Mean overlapped saving across ranks: how much serialized communication
/// time the overlap in the per-rank cost hides. Diagnostic only.
pub fn overlap_gain(breakdown: &DacpCostBreakdown) -> f64 {
    let n = breakdown.local_comp_time.len();
    if n == 0 {
        return 0.0;
    }
    breakdown
        .local_comp_time
        .iter()
        .map(|&l| breakdown.comm_time.min(l))
        .sum::<f64>()
        / n as f64
}

/// Flat wire format of one placed and scored micro-batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub assignment: Vec<i32>,
    pub tdacp: f64,
    pub per_rank_time: Vec<f64>,
    pub feasible: bool,
}

impl ScheduleReport {
    pub fn new(schedule: &DacpSchedule, breakdown: &DacpCostBreakdown) -> Self {
        Self {
            assignment: schedule.assignment.clone(),
            tdacp: breakdown.tdacp,
            per_rank_time: breakdown.per_rank_time.clone(),
            feasible: breakdown.feasible,
        }
    }
}

/// Running capacity and load bookkeeping during scheduling.
#[derive(Debug, Clone)]
pub struct SchedulerState {
    /// Residual token capacity per rank.
    pub remain_bucket: Vec<f64>,
    /// Accumulated FLOPs per rank.
    pub loads: Vec<f64>,
}

impl SchedulerState {
    pub fn new(cp_degree: usize, bucket_tokens: u64) -> Self {
        Self {
            remain_bucket: vec![bucket_tokens as f64; cp_degree],
            loads: vec![0.0; cp_degree],
        }
    }

    fn argmin_loads(&self) -> usize {
        argmin(&self.loads)
    }

    fn argmax_bucket(&self) -> usize {
        argmax(&self.remain_bucket)
    }

    fn argmin_bucket(&self) -> usize {
        argmin(&self.remain_bucket)
    }

    fn place_local(&mut self, rank: usize, len: u64, flops_val: f64) {
        self.remain_bucket[rank] -= len as f64;
        self.loads[rank] += flops_val;
    }

    fn place_distributed(&mut self, len: u64, flops_val: f64) {
        let n = self.remain_bucket.len() as f64;
        for rb in &mut self.remain_bucket {
            *rb -= len as f64 / n;
        }
        for l in &mut self.loads {
            *l += flops_val / n;
        }
    }

    /// Reverts one local placement on `rank` into a distributed one:
    /// restores the rank's bucket by the full length, then charges every
    /// rank an even share of tokens and FLOPs.
    fn demote_to_distributed(&mut self, rank: usize, len: u64, flops_val: f64, track_loads: bool) {
        let n = self.remain_bucket.len() as f64;
        self.remain_bucket[rank] += len as f64;
        for rb in &mut self.remain_bucket {
            *rb -= len as f64 / n;
        }
        if track_loads {
            self.loads[rank] -= flops_val;
            for l in &mut self.loads {
                *l += flops_val / n;
            }
        }
    }
}

/// Lowest index wins ties.
fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Shared roll-back step: demote the first local sequence on `rank` (in
/// `scan` order) to distributed. Returns the demoted position, or None when
/// the rank holds no local sequence.
pub(crate) fn roll_back_on_rank(
    rank: usize,
    scan: &[usize],
    lengths: &[u64],
    assignment: &mut [i32],
    state: &mut SchedulerState,
    cost: Option<&CostModel>,
) -> Option<usize> {
    for &pos in scan {
        if assignment[pos] == rank as i32 {
            assignment[pos] = DISTRIBUTED;
            let flops_val = cost.map_or(0.0, |c| flops(lengths[pos], &c.model, 1));
            state.demote_to_distributed(rank, lengths[pos], flops_val, cost.is_some());
            return Some(pos);
        }
    }
    None
}

/// Keeps demoting local sequences on overflowing ranks until every bucket is
/// nonnegative again. A single demotion charges every rank a `1/N` token
/// share, which can push *another* nearly-full rank over its bucket; without
/// this sweep a scheduler could terminate with a rank silently over
/// capacity.
pub(crate) fn roll_back_until_sound(
    scan: &[usize],
    lengths: &[u64],
    assignment: &mut [i32],
    state: &mut SchedulerState,
    cost: Option<&CostModel>,
    tol: f64,
) -> Result<(), ScheduleError> {
    loop {
        let worst = state.argmin_bucket();
        if state.remain_bucket[worst] >= -tol {
            return Ok(());
        }
        if roll_back_on_rank(worst, scan, lengths, assignment, state, cost).is_none() {
            return Err(ScheduleError::RollbackExhausted { rank: worst });
        }
    }
}

/// Greedy distribution-aware placement of one micro-batch.
///
/// Sequences are visited shortest-first. Each one goes, in order of
/// preference, to: the minimum-load rank if its bucket fits the whole
/// sequence; the maximum-residual rank if that fits; or it is sharded if
/// every rank can absorb `S/N` tokens. When even sharding does not fit, one
/// earlier local placement on the fullest rank is demoted to distributed
/// and the sequence is retried. Demotion fails (a scheduling error) when
/// the fullest rank holds no local sequence; with `rollback_enabled` off
/// the first demotion attempt is an error instead, which reproduces the
/// out-of-memory behavior of capacity-oblivious placement.
pub fn schedule_dacp(
    lengths: &[u64],
    cluster: &ClusterConfig,
    cost: &CostModel,
    rollback_enabled: bool,
) -> Result<DacpSchedule, ScheduleError> {
    let n = cluster.cp_degree;
    assert!(n >= 1, "need at least one CP rank");
    let tol = capacity_tolerance(cluster.bucket_tokens);

    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));

    let mut assignment = vec![DISTRIBUTED; lengths.len()];
    let mut state = SchedulerState::new(n, cluster.bucket_tokens);

    let mut pos = 0;
    while pos < order.len() {
        let idx = order[pos];
        let len = lengths[idx];
        let len_f = len as f64;
        let flops_val = flops(len, &cost.model, 1);

        let by_load = state.argmin_loads();
        if state.remain_bucket[by_load] + tol >= len_f {
            assignment[idx] = by_load as i32;
            state.place_local(by_load, len, flops_val);
            pos += 1;
            continue;
        }

        let by_room = state.argmax_bucket();
        if state.remain_bucket[by_room] + tol >= len_f {
            assignment[idx] = by_room as i32;
            state.place_local(by_room, len, flops_val);
            pos += 1;
            continue;
        }

        let tightest = state.argmin_bucket();
        if state.remain_bucket[tightest] + tol >= len_f / n as f64 {
            assignment[idx] = DISTRIBUTED;
            state.place_distributed(len, flops_val);
            pos += 1;
            continue;
        }

        if !rollback_enabled {
            return Err(ScheduleError::RollbackDisabled { seq_len: len });
        }
        // Only already-placed positions are eligible victims.
        let placed = &order[..pos];
        if roll_back_on_rank(tightest, placed, lengths, &mut assignment, &mut state, Some(cost))
            .is_none()
        {
            return Err(ScheduleError::RollbackExhausted { rank: tightest });
        }
        roll_back_until_sound(placed, lengths, &mut assignment, &mut state, Some(cost), tol)?;
        // retry the same sequence
    }

    let schedule = DacpSchedule::new(assignment);
    debug_assert!(check_feasible(lengths, &schedule, cluster).feasible);
    Ok(schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost_model::ModelConfig;

    fn toy_cost() -> CostModel {
        CostModel::identity(ModelConfig::toy())
    }

    fn cluster(n: usize, c: u64) -> ClusterConfig {
        ClusterConfig::new(n, 1, c, 1)
    }

    #[test]
    fn eval_single_local_sequence() {
        let b = eval_tdacp(&[4], &DacpSchedule::new(vec![0]), &cluster(2, 100), &toy_cost());
        assert_eq!(b.tdacp, 160.0);
        assert_eq!(b.comm_time, 0.0);
        assert!(b.feasible);
    }

    #[test]
    fn eval_mixed_micro_batch() {
        // one sharded 4-token sequence overlapping with one local 2-token
        // sequence per rank
        let b = eval_tdacp(
            &[4, 2, 2],
            &DacpSchedule::new(vec![DISTRIBUTED, 0, 1]),
            &cluster(2, 100),
            &toy_cost(),
        );
        assert_eq!(b.comm_time, 4.0);
        assert_eq!(b.dist_comp_time, 80.0);
        assert_eq!(b.local_comp_time, vec![64.0, 64.0]);
        assert_eq!(b.per_rank_time, vec![144.0, 144.0]);
        assert_eq!(b.tdacp, 144.0);
    }

    #[test]
    fn eval_all_distributed() {
        let b = eval_tdacp(
            &[4],
            &DacpSchedule::new(vec![DISTRIBUTED]),
            &cluster(2, 100),
            &toy_cost(),
        );
        assert_eq!(b.tdacp, 84.0); // max(comm 4, local 0) + dist 80
    }

    #[test]
    fn eval_flags_infeasible_schedules() {
        let b = eval_tdacp(&[150], &DacpSchedule::new(vec![0]), &cluster(2, 100), &toy_cost());
        assert!(!b.feasible);
        assert!(b.tdacp > 0.0);
    }

    #[test]
    fn feasibility_examples() {
        let f = check_feasible(
            &[60, 60, 60],
            &DacpSchedule::new(vec![0, 1, DISTRIBUTED]),
            &cluster(2, 100),
        );
        assert!(f.feasible);
        assert_eq!(f.residuals, vec![10.0, 10.0]);

        let f = check_feasible(&[150], &DacpSchedule::new(vec![0]), &cluster(2, 100));
        assert!(!f.feasible);
        assert!(f.residuals[0] < 0.0);
        assert_eq!(f.residuals[1], 100.0);

        let f = check_feasible(&[], &DacpSchedule::new(vec![]), &cluster(2, 100));
        assert!(f.feasible);
        assert_eq!(f.residuals, vec![100.0, 100.0]);
    }

    #[test]
    fn schedules_single_sequence_to_lowest_rank() {
        let s = schedule_dacp(&[10], &cluster(2, 100), &toy_cost(), true).unwrap();
        assert_eq!(s.assignment, vec![0]);
    }

    #[test]
    fn shards_third_sequence_when_buckets_tighten() {
        let s = schedule_dacp(&[60, 60, 60], &cluster(2, 100), &toy_cost(), true).unwrap();
        assert_eq!(s.assignment, vec![0, 1, DISTRIBUTED]);
    }

    #[test]
    fn rolls_back_to_all_distributed_on_tight_instance() {
        let lengths = [50, 60, 90];
        let cl = cluster(2, 100);
        let s = schedule_dacp(&lengths, &cl, &toy_cost(), true).unwrap();
        assert_eq!(s.assignment, vec![DISTRIBUTED; 3]);
        let f = check_feasible(&lengths, &s, &cl);
        assert!(f.feasible);
        assert_eq!(f.residuals, vec![0.0, 0.0]);
    }

    #[test]
    fn tight_instance_errors_without_rollback() {
        let err = schedule_dacp(&[50, 60, 90], &cluster(2, 100), &toy_cost(), false).unwrap_err();
        assert!(matches!(err, ScheduleError::RollbackDisabled { .. }));
    }

    #[test]
    fn errors_when_rollback_has_no_victim() {
        // a single sequence that cannot fit even sharded
        let err = schedule_dacp(&[300], &cluster(2, 100), &toy_cost(), true).unwrap_err();
        assert!(matches!(err, ScheduleError::RollbackExhausted { .. }));
    }

    #[test]
    fn equal_lengths_balance_perfectly() {
        let lengths = vec![10u64; 8];
        let cl = cluster(4, 100);
        let cost = toy_cost();
        let s = schedule_dacp(&lengths, &cl, &cost, true).unwrap();
        assert_eq!(s.distributed_count(), 0);
        let mut per_rank = vec![0usize; 4];
        for &a in &s.assignment {
            per_rank[a as usize] += 1;
        }
        assert_eq!(per_rank, vec![2, 2, 2, 2]);
        let b = eval_tdacp(&lengths, &s, &cl, &cost);
        assert_eq!(b.tdacp, 2.0 * flops(10, &cost.model, 1));
    }

    #[test]
    fn scheduling_is_deterministic() {
        let lengths = [17, 3, 99, 45, 45, 3, 8];
        let cl = cluster(4, 120);
        let a = schedule_dacp(&lengths, &cl, &toy_cost(), true).unwrap();
        let b = schedule_dacp(&lengths, &cl, &toy_cost(), true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_micro_batch_is_trivially_schedulable() {
        let s = schedule_dacp(&[], &cluster(2, 100), &toy_cost(), true).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn overlap_gain_examples() {
        let mk = |comm: f64, local: Vec<f64>| DacpCostBreakdown {
            per_rank_time: local.iter().map(|&l| comm.max(l)).collect(),
            comm_time: comm,
            dist_comp_time: 0.0,
            local_comp_time: local,
            tdacp: 0.0,
            feasible: true,
        };
        assert_eq!(overlap_gain(&mk(0.0, vec![64.0, 64.0])), 0.0);
        assert_eq!(overlap_gain(&mk(4.0, vec![64.0, 64.0])), 4.0);
        assert_eq!(overlap_gain(&mk(64.0, vec![64.0, 64.0])), 64.0);
    }

    #[test]
    fn schedule_serializes_with_assignment_key() {
        let s = DacpSchedule::new(vec![DISTRIBUTED, 0, 1]);
        assert_eq!(serde_json::to_string(&s).unwrap(), r#"{"assignment":[-1,0,1]}"#);
    }
}
