//! Exhaustive-search reference optima for small instances, used to bound
//! how far the greedy schedulers land from the true minimum.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cost_model::{comm_volume, flops, CostModel};
use crate::dacp::{check_feasible, eval_tdacp, schedule_dacp, ClusterConfig, DacpSchedule, DISTRIBUTED};
use crate::error::OracleError;
use crate::workload::{generate, seeded_rng, DistributionSpec};
use rand::Rng;

/// Caps on the enumeration so callers cannot accidentally request an
/// astronomically large search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleLimits {
    pub max_k: usize,
    pub max_states: u64,
}

impl Default for OracleLimits {
    fn default() -> Self {
        Self { max_k: 10, max_states: 10_000_000 }
    }
}

/// Outcome of the exhaustive placement search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub best_schedule: DacpSchedule,
    pub best_tdacp: f64,
    pub feasible_count: u64,
    pub explored: u64,
}

/// Enumerates every placement of `lengths` over `{distributed} ∪ ranks`,
/// filters by the per-rank token capacity, and returns the minimizer of the
/// micro-batch evaluation. Ties break toward the lexicographically smallest
/// assignment (distributed sorts before rank 0).
pub fn optimal_dacp(
    lengths: &[u64],
    cluster: &ClusterConfig,
    cost: &CostModel,
    limits: &OracleLimits,
) -> Result<OracleResult, OracleError> {
    let k = lengths.len();
    if k == 0 {
        return Ok(OracleResult {
            best_schedule: DacpSchedule::new(vec![]),
            best_tdacp: 0.0,
            feasible_count: 1,
            explored: 1,
        });
    }
    if k > limits.max_k {
        return Err(OracleError::TooManySequences { k, max_k: limits.max_k });
    }
    let n = cluster.cp_degree;
    let states = (n as u128 + 1).pow(k as u32);
    if states > limits.max_states as u128 {
        return Err(OracleError::TooManyStates { states, max_states: limits.max_states });
    }

    let flops_k: Vec<f64> = lengths.iter().map(|&l| flops(l, &cost.model, 1)).collect();
    let capacity = cluster.bucket_tokens as f64;
    let tol = 1e-9 * capacity.max(1.0);

    // digits in base n+1: 0 encodes distributed, d encodes rank d-1;
    // counting up enumerates assignments in lexicographic order
    let mut digits = vec![0u32; k];
    let mut local_flops = vec![0.0f64; n];
    let mut local_tokens = vec![0.0f64; n];

    let mut best: Option<(f64, Vec<i32>)> = None;
    let mut feasible_count = 0u64;
    let mut explored = 0u64;

    loop {
        explored += 1;

        local_flops.iter_mut().for_each(|f| *f = 0.0);
        local_tokens.iter_mut().for_each(|t| *t = 0.0);
        let mut dist_flops = 0.0f64;
        let mut dist_tokens = 0u64;
        for (i, &d) in digits.iter().enumerate() {
            if d == 0 {
                dist_flops += flops_k[i];
                dist_tokens += lengths[i];
            } else {
                local_flops[d as usize - 1] += flops_k[i];
                local_tokens[d as usize - 1] += lengths[i] as f64;
            }
        }

        let shared = dist_tokens as f64 / n as f64;
        if local_tokens.iter().all(|&t| t + shared <= capacity + tol) {
            feasible_count += 1;
            let comm = cost.comm_time(comm_volume(dist_tokens, &cost.model));
            let dist_comp = cost.comp_time(dist_flops / n as f64 * cost.shard_penalty);
            let tdacp = local_flops
                .iter()
                .map(|&f| comm.max(cost.comp_time(f)) + dist_comp)
                .fold(0.0, f64::max);
            if best.as_ref().is_none_or(|(b, _)| tdacp < *b) {
                let assignment: Vec<i32> =
                    digits.iter().map(|&d| if d == 0 { DISTRIBUTED } else { d as i32 - 1 }).collect();
                best = Some((tdacp, assignment));
            }
        }

        // increment the base-(n+1) counter
        let mut pos = k;
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] <= n as u32 {
                break;
            }
            digits[pos] = 0;
        }
        if digits.iter().all(|&d| d == 0) {
            break;
        }
    }

    match best {
        None => Err(OracleError::Infeasible),
        Some((_, assignment)) => {
            let best_schedule = DacpSchedule::new(assignment);
            // score through the shared evaluator so the reported value is
            // bit-identical to what callers compute
            let best_tdacp = eval_tdacp(lengths, &best_schedule, cluster, cost).tdacp;
            debug_assert!(check_feasible(lengths, &best_schedule, cluster).feasible);
            Ok(OracleResult { best_schedule, best_tdacp, feasible_count, explored })
        }
    }
}

/// Joint optimum for a single DP rank: minimize the summed micro-batch times
/// over every partition of the batch into micro-batches, with each
/// micro-batch placed optimally. Larger DP worlds explode combinatorially
/// and are out of reach for exhaustive search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointOracleResult {
    pub micro_batches: Vec<Vec<usize>>,
    pub schedules: Vec<DacpSchedule>,
    pub iteration_time: f64,
}

pub fn optimal_iteration(
    lengths: &[u64],
    cluster: &ClusterConfig,
    cost: &CostModel,
    limits: &OracleLimits,
) -> Result<JointOracleResult, OracleError> {
    if cluster.dp_worldsize != 1 {
        return Err(OracleError::UnsupportedWorldSize(cluster.dp_worldsize));
    }
    let k = lengths.len();
    if k == 0 {
        return Ok(JointOracleResult {
            micro_batches: vec![],
            schedules: vec![],
            iteration_time: 0.0,
        });
    }
    if k > limits.max_k.min(8) {
        return Err(OracleError::TooManySequences { k, max_k: limits.max_k.min(8) });
    }

    let budget = cluster.micro_batch_capacity();
    let mut block_cache: HashMap<u32, Option<(f64, DacpSchedule)>> = HashMap::new();
    let mut block_cost = |mask: u32| -> Option<(f64, DacpSchedule)> {
        block_cache
            .entry(mask)
            .or_insert_with(|| {
                let idxs: Vec<usize> = (0..k).filter(|&i| mask & (1 << i) != 0).collect();
                let block: Vec<u64> = idxs.iter().map(|&i| lengths[i]).collect();
                if block.iter().sum::<u64>() as f64 > budget {
                    return None;
                }
                optimal_dacp(&block, cluster, cost, limits)
                    .ok()
                    .map(|r| (r.best_tdacp, r.best_schedule))
            })
            .clone()
    };

    // grow partitions item by item: each sequence joins an existing block or
    // opens a new one
    let mut best: Option<(f64, Vec<u32>)> = None;
    let mut blocks: Vec<u32> = Vec::new();
    let mut partitions: Vec<Vec<u32>> = Vec::new();
    collect_partitions(0, k, &mut blocks, &mut partitions);

    for partition in partitions {
        let mut total = 0.0;
        let mut ok = true;
        for &mask in &partition {
            match block_cost(mask) {
                Some((t, _)) => total += t,
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok && best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, partition));
        }
    }

    match best {
        None => Err(OracleError::Infeasible),
        Some((iteration_time, partition)) => {
            let mut micro_batches = Vec::new();
            let mut schedules = Vec::new();
            for &mask in &partition {
                let idxs: Vec<usize> = (0..k).filter(|&i| mask & (1 << i) != 0).collect();
                let (_, sched) = block_cost(mask).expect("feasible block");
                micro_batches.push(idxs);
                schedules.push(sched);
            }
            Ok(JointOracleResult { micro_batches, schedules, iteration_time })
        }
    }
}

fn collect_partitions(i: usize, k: usize, blocks: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if i == k {
        out.push(blocks.clone());
        return;
    }
    for b in 0..blocks.len() {
        blocks[b] |= 1 << i;
        collect_partitions(i + 1, k, blocks, out);
        blocks[b] &= !(1 << i);
    }
    blocks.push(1 << i);
    collect_partitions(i + 1, k, blocks, out);
    blocks.pop();
}

/// Random-instance family for the heuristic-vs-oracle comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapInstanceSpec {
    pub dist: DistributionSpec,
    pub min_k: usize,
    pub max_k: usize,
}

/// Aggregate comparison of the greedy scheduler against the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub trials: usize,
    /// Instances where both heuristic and oracle produced a schedule.
    pub compared: usize,
    pub median_ratio: Option<f64>,
    pub max_ratio: Option<f64>,
    /// Among instances where the heuristic errored, the fraction the oracle
    /// also proved infeasible. 1.0 when the heuristic never errored.
    pub feasibility_agreement: f64,
    pub heuristic_errors: usize,
    pub oracle_infeasible: usize,
    pub heuristic_error_oracle_feasible: usize,
}

/// Runs `trials` random instances through both the greedy scheduler and the
/// oracle and reports the time-ratio distribution plus feasibility
/// agreement.
pub fn heuristic_gap(
    trials: usize,
    spec: &GapInstanceSpec,
    cluster: &ClusterConfig,
    cost: &CostModel,
    seed: u64,
) -> GapStats {
    let mut ratios = Vec::new();
    let mut heuristic_errors = 0;
    let mut oracle_infeasible = 0;
    let mut heuristic_error_oracle_feasible = 0;
    let limits = OracleLimits::default();

    for trial in 0..trials {
        let mut rng = seeded_rng(seed, 0x6a70 + trial as u64);
        let k = rng.random_range(spec.min_k..=spec.max_k);
        let trace = generate(&spec.dist, k, rng.random::<u64>()).expect("valid instance spec");
        let lengths = trace.lengths;

        let heuristic = schedule_dacp(&lengths, cluster, cost, true);
        let oracle = optimal_dacp(&lengths, cluster, cost, &limits);

        match (&heuristic, &oracle) {
            (Ok(h), Ok(o)) => {
                let h_t = eval_tdacp(&lengths, h, cluster, cost).tdacp;
                if o.best_tdacp > 0.0 {
                    ratios.push(h_t / o.best_tdacp);
                }
            }
            (Err(_), Err(OracleError::Infeasible)) => {
                heuristic_errors += 1;
                oracle_infeasible += 1;
            }
            (Err(_), Ok(_)) => {
                heuristic_errors += 1;
                heuristic_error_oracle_feasible += 1;
            }
            (Ok(_), Err(OracleError::Infeasible)) => {
                // cannot happen: the scheduler's result is itself a witness
                oracle_infeasible += 1;
            }
            (_, Err(_)) => {}
        }
    }

    ratios.sort_by(f64::total_cmp);
    let median_ratio = match ratios.len() {
        0 => None,
        len if len % 2 == 1 => Some(ratios[len / 2]),
        len => Some((ratios[len / 2 - 1] + ratios[len / 2]) / 2.0),
    };
    let max_ratio = ratios.last().copied();
    let feasibility_agreement = if heuristic_errors == 0 {
        1.0
    } else {
        1.0 - heuristic_error_oracle_feasible as f64 / heuristic_errors as f64
    };

    GapStats {
        trials,
        compared: ratios.len(),
        median_ratio,
        max_ratio,
        feasibility_agreement,
        heuristic_errors,
        oracle_infeasible,
        heuristic_error_oracle_feasible,
    }
}
