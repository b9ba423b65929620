//! Command-line front end: fit cost models, generate traces, plan single
//! batches, replay simulations, and run the exhaustive oracle.

use std::error::Error;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use skrull::cost_model::{
    bucket_size, fit_linear, load_profile_csv, scale_sizes_mb_to_bytes, CostModel, FitUnits,
    LinearFit, ModelConfig, MIB_BYTES, PRESET_MEM_INTERCEPT, PRESET_MEM_SLOPE,
};
use skrull::dacp::{eval_tdacp, schedule_dacp, ClusterConfig, DacpCostBreakdown, ScheduleReport};
use skrull::gds::{eval_iteration, IterationPlan};
use skrull::oracle::{heuristic_gap, optimal_dacp, GapInstanceSpec, OracleLimits};
use skrull::simulator::{
    ablate_rollback, emit_report, plan_batch, simulate, ReportFormat, SchedulerKind, SimConfig,
};
use skrull::workload::{
    generate, load_trace, quantiles, sample_global_batch, save_trace, DistributionSpec,
};

#[derive(Parser)]
#[command(
    name = "skrull",
    version,
    about = "Data scheduler and iteration-time simulator for mixed-length sequence training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a cost model from profile CSVs and write it as JSON
    Fit(FitArgs),
    /// Generate a synthetic length trace
    Gen(GenArgs),
    /// Plan one global batch and print the plan with cost breakdowns
    Schedule(ScheduleArgs),
    /// Replay many iterations under the configured schedulers
    Simulate(SimulateArgs),
    /// Exhaustively solve a small instance and bound the heuristic gap
    Oracle(OracleArgs),
}

#[derive(Args)]
struct ClusterArgs {
    /// Data-parallel world size
    #[arg(long, default_value_t = 4)]
    dp: usize,
    /// Context-parallel group size
    #[arg(long, default_value_t = 8)]
    cp: usize,
    /// Per-rank token capacity
    #[arg(long, default_value_t = 26_000)]
    bucket_tokens: u64,
    /// Sequences per DP rank per iteration
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

impl ClusterArgs {
    fn cluster(&self) -> ClusterConfig {
        ClusterConfig::new(self.cp, self.dp, self.bucket_tokens, self.batch_size)
    }
}

#[derive(Args)]
struct CostArgs {
    /// Cost model JSON produced by `fit`; defaults to the built-in preset
    #[arg(long)]
    cost_model: Option<PathBuf>,
    /// Hidden dimension for the preset cost model
    #[arg(long, default_value_t = 896)]
    hidden: u64,
    /// Key/value hidden dimension for the preset cost model
    #[arg(long, default_value_t = 128)]
    kv_hidden: u64,
    /// Multiplier on sharded-sequence compute (1.0 disables, 1.2 realistic)
    #[arg(long, default_value_t = 1.0)]
    shard_penalty: f64,
}

impl CostArgs {
    fn load(&self) -> Result<CostModel, Box<dyn Error>> {
        match &self.cost_model {
            Some(path) => {
                let json = std::fs::read_to_string(path)?;
                Ok(CostModel::from_json(&json)?)
            }
            None => Ok(CostModel::fitted_preset(
                ModelConfig::new(self.hidden, self.kv_hidden, 1)?,
                self.shard_penalty,
            )),
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Collective latency profile CSV (`size,latency`, size in MB, us)
    #[arg(long)]
    comm_csv: PathBuf,
    /// Activation memory profile CSV (`size,latency`, size in tokens, bytes)
    #[arg(long)]
    mem_csv: Option<PathBuf>,
    /// Fit only communication rows at or above this size
    #[arg(long, default_value_t = 16.0)]
    threshold_mb: f64,
    #[arg(long, default_value_t = 896)]
    hidden: u64,
    #[arg(long, default_value_t = 128)]
    kv_hidden: u64,
    #[arg(long, default_value_t = 1)]
    pack_batch: u64,
    /// Compute fit: microseconds per FLOP
    #[arg(long, default_value_t = skrull::cost_model::PRESET_COMP_SLOPE)]
    comp_slope: f64,
    /// Compute fit: fixed microseconds per launch
    #[arg(long, default_value_t = skrull::cost_model::PRESET_COMP_INTERCEPT)]
    comp_intercept: f64,
    /// Bytes per communicated element
    #[arg(long, default_value_t = 2.0)]
    bytes_per_elem: f64,
    #[arg(long, default_value_t = 1.0)]
    shard_penalty: f64,
    /// Report the token capacity this memory budget (bytes) buys
    #[arg(long)]
    mem_budget: Option<f64>,
    /// Output path for the cost model JSON; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    /// Distribution preset: wikipedia|lmsys|chatqa2
    #[arg(long, default_value = "wikipedia")]
    dist: String,
    /// Number of lengths to draw
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Write a JSON array instead of newline-delimited integers
    #[arg(long)]
    json: bool,
    /// Output trace path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Trace file holding the global batch (newline ints or JSON array)
    #[arg(long, conflicts_with = "dist")]
    trace: Option<PathBuf>,
    /// Distribution preset to sample the batch from instead of a file
    #[arg(long)]
    dist: Option<String>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Which sampled iteration's batch to plan
    #[arg(long, default_value_t = 0)]
    iteration: usize,
    #[arg(long, default_value = "skrull")]
    scheduler: String,
    #[arg(long)]
    no_rollback: bool,
    #[command(flatten)]
    cluster: ClusterArgs,
    #[command(flatten)]
    cost: CostArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Full simulation config as JSON; other flags are ignored when set
    #[arg(long)]
    config: Option<PathBuf>,
    /// Distribution preset: wikipedia|lmsys|chatqa2
    #[arg(long, default_value = "wikipedia", conflicts_with = "trace")]
    dist: String,
    /// Trace file to sample batches from instead of a preset
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Lengths drawn from the preset to form the sampled corpus
    #[arg(long, default_value_t = 100_000)]
    trace_len: usize,
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Comma-separated scheduler list
    #[arg(long, default_value = "skrull,skrull-dacp-only,rr,full-shard,sorted")]
    scheduler: String,
    #[arg(long)]
    no_rollback: bool,
    #[command(flatten)]
    cluster: ClusterArgs,
    #[command(flatten)]
    cost: CostArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report encoding: json|csv
    #[arg(long, default_value = "json")]
    format: String,
}

#[derive(Args)]
struct OracleArgs {
    /// Comma-separated instance lengths, e.g. 50,60,90
    #[arg(long, conflicts_with = "trace")]
    lengths: Option<String>,
    /// Trace file holding the instance
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    cp: usize,
    #[arg(long, default_value_t = 100)]
    bucket_tokens: u64,
    #[arg(long, default_value_t = 10)]
    max_k: usize,
    #[arg(long, default_value_t = 10_000_000)]
    max_states: u64,
    /// Also run this many random instances through heuristic and oracle
    #[arg(long, default_value_t = 0)]
    gap_trials: usize,
    /// Distribution preset for gap instances
    #[arg(long, default_value = "wikipedia")]
    dist: String,
    #[arg(long, default_value_t = 1)]
    gap_min_k: usize,
    #[arg(long, default_value_t = 8)]
    gap_max_k: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[command(flatten)]
    cost: CostArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// One planned global batch with embedded placements and cost breakdowns.
#[derive(Serialize)]
struct PlanReport {
    scheduler: String,
    rollback: bool,
    iteration_time: f64,
    per_dp_time: Vec<f64>,
    global_lengths: Vec<u64>,
    per_dp: Vec<Vec<Vec<usize>>>,
    schedules: Vec<Vec<skrull::dacp::DacpSchedule>>,
    breakdowns: Vec<Vec<DacpCostBreakdown>>,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        let mut source = e.source();
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        std::process::exit(1);
    }
}

fn run() -> Result<(), Box<dyn Error>> {
    match Cli::parse().command {
        Command::Fit(args) => run_fit(args),
        Command::Gen(args) => run_gen(args),
        Command::Schedule(args) => run_schedule(args),
        Command::Simulate(args) => run_simulate(args),
        Command::Oracle(args) => run_oracle(args),
    }
}

fn parse_dist(name: &str) -> Result<DistributionSpec, Box<dyn Error>> {
    DistributionSpec::preset(name)
        .ok_or_else(|| format!("unknown preset {name:?}; expected wikipedia|lmsys|chatqa2").into())
}

fn parse_schedulers(list: &str) -> Result<Vec<SchedulerKind>, Box<dyn Error>> {
    list.split(',')
        .map(|s| s.trim().parse::<SchedulerKind>().map_err(Into::into))
        .collect()
}

fn write_out(text: &str, out: Option<&Path>) -> Result<(), Box<dyn Error>> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => println!("{}", text.trim_end()),
    }
    Ok(())
}

fn run_fit(args: FitArgs) -> Result<(), Box<dyn Error>> {
    let comm_points = scale_sizes_mb_to_bytes(&load_profile_csv(&args.comm_csv)?);
    let comm_fit = fit_linear(
        &comm_points,
        args.threshold_mb * MIB_BYTES,
        FitUnits::TimePerByte,
    )?;
    let mem_fit = match &args.mem_csv {
        Some(path) => fit_linear(&load_profile_csv(path)?, 0.0, FitUnits::MemoryPerToken)?,
        None => LinearFit::new(PRESET_MEM_SLOPE, PRESET_MEM_INTERCEPT, FitUnits::MemoryPerToken),
    };
    let model = ModelConfig::new(args.hidden, args.kv_hidden, args.pack_batch)?;
    let cost = CostModel::new(
        model,
        LinearFit::new(args.comp_slope, args.comp_intercept, FitUnits::TimePerFlop),
        comm_fit,
        mem_fit,
        args.bytes_per_elem,
        args.shard_penalty,
    )?;
    if let Some(budget) = args.mem_budget {
        eprintln!("bucket size for budget {budget}: {} tokens", bucket_size(budget, &cost.mem_fit)?);
    }
    write_out(&cost.to_json()?, args.out.as_deref())
}

fn run_gen(args: GenArgs) -> Result<(), Box<dyn Error>> {
    let spec = parse_dist(&args.dist)?;
    let trace = generate(&spec, args.n, args.seed)?;
    save_trace(&trace, &args.out, args.json)?;
    let report = quantiles(&trace, &[1_000, 4_000, 8_000, 32_000, 128_000]);
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn load_batch(args: &ScheduleArgs) -> Result<Vec<u64>, Box<dyn Error>> {
    if let Some(path) = &args.trace {
        return Ok(load_trace(path)?.lengths);
    }
    let name = args.dist.as_deref().unwrap_or("wikipedia");
    let trace = generate(&parse_dist(name)?, 100_000, args.seed)?;
    let cluster = args.cluster.cluster();
    Ok(sample_global_batch(&trace, cluster.global_batch(), args.seed, args.iteration)?)
}

fn run_schedule(args: ScheduleArgs) -> Result<(), Box<dyn Error>> {
    let batch = load_batch(&args)?;
    let cluster = args.cluster.cluster();
    let cost = args.cost.load()?;
    let kind: SchedulerKind = args.scheduler.parse()?;
    let rollback = !args.no_rollback;
    let plan = plan_batch(kind, &batch, &cluster, &cost, rollback, args.seed)?;
    let report = plan_to_report(kind, rollback, plan, &cluster, &cost);
    write_out(&serde_json::to_string_pretty(&report)?, args.out.as_deref())
}

fn plan_to_report(
    kind: SchedulerKind,
    rollback: bool,
    plan: IterationPlan,
    cluster: &ClusterConfig,
    cost: &CostModel,
) -> PlanReport {
    let iteration = eval_iteration(&plan, cluster, cost);
    let breakdowns: Vec<Vec<DacpCostBreakdown>> = plan
        .per_dp
        .iter()
        .enumerate()
        .map(|(i, mbs)| {
            (0..mbs.len())
                .map(|j| {
                    let lengths = plan.micro_batch_lengths(i, j);
                    eval_tdacp(&lengths, &plan.schedules[i][j], cluster, cost)
                })
                .collect()
        })
        .collect();
    PlanReport {
        scheduler: kind.name().to_string(),
        rollback,
        iteration_time: iteration.iteration_time,
        per_dp_time: iteration.per_dp_time,
        global_lengths: plan.global_lengths,
        per_dp: plan.per_dp,
        schedules: plan.schedules,
        breakdowns,
    }
}

fn run_simulate(args: SimulateArgs) -> Result<(), Box<dyn Error>> {
    let config = match &args.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => {
            let dist = match &args.trace {
                Some(path) => DistributionSpec::File { path: path.display().to_string() },
                None => parse_dist(&args.dist)?,
            };
            SimConfig {
                cluster: args.cluster.cluster(),
                cost: args.cost.load()?,
                dist,
                iterations: args.iterations,
                seed: args.seed,
                schedulers: parse_schedulers(&args.scheduler)?,
                rollback: !args.no_rollback,
                trace_len: args.trace_len,
            }
        }
    };
    let report = simulate(&config)?;
    let format: ReportFormat = args.format.parse()?;
    match &args.out {
        Some(path) => {
            let mut file = std::fs::File::create(path)?;
            emit_report(&report, format, &mut file)?;
        }
        None => {
            let mut stdout = std::io::stdout();
            emit_report(&report, format, &mut stdout)?;
        }
    }
    // roll-back ablation rows are cheap and often wanted alongside a run
    if config.schedulers.contains(&SchedulerKind::Skrull) && config.iterations <= 10 {
        let rows = ablate_rollback(&config)?;
        eprintln!("{}", serde_json::to_string(&rows)?);
    }
    Ok(())
}

#[derive(Serialize)]
struct OracleReport {
    oracle: Option<ScheduleReport>,
    oracle_error: Option<String>,
    feasible_count: Option<u64>,
    explored: Option<u64>,
    heuristic: Option<ScheduleReport>,
    heuristic_error: Option<String>,
    time_ratio: Option<f64>,
    gap: Option<skrull::oracle::GapStats>,
}

fn run_oracle(args: OracleArgs) -> Result<(), Box<dyn Error>> {
    let lengths: Vec<u64> = if let Some(path) = &args.trace {
        load_trace(path)?.lengths
    } else if let Some(list) = &args.lengths {
        list.split(',')
            .map(|s| s.trim().parse::<u64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("bad --lengths entry: {e}"))?
    } else {
        return Err("provide --lengths or --trace".into());
    };

    let cluster = ClusterConfig::new(args.cp, 1, args.bucket_tokens, lengths.len().max(1));
    let cost = args.cost.load()?;
    let limits = OracleLimits { max_k: args.max_k, max_states: args.max_states };

    let oracle = optimal_dacp(&lengths, &cluster, &cost, &limits);
    let heuristic = schedule_dacp(&lengths, &cluster, &cost, true);

    let (oracle_report, oracle_error, feasible_count, explored) = match &oracle {
        Ok(r) => {
            let b = eval_tdacp(&lengths, &r.best_schedule, &cluster, &cost);
            (Some(ScheduleReport::new(&r.best_schedule, &b)), None, Some(r.feasible_count), Some(r.explored))
        }
        Err(e) => (None, Some(e.to_string()), None, None),
    };
    let (heuristic_report, heuristic_error) = match &heuristic {
        Ok(s) => {
            let b = eval_tdacp(&lengths, s, &cluster, &cost);
            (Some(ScheduleReport::new(s, &b)), None)
        }
        Err(e) => (None, Some(e.to_string())),
    };
    let time_ratio = match (&oracle_report, &heuristic_report) {
        (Some(o), Some(h)) if o.tdacp > 0.0 => Some(h.tdacp / o.tdacp),
        _ => None,
    };

    let gap = if args.gap_trials > 0 {
        let spec = GapInstanceSpec {
            dist: parse_dist(&args.dist)?,
            min_k: args.gap_min_k,
            max_k: args.gap_max_k,
        };
        Some(heuristic_gap(args.gap_trials, &spec, &cluster, &cost, args.seed))
    } else {
        None
    };

    let report = OracleReport {
        oracle: oracle_report,
        oracle_error,
        feasible_count,
        explored,
        heuristic: heuristic_report,
        heuristic_error,
        time_ratio,
        gap,
    };
    write_out(&serde_json::to_string_pretty(&report)?, args.out.as_deref())
}
