//! Analytical performance models fit from offline profiling.
//!
//! Three linear models drive every scheduling decision in this crate:
//! compute latency as a function of estimated FLOPs, collective latency as a
//! function of communication volume, and activation memory as a function of
//! token count. The memory model is inverted once into a per-rank token
//! capacity (the bucket size) which all schedulers treat as the memory
//! constraint currency.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CostModelError, IngestError};

/// Bytes in one mebibyte; communication profile tables use MB sizes.
pub const MIB_BYTES: f64 = 1024.0 * 1024.0;

/// Profile of the collective used by context-parallel attention,
/// measured on the target fabric. Sizes in MB, latencies in microseconds.
pub const ALL_TO_ALL_PROFILE: &str = include_str!("../data/all_to_all.csv");

/// Compute-latency slope of the shipped preset, in microseconds per FLOP.
pub const PRESET_COMP_SLOPE: f64 = 2e-10;
/// Fixed per-launch compute overhead of the shipped preset, in microseconds.
pub const PRESET_COMP_INTERCEPT: f64 = 10.0;
/// Activation bytes per token of the shipped preset.
pub const PRESET_MEM_SLOPE: f64 = 18_000.0;
/// Fixed activation bytes of the shipped preset.
pub const PRESET_MEM_INTERCEPT: f64 = 5e8;
/// Messages below this size are dominated by fixed overhead and excluded
/// from the communication fit; the intercept absorbs them.
pub const PRESET_COMM_THRESHOLD_BYTES: f64 = 16.0 * MIB_BYTES;

/// Model dimensions that parameterize the FLOPs and volume estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden dimension.
    pub hidden: u64,
    /// Key/value hidden dimension.
    pub kv_hidden: u64,
    /// Batch size within a packed sequence, usually 1.
    pub pack_batch: u64,
}

impl ModelConfig {
    pub fn new(hidden: u64, kv_hidden: u64, pack_batch: u64) -> Result<Self, CostModelError> {
        let cfg = Self { hidden, kv_hidden, pack_batch };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CostModelError> {
        if self.hidden == 0 || self.kv_hidden == 0 || self.pack_batch == 0 {
            return Err(CostModelError::InvalidModel(
                "all dimensions must be at least 1".into(),
            ));
        }
        if self.kv_hidden > self.hidden {
            return Err(CostModelError::InvalidModel(format!(
                "kv_hidden {} exceeds hidden {}",
                self.kv_hidden, self.hidden
            )));
        }
        Ok(())
    }

    /// Unit dimensions (hidden = kv = batch = 1); FLOPs reduce to 24*S + 4*S^2.
    pub fn toy() -> Self {
        Self { hidden: 1, kv_hidden: 1, pack_batch: 1 }
    }

    /// Dimensions of a small production model, used by the shipped presets.
    pub fn small_llm() -> Self {
        Self { hidden: 896, kv_hidden: 128, pack_batch: 1 }
    }
}

/// What a [`LinearFit`]'s x-axis measures. Each fit role in a [`CostModel`]
/// requires the matching tag; mixing them up is a configuration error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitUnits {
    TimePerFlop,
    TimePerByte,
    MemoryPerToken,
}

/// A fitted line `y = slope * x + intercept` with nonnegative coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub units: FitUnits,
}

impl LinearFit {
    pub fn new(slope: f64, intercept: f64, units: FitUnits) -> Self {
        Self { slope, intercept, units }
    }

    /// Identity line (slope 1, intercept 0); test fixtures lean on this so
    /// predicted times equal raw FLOPs/volume values.
    pub fn identity(units: FitUnits) -> Self {
        Self { slope: 1.0, intercept: 0.0, units }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }

    fn expect_units(&self, expected: FitUnits) -> Result<(), CostModelError> {
        if self.units != expected {
            return Err(CostModelError::UnitMismatch { expected, found: self.units });
        }
        Ok(())
    }
}

/// One offline profiling observation: message size in bytes (or token count
/// for memory tables) against measured latency in microseconds (or bytes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub size: f64,
    pub latency: f64,
}

/// FLOPs estimate for one sequence, optionally split across `shards`
/// context-parallel ranks.
///
/// The single-shard estimate is `20*b*h^2*S + 4*b*h*h_kv*S + 4*b*h*S^2`:
/// linear projection terms plus the quadratic attention term. A sharded
/// sequence contributes an even `1/shards` of that to every rank.
pub fn flops(seq_len: u64, model: &ModelConfig, shards: u64) -> f64 {
    debug_assert!(shards >= 1);
    let s = seq_len as f64;
    let h = model.hidden as f64;
    let h_kv = model.kv_hidden as f64;
    let b = model.pack_batch as f64;
    let total = 20.0 * b * h * h * s + 4.0 * b * h * h_kv * s + 4.0 * b * h * s * s;
    total / shards as f64
}

/// Communication volume of sharding one sequence, in elements: `b * S * h_kv`.
/// Multiply by the cost model's bytes-per-element before applying a fit
/// expressed in bytes.
pub fn comm_volume(seq_len: u64, model: &ModelConfig) -> f64 {
    seq_len as f64 * model.kv_hidden as f64 * model.pack_batch as f64
}

/// Compute latency for a FLOPs value: `slope * flops + intercept`.
pub fn t_comp(flops_value: f64, fit: &LinearFit) -> Result<f64, CostModelError> {
    fit.expect_units(FitUnits::TimePerFlop)?;
    Ok(fit.eval(flops_value))
}

/// Collective latency for a communication volume.
///
/// Zero volume means no collective is issued at all, so the fixed overhead
/// does not apply and the result is exactly zero.
pub fn t_comm(volume: f64, fit: &LinearFit) -> Result<f64, CostModelError> {
    fit.expect_units(FitUnits::TimePerByte)?;
    if volume == 0.0 {
        return Ok(0.0);
    }
    Ok(fit.eval(volume))
}

/// Ordinary least squares over the points with `size >= min_size_threshold`.
///
/// Small messages are dominated by fixed overhead rather than bandwidth, so
/// callers fit only above a threshold and let the intercept stand in for the
/// small-message cost. A negative fitted intercept is clamped to zero.
pub fn fit_linear(
    points: &[ProfilePoint],
    min_size_threshold: f64,
    units: FitUnits,
) -> Result<LinearFit, CostModelError> {
    let qualifying: Vec<&ProfilePoint> =
        points.iter().filter(|p| p.size >= min_size_threshold).collect();
    if qualifying.len() < 2 {
        return Err(CostModelError::InsufficientProfile {
            threshold: min_size_threshold,
            available: qualifying.len(),
        });
    }
    let n = qualifying.len() as f64;
    let mean_x = qualifying.iter().map(|p| p.size).sum::<f64>() / n;
    let mean_y = qualifying.iter().map(|p| p.latency).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for p in &qualifying {
        cov += (p.size - mean_x) * (p.latency - mean_y);
        var += (p.size - mean_x) * (p.size - mean_x);
    }
    let slope = if var == 0.0 { 0.0 } else { cov / var };
    let intercept = (mean_y - slope * mean_x).max(0.0);
    Ok(LinearFit::new(slope.max(0.0), intercept, units))
}

/// Per-rank token capacity implied by a memory budget: the largest `C` with
/// `mem_fit(C) <= mem_budget`.
pub fn bucket_size(mem_budget: f64, mem_fit: &LinearFit) -> Result<u64, CostModelError> {
    mem_fit.expect_units(FitUnits::MemoryPerToken)?;
    if mem_fit.slope <= 0.0 {
        return Err(CostModelError::NonPositiveSlope(mem_fit.slope));
    }
    if mem_budget <= mem_fit.intercept {
        return Err(CostModelError::InfeasibleBudget {
            budget: mem_budget,
            intercept: mem_fit.intercept,
        });
    }
    Ok(((mem_budget - mem_fit.intercept) / mem_fit.slope).floor() as u64)
}

/// The three fitted models plus the dimensions they were fit for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "CostModelWire", from = "CostModelWire")]
pub struct CostModel {
    pub model: ModelConfig,
    pub comp_fit: LinearFit,
    pub comm_fit: LinearFit,
    pub mem_fit: LinearFit,
    /// Bytes occupied by one communicated element (2 for 16-bit values).
    pub bytes_per_elem: f64,
    /// Multiplier on sharded-sequence compute reflecting the kernel
    /// efficiency loss of splitting attention across ranks. 1.0 disables it.
    pub shard_penalty: f64,
}

impl CostModel {
    /// Validates that each fit carries the units its role requires.
    pub fn new(
        model: ModelConfig,
        comp_fit: LinearFit,
        comm_fit: LinearFit,
        mem_fit: LinearFit,
        bytes_per_elem: f64,
        shard_penalty: f64,
    ) -> Result<Self, CostModelError> {
        model.validate()?;
        comp_fit.expect_units(FitUnits::TimePerFlop)?;
        comm_fit.expect_units(FitUnits::TimePerByte)?;
        mem_fit.expect_units(FitUnits::MemoryPerToken)?;
        Ok(Self { model, comp_fit, comm_fit, mem_fit, bytes_per_elem, shard_penalty })
    }

    /// All-identity fits with one byte per element and no shard penalty, so
    /// times equal raw FLOPs/element counts. Test fixture.
    pub fn identity(model: ModelConfig) -> Self {
        Self {
            model,
            comp_fit: LinearFit::identity(FitUnits::TimePerFlop),
            comm_fit: LinearFit::identity(FitUnits::TimePerByte),
            mem_fit: LinearFit::identity(FitUnits::MemoryPerToken),
            bytes_per_elem: 1.0,
            shard_penalty: 1.0,
        }
    }

    /// Preset calibrated against the shipped all-to-all latency profile,
    /// with a fast compute fit so that fixed communication overhead, not
    /// compute, dominates short sequences.
    pub fn fitted_preset(model: ModelConfig, shard_penalty: f64) -> Self {
        let points = parse_profile_reader(ALL_TO_ALL_PROFILE.as_bytes(), "all_to_all.csv")
            .expect("embedded profile parses");
        let points = scale_sizes_mb_to_bytes(&points);
        let comm_fit = fit_linear(&points, PRESET_COMM_THRESHOLD_BYTES, FitUnits::TimePerByte)
            .expect("embedded profile has enough points");
        Self {
            model,
            comp_fit: LinearFit::new(
                PRESET_COMP_SLOPE,
                PRESET_COMP_INTERCEPT,
                FitUnits::TimePerFlop,
            ),
            comm_fit,
            mem_fit: LinearFit::new(
                PRESET_MEM_SLOPE,
                PRESET_MEM_INTERCEPT,
                FitUnits::MemoryPerToken,
            ),
            bytes_per_elem: 2.0,
            shard_penalty,
        }
    }

    /// Compute latency for an already-estimated FLOPs value.
    pub fn comp_time(&self, flops_value: f64) -> f64 {
        self.comp_fit.eval(flops_value)
    }

    /// Collective latency for a volume in elements; zero volume is free.
    pub fn comm_time(&self, volume_elems: f64) -> f64 {
        if volume_elems == 0.0 {
            return 0.0;
        }
        self.comm_fit.eval(volume_elems * self.bytes_per_elem)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(json: &str) -> serde_json::Result<Self> {
        serde_json::from_str(json)
    }
}

// Wire format: fits carry only {slope, intercept}; the role a fit occupies
// in the document determines its units on the way back in.
#[derive(Serialize, Deserialize)]
struct FitWire {
    slope: f64,
    intercept: f64,
}

#[derive(Serialize, Deserialize)]
struct CostModelWire {
    model: ModelConfig,
    comp_fit: FitWire,
    comm_fit: FitWire,
    mem_fit: FitWire,
    #[serde(default = "default_bytes_per_elem")]
    bytes_per_elem: f64,
    #[serde(default = "default_shard_penalty")]
    shard_penalty: f64,
}

fn default_bytes_per_elem() -> f64 {
    2.0
}

fn default_shard_penalty() -> f64 {
    1.0
}

impl From<CostModel> for CostModelWire {
    fn from(cm: CostModel) -> Self {
        let wire = |f: LinearFit| FitWire { slope: f.slope, intercept: f.intercept };
        Self {
            model: cm.model,
            comp_fit: wire(cm.comp_fit),
            comm_fit: wire(cm.comm_fit),
            mem_fit: wire(cm.mem_fit),
            bytes_per_elem: cm.bytes_per_elem,
            shard_penalty: cm.shard_penalty,
        }
    }
}

impl From<CostModelWire> for CostModel {
    fn from(w: CostModelWire) -> Self {
        let fit = |f: &FitWire, units| LinearFit::new(f.slope, f.intercept, units);
        Self {
            model: w.model,
            comp_fit: fit(&w.comp_fit, FitUnits::TimePerFlop),
            comm_fit: fit(&w.comm_fit, FitUnits::TimePerByte),
            mem_fit: fit(&w.mem_fit, FitUnits::MemoryPerToken),
            bytes_per_elem: w.bytes_per_elem,
            shard_penalty: w.shard_penalty,
        }
    }
}

/// Reads a `size,latency` profile table.
pub fn load_profile_csv(path: &Path) -> Result<Vec<ProfilePoint>, IngestError> {
    let file = std::fs::File::open(path)?;
    parse_profile_reader(file, &path.display().to_string())
}

/// Converts profile sizes from MB (the convention of communication tables)
/// to bytes so fits and volume predictions share one unit.
pub fn scale_sizes_mb_to_bytes(points: &[ProfilePoint]) -> Vec<ProfilePoint> {
    points
        .iter()
        .map(|p| ProfilePoint { size: p.size * MIB_BYTES, latency: p.latency })
        .collect()
}

fn parse_profile_reader<R: Read>(reader: R, path: &str) -> Result<Vec<ProfilePoint>, IngestError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut points = Vec::new();
    for (i, record) in rdr.deserialize::<ProfilePoint>().enumerate() {
        let line = i + 2; // header occupies line 1
        let point = record.map_err(|e| IngestError::Parse {
            path: path.to_string(),
            line,
            reason: e.to_string(),
        })?;
        if point.size <= 0.0 || point.latency <= 0.0 {
            return Err(IngestError::Parse {
                path: path.to_string(),
                line,
                reason: format!("entries must be positive, got {},{}", point.size, point.latency),
            });
        }
        points.push(point);
    }
    if points.is_empty() {
        return Err(IngestError::Empty { path: path.to_string() });
    }
    Ok(points)
}
