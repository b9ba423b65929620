//! Sequence-length traces: synthetic generators, file ingestion, quantile
//! stats, and deterministic global-batch sampling.
//!
//! Real mixed-length fine-tuning corpora fall into two regimes: long-tail
//! (almost everything short, a thin tail of very long documents) and bimodal
//! (short and long modes of comparable mass). The shipped presets are
//! clamped log-normals calibrated so their sub-1K/4K/8K fractions land on
//! the measured values for three public datasets.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{IngestError, WorkloadError};

/// A named list of sequence lengths in tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthTrace {
    pub name: String,
    pub lengths: Vec<u64>,
}

impl LengthTrace {
    pub fn new(name: impl Into<String>, lengths: Vec<u64>) -> Result<Self, WorkloadError> {
        if lengths.is_empty() {
            return Err(WorkloadError::InvalidSpec("trace must be nonempty".into()));
        }
        if lengths.iter().any(|&l| l == 0) {
            return Err(WorkloadError::InvalidSpec("lengths must be at least 1".into()));
        }
        Ok(Self { name: name.into(), lengths })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }
}

/// How to produce a length trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistributionSpec {
    /// Clamped log-normal; covers the long-tail regime.
    Longtail { location: f64, scale: f64, max_len: u64 },
    /// Mixture of two clamped log-normals; covers the bimodal regime.
    Bimodal {
        short_location: f64,
        short_scale: f64,
        long_location: f64,
        long_scale: f64,
        /// Probability of drawing from the short component.
        short_weight: f64,
        max_len: u64,
    },
    /// Lengths read from a trace file.
    File { path: String },
}

impl DistributionSpec {
    /// Long-tail preset: ~88% of sequences under 1K tokens.
    pub fn wikipedia() -> Self {
        Self::Longtail { location: 5.6698, scale: 1.0590, max_len: 78_000 }
    }

    /// Long-tail preset with a slightly heavier tail and a huge clamp.
    pub fn lmsys() -> Self {
        Self::Longtail { location: 5.7472, scale: 1.0253, max_len: 1_643_000 }
    }

    /// Bimodal preset: ~40% of sequences under 8K tokens, the rest centered
    /// in the tens of thousands.
    pub fn chatqa2() -> Self {
        Self::Bimodal {
            short_location: 5.8579,
            short_scale: 0.9,
            long_location: 9.4727,
            long_scale: 0.5,
            short_weight: 0.30,
            max_len: 99_000,
        }
    }

    /// Looks up a preset by CLI name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "wikipedia" => Some(Self::wikipedia()),
            "lmsys" => Some(Self::lmsys()),
            "chatqa2" => Some(Self::chatqa2()),
            _ => None,
        }
    }

    fn validate(&self) -> Result<(), WorkloadError> {
        match self {
            Self::Longtail { scale, max_len, .. } => {
                if !scale.is_finite() || *scale <= 0.0 {
                    return Err(WorkloadError::InvalidSpec(format!("scale {scale} must be > 0")));
                }
                if *max_len < 1 {
                    return Err(WorkloadError::InvalidSpec("max_len must be at least 1".into()));
                }
            }
            Self::Bimodal { short_scale, long_scale, short_weight, max_len, .. } => {
                for scale in [short_scale, long_scale] {
                    if !scale.is_finite() || *scale <= 0.0 {
                        return Err(WorkloadError::InvalidSpec(format!(
                            "scale {scale} must be > 0"
                        )));
                    }
                }
                if !(0.0..=1.0).contains(short_weight) {
                    return Err(WorkloadError::InvalidSpec(format!(
                        "mixing weight {short_weight} must be in [0,1]"
                    )));
                }
                if *max_len < 1 {
                    return Err(WorkloadError::InvalidSpec("max_len must be at least 1".into()));
                }
            }
            Self::File { .. } => {}
        }
        Ok(())
    }
}

/// RNG with independent streams per (seed, purpose) pair so callers never
/// share hidden generator state.
pub(crate) fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn clamp_sample(x: f64, max_len: u64) -> u64 {
    (x.round().max(1.0) as u64).min(max_len)
}

/// Draws `n` lengths from `spec`. Deterministic in `(spec, n, seed)`.
///
/// For file specs the trace is read in file order and truncated to `n`.
pub fn generate(spec: &DistributionSpec, n: usize, seed: u64) -> Result<LengthTrace, WorkloadError> {
    spec.validate()?;
    if n == 0 {
        return Err(WorkloadError::InvalidSpec("n must be at least 1".into()));
    }
    match spec {
        DistributionSpec::Longtail { location, scale, max_len } => {
            let dist = LogNormal::new(*location, *scale)
                .map_err(|e| WorkloadError::InvalidSpec(e.to_string()))?;
            let mut rng = seeded_rng(seed, 0);
            let lengths = (0..n).map(|_| clamp_sample(dist.sample(&mut rng), *max_len)).collect();
            LengthTrace::new("longtail", lengths)
        }
        DistributionSpec::Bimodal {
            short_location,
            short_scale,
            long_location,
            long_scale,
            short_weight,
            max_len,
        } => {
            let short = LogNormal::new(*short_location, *short_scale)
                .map_err(|e| WorkloadError::InvalidSpec(e.to_string()))?;
            let long = LogNormal::new(*long_location, *long_scale)
                .map_err(|e| WorkloadError::InvalidSpec(e.to_string()))?;
            let mut rng = seeded_rng(seed, 0);
            let lengths = (0..n)
                .map(|_| {
                    let pick_short = rng.random::<f64>() < *short_weight;
                    let raw = if pick_short { short.sample(&mut rng) } else { long.sample(&mut rng) };
                    clamp_sample(raw, *max_len)
                })
                .collect();
            LengthTrace::new("bimodal", lengths)
        }
        DistributionSpec::File { path } => {
            let trace = load_trace(Path::new(path))?;
            if trace.len() < n {
                return Err(WorkloadError::TraceTooShort {
                    requested: n,
                    available: trace.len(),
                });
            }
            LengthTrace::new(trace.name, trace.lengths[..n].to_vec())
        }
    }
}

/// Reads a trace file: either one positive integer per line or a single
/// JSON array of positive integers.
pub fn load_trace(path: &Path) -> Result<LengthTrace, WorkloadError> {
    let text = std::fs::read_to_string(path).map_err(IngestError::Io)?;
    let display = path.display().to_string();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trace".to_string());

    if text.trim_start().starts_with('[') {
        let raw: Vec<i64> = serde_json::from_str(&text).map_err(|e| IngestError::Parse {
            path: display.clone(),
            line: 1,
            reason: e.to_string(),
        })?;
        let lengths = validate_entries(&raw, &display, |_| 1)?;
        return LengthTrace::new(name, lengths)
            .map_err(|_| IngestError::Empty { path: display }.into());
    }

    let mut lengths = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let value: i64 = line.parse().map_err(|_| IngestError::Parse {
            path: display.clone(),
            line: i + 1,
            reason: format!("not an integer: {line:?}"),
        })?;
        if value <= 0 {
            return Err(IngestError::Parse {
                path: display.clone(),
                line: i + 1,
                reason: format!("lengths must be positive, got {value}"),
            }
            .into());
        }
        lengths.push(value as u64);
    }
    if lengths.is_empty() {
        return Err(IngestError::Empty { path: display }.into());
    }
    LengthTrace::new(name, lengths)
}

fn validate_entries(
    raw: &[i64],
    path: &str,
    position: impl Fn(usize) -> usize,
) -> Result<Vec<u64>, WorkloadError> {
    let mut out = Vec::with_capacity(raw.len());
    for (i, &value) in raw.iter().enumerate() {
        if value <= 0 {
            return Err(IngestError::Parse {
                path: path.to_string(),
                line: position(i),
                reason: format!("lengths must be positive, got {value} (entry {i})"),
            }
            .into());
        }
        out.push(value as u64);
    }
    if out.is_empty() {
        return Err(IngestError::Empty { path: path.to_string() }.into());
    }
    Ok(out)
}

/// Writes a trace as newline-delimited integers, or a JSON array when `json`.
pub fn save_trace(trace: &LengthTrace, path: &Path, json: bool) -> Result<(), std::io::Error> {
    let body = if json {
        serde_json::to_string(&trace.lengths).expect("lengths serialize")
    } else {
        let mut s = trace.lengths.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("\n");
        s.push('\n');
        s
    };
    std::fs::write(path, body)
}

/// Fractions of a trace strictly below each threshold, plus the longest
/// length observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileReport {
    pub thresholds: Vec<u64>,
    pub fractions: Vec<f64>,
    pub longest: u64,
}

/// Counts the fraction of lengths strictly below each threshold.
///
/// Thresholds must be strictly increasing.
pub fn quantiles(trace: &LengthTrace, thresholds: &[u64]) -> QuantileReport {
    assert!(
        thresholds.windows(2).all(|w| w[0] < w[1]),
        "thresholds must be strictly increasing"
    );
    let n = trace.len() as f64;
    let fractions = thresholds
        .iter()
        .map(|&t| trace.lengths.iter().filter(|&&l| l < t).count() as f64 / n)
        .collect();
    let longest = *trace.lengths.iter().max().expect("trace nonempty");
    QuantileReport { thresholds: thresholds.to_vec(), fractions, longest }
}

/// Deterministic epoch sampler: shuffles the trace once per epoch and hands
/// out consecutive chunks, reshuffling at epoch boundaries.
///
/// Iteration `k` of epoch `e` is the `k`-th chunk of the `e`-th permutation,
/// so disjoint iterations within an epoch cover the trace exactly once. The
/// iteration index is an explicit argument rather than sampler state.
pub fn sample_global_batch(
    trace: &LengthTrace,
    batch_size: usize,
    seed: u64,
    iteration: usize,
) -> Result<Vec<u64>, WorkloadError> {
    if batch_size == 0 {
        return Err(WorkloadError::InvalidSpec("batch_size must be at least 1".into()));
    }
    if batch_size > trace.len() {
        return Err(WorkloadError::BatchTooLarge { batch: batch_size, trace: trace.len() });
    }
    let batches_per_epoch = trace.len().div_ceil(batch_size);
    let epoch = iteration / batches_per_epoch;
    let slot = iteration % batches_per_epoch;

    let mut order: Vec<usize> = (0..trace.len()).collect();
    let mut rng = seeded_rng(seed, epoch as u64);
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);

    let start = slot * batch_size;
    let end = (start + batch_size).min(trace.len());
    Ok(order[start..end].iter().map(|&i| trace.lengths[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn generate_is_deterministic() {
        let spec = DistributionSpec::wikipedia();
        let a = generate(&spec, 1000, 7).unwrap();
        let b = generate(&spec, 1000, 7).unwrap();
        assert_eq!(a, b);
        let c = generate(&spec, 1, 42).unwrap();
        let d = generate(&spec, 1, 42).unwrap();
        assert_eq!(c.lengths, d.lengths);
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn generate_respects_clamp() {
        let spec = DistributionSpec::Longtail { location: 8.0, scale: 2.0, max_len: 500 };
        let trace = generate(&spec, 5000, 3).unwrap();
        assert!(trace.lengths.iter().all(|&l| (1..=500).contains(&l)));
    }

    #[test]
    fn generate_rejects_bad_spec() {
        let spec = DistributionSpec::Longtail { location: 5.0, scale: -1.0, max_len: 100 };
        assert!(generate(&spec, 10, 0).is_err());
        let spec = DistributionSpec::Bimodal {
            short_location: 5.0,
            short_scale: 1.0,
            long_location: 9.0,
            long_scale: 1.0,
            short_weight: 1.5,
            max_len: 100,
        };
        assert!(generate(&spec, 10, 0).is_err());
    }

    #[test]
    fn wikipedia_preset_matches_measured_fractions() {
        let trace = generate(&DistributionSpec::wikipedia(), 100_000, 7).unwrap();
        let report = quantiles(&trace, &[1_000, 4_000, 8_000]);
        assert!((report.fractions[0] - 0.8788).abs() < 0.03, "<1K: {}", report.fractions[0]);
        assert!((report.fractions[1] - 0.9934).abs() < 0.03, "<4K: {}", report.fractions[1]);
        assert!((report.fractions[2] - 0.9992).abs() < 0.03, "<8K: {}", report.fractions[2]);
    }

    #[test]
    fn chatqa2_preset_matches_measured_fraction() {
        let trace = generate(&DistributionSpec::chatqa2(), 100_000, 7).unwrap();
        let report = quantiles(&trace, &[8_000]);
        assert!((report.fractions[0] - 0.4043).abs() < 0.05, "<8K: {}", report.fractions[0]);
    }

    #[test]
    fn load_trace_newline_format() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "4\n2\n8").unwrap();
        let trace = load_trace(f.path()).unwrap();
        assert_eq!(trace.lengths, vec![4, 2, 8]);
    }

    #[test]
    fn load_trace_json_format() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "[4, 2, 8]").unwrap();
        let trace = load_trace(f.path()).unwrap();
        assert_eq!(trace.lengths, vec![4, 2, 8]);
    }

    #[test]
    fn load_trace_empty_file_is_error() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(load_trace(f.path()).is_err());
    }

    #[test]
    fn load_trace_reports_offending_line() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "4\n-1").unwrap();
        let err = load_trace(f.path()).unwrap_err();
        assert!(err.to_string().contains(":2:"), "got {err}");
    }

    #[test]
    fn quantile_fractions_count_strictly_below() {
        let trace = LengthTrace::new("t", vec![500, 900, 2000]).unwrap();
        let report = quantiles(&trace, &[1000]);
        assert_eq!(report.fractions, vec![2.0 / 3.0]);
        assert_eq!(report.longest, 2000);

        let report = quantiles(&trace, &[]);
        assert!(report.fractions.is_empty());
        assert_eq!(report.longest, 2000);

        let equal = LengthTrace::new("eq", vec![10, 10, 10]).unwrap();
        let report = quantiles(&equal, &[10, 11]);
        assert_eq!(report.fractions, vec![0.0, 1.0]);
    }

    #[test]
    fn batch_is_permutation_of_small_trace() {
        let trace = LengthTrace::new("t", vec![3, 1, 4, 1]).unwrap();
        let batch = sample_global_batch(&trace, 4, 9, 0).unwrap();
        let mut sorted = batch.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![1, 1, 3, 4]);
        assert_eq!(batch, sample_global_batch(&trace, 4, 9, 0).unwrap());
    }

    #[test]
    fn epoch_chunks_are_disjoint_and_cover() {
        let trace = LengthTrace::new("t", (1..=8).collect()).unwrap();
        let first = sample_global_batch(&trace, 4, 5, 0).unwrap();
        let second = sample_global_batch(&trace, 4, 5, 1).unwrap();
        let mut union: Vec<u64> = first.iter().chain(second.iter()).copied().collect();
        union.sort_unstable();
        assert_eq!(union, (1..=8).collect::<Vec<u64>>());
    }

    #[test]
    fn epochs_reshuffle() {
        let trace = LengthTrace::new("t", (1..=64).collect()).unwrap();
        let epoch0: Vec<u64> = (0..2)
            .flat_map(|i| sample_global_batch(&trace, 32, 11, i).unwrap())
            .collect();
        let epoch1: Vec<u64> = (2..4)
            .flat_map(|i| sample_global_batch(&trace, 32, 11, i).unwrap())
            .collect();
        assert_ne!(epoch0, epoch1);
        let mut a = epoch0.clone();
        let mut b = epoch1.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_larger_than_trace_is_error() {
        let trace = LengthTrace::new("t", vec![1, 2]).unwrap();
        assert!(matches!(
            sample_global_batch(&trace, 3, 0, 0),
            Err(WorkloadError::BatchTooLarge { .. })
        ));
    }
}
