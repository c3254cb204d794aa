//! Per-round and per-device records, multi-seed statistics, and their file formats.
//!
//! Floats are written in shortest round-trip form, so reading a file back yields the
//! exact values that were written.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const ROUNDS_HEADER: [&str; 7] = [
    "round",
    "test_accuracy",
    "num_active_start",
    "num_participating",
    "num_completed",
    "mean_eta",
    "total_energy_remaining",
];

pub const DEPLETION_HEADER: [&str; 2] = ["client_id", "depletion_round"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub test_accuracy: f64,
    pub num_active_start: usize,
    pub num_participating: usize,
    pub num_completed: usize,
    pub mean_eta: f64,
    pub total_energy_remaining: f64,
}

/// First round in which a device's battery reached zero; `None` if it lasted the whole run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepletionRecord {
    pub client_id: usize,
    pub depletion_round: Option<usize>,
}

/// Everything a federation run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub rounds: Vec<RoundRecord>,
    pub depletions: Vec<DepletionRecord>,
    /// Sum of aggregation weights per round; `None` for stalled rounds.
    pub aggregation_weight_sums: Vec<Option<f64>>,
    pub final_params: ModelParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub peak_accuracy: f64,
    pub peak_round: usize,
    pub final_accuracy: f64,
    pub config_fingerprint: String,
}

/// Peak accuracy (earliest round on ties) and final-round accuracy.
pub fn summarize_run(
    records: &[RoundRecord],
    seed: u64,
    config_fingerprint: &str,
) -> Result<RunSummary> {
    let last = records
        .last()
        .ok_or_else(|| Error::config("cannot summarize a run with no rounds"))?;
    let mut peak = &records[0];
    for r in &records[1..] {
        if r.test_accuracy > peak.test_accuracy {
            peak = r;
        }
    }
    Ok(RunSummary {
        seed,
        peak_accuracy: peak.test_accuracy,
        peak_round: peak.round,
        final_accuracy: last.test_accuracy,
        config_fingerprint: config_fingerprint.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub peak_accuracy: f64,
    pub peak_round: f64,
    pub final_accuracy: f64,
}

/// Mean and sample standard deviation (n - 1 denominator) across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub mean: SummaryStats,
    pub std: SummaryStats,
}

/// Arithmetic mean, accumulated as offsets from the first value so that identical
/// inputs give back that value exactly.
pub fn mean(values: &[f64]) -> f64 {
    let Some(&pivot) = values.first() else {
        return f64::NAN;
    };
    pivot + values.iter().map(|v| v - pivot).sum::<f64>() / values.len() as f64
}

pub fn sample_std(values: &[f64]) -> f64 {
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

pub fn aggregate_seeds(summaries: &[RunSummary]) -> Result<SeedStats> {
    if summaries.len() < 2 {
        return Err(Error::config(format!(
            "need at least 2 runs for seed statistics, got {}",
            summaries.len()
        )));
    }
    let column = |f: fn(&RunSummary) -> f64| summaries.iter().map(f).collect::<Vec<_>>();
    let peak = column(|s| s.peak_accuracy);
    let round = column(|s| s.peak_round as f64);
    let fin = column(|s| s.final_accuracy);
    Ok(SeedStats {
        mean: SummaryStats {
            peak_accuracy: mean(&peak),
            peak_round: mean(&round),
            final_accuracy: mean(&fin),
        },
        std: SummaryStats {
            peak_accuracy: sample_std(&peak),
            peak_round: sample_std(&round),
            final_accuracy: sample_std(&fin),
        },
    })
}

/// Depletion rounds with survivors counted as `total_rounds`.
pub fn depletion_rounds_or_survival(
    records: &[DepletionRecord],
    total_rounds: usize,
) -> Vec<usize> {
    records
        .iter()
        .map(|r| r.depletion_round.unwrap_or(total_rounds))
        .collect()
}

/// Linear-interpolation quantile of sorted data, `q` in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Minimum, lower quartile, median, upper quartile, maximum.
pub fn five_number_summary(values: &[f64]) -> [f64; 5] {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| quantile_sorted(&sorted, q))
}

pub fn median(values: &[f64]) -> f64 {
    five_number_summary(values)[2]
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    writer
        .write_record(header)
        .map_err(|e| csv_error(path, e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let found = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("unexpected header {:?}", found.iter().collect::<Vec<_>>()),
        });
    }
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| csv_error(path, e))
}

pub fn write_round_csv(records: &[RoundRecord], path: impl AsRef<Path>) -> Result<()> {
    write_csv(path.as_ref(), &ROUNDS_HEADER, records)
}

pub fn read_round_csv(path: impl AsRef<Path>) -> Result<Vec<RoundRecord>> {
    read_csv(path.as_ref(), &ROUNDS_HEADER)
}

/// Survivors get an empty `depletion_round` field.
pub fn write_depletion_csv(records: &[DepletionRecord], path: impl AsRef<Path>) -> Result<()> {
    write_csv(path.as_ref(), &DEPLETION_HEADER, records)
}

pub fn read_depletion_csv(path: impl AsRef<Path>) -> Result<Vec<DepletionRecord>> {
    read_csv(path.as_ref(), &DEPLETION_HEADER)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub seed: u64,
    pub peak_accuracy: f64,
    pub peak_round: usize,
    pub final_accuracy: f64,
}

/// Contents of `summary.json`. `std` is the sample standard deviation and is `null`
/// when only one seed ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub config: serde_json::Value,
    pub seeds: Vec<SeedEntry>,
    pub mean: SummaryStats,
    pub std: Option<SummaryStats>,
}

impl SummaryFile {
    pub fn new(config: serde_json::Value, summaries: &[RunSummary]) -> Result<Self> {
        let first = summaries
            .first()
            .ok_or_else(|| Error::config("summary needs at least one run"))?;
        let seeds = summaries
            .iter()
            .map(|s| SeedEntry {
                seed: s.seed,
                peak_accuracy: s.peak_accuracy,
                peak_round: s.peak_round,
                final_accuracy: s.final_accuracy,
            })
            .collect();
        let (mean, std) = if summaries.len() >= 2 {
            let stats = aggregate_seeds(summaries)?;
            (stats.mean, Some(stats.std))
        } else {
            let single = SummaryStats {
                peak_accuracy: first.peak_accuracy,
                peak_round: first.peak_round as f64,
                final_accuracy: first.final_accuracy,
            };
            (single, None)
        };
        Ok(Self {
            config,
            seeds,
            mean,
            std,
        })
    }
}

pub fn write_summary_json(summary: &SummaryFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, summary)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summary_json(path: impl AsRef<Path>) -> Result<SummaryFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}
