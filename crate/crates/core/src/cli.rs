//! `run`, `sweep` and `report` subcommands.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O failure.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{self, ExperimentConfig};
use crate::data;
use crate::energy;
use crate::error::{Error, Result};
use crate::federation;
use crate::metrics::{self, RunSummary, SummaryFile};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "leanfed-sim",
    version,
    about = "Battery-constrained federated learning simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment for every seed.
    Run(CommonArgs),
    /// Run the Cartesian product of one or more axes, one subdirectory per cell.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// `KEY=V1,V2,...`; join keys with `+` and values with `:` to vary several
        /// fields together, e.g. `policy+lambda=fedavg:0.2,leanfed_adaptive:1.0`.
        #[arg(long = "axis", value_name = "KEY=VALUES")]
        axes: Vec<String>,
    },
    /// Print accuracy and depletion tables for every summary under a directory.
    Report { results_dir: PathBuf },
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set federation.lambda=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "N1,N2,...", value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

impl CommonArgs {
    /// Config overrides with `--out` and `--seeds` folded in.
    fn all_overrides(&self) -> Vec<String> {
        let mut all = self.overrides.clone();
        if let Some(seeds) = &self.seeds {
            let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
            all.push(format!("seeds=[{}]", list.join(",")));
        }
        if let Some(out) = &self.out {
            all.push(format!(
                "output_dir={}",
                toml::Value::String(out.display().to_string())
            ));
        }
        all
    }
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Run(common) => cmd_run(&common),
        Command::Sweep { common, axes } => cmd_sweep(&common, &axes),
        Command::Report { results_dir } => cmd_report(&results_dir).map(|text| {
            print!("{text}");
        }),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

pub fn rounds_file(seed: u64) -> String {
    format!("rounds_seed{seed}.csv")
}

pub fn depletion_file(seed: u64) -> String {
    format!("depletion_seed{seed}.csv")
}

pub const SUMMARY_FILE: &str = "summary.json";

/// Trains one federation per seed and writes its outputs into `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<SummaryFile> {
    let out = config.output_dir.as_ref().ok_or_else(|| {
        Error::config("output_dir is required (set it in the config or pass --out)")
    })?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let (train, test) = config.load_datasets()?;
    let fingerprint = config.fingerprint();
    let mut summaries: Vec<RunSummary> = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let shards = data::partition_dirichlet(&train, &config.partition_config(seed))?;
        let sizes: Vec<usize> = shards.iter().map(data::ClientShard::len).collect();
        let mut fleet = energy::sample_fleet(
            &sizes,
            train.len(),
            config.federation.total_rounds,
            &config.energy_config(seed),
        )?;
        let log = federation::run_federation(
            &train,
            &test,
            &shards,
            &mut fleet,
            &config.federation_config(seed),
        )?;
        metrics::write_round_csv(&log.rounds, out.join(rounds_file(seed)))?;
        metrics::write_depletion_csv(&log.depletions, out.join(depletion_file(seed)))?;
        summaries.push(metrics::summarize_run(&log.rounds, seed, &fingerprint)?);
    }
    let summary = SummaryFile::new(config.summary_block(), &summaries)?;
    metrics::write_summary_json(&summary, out.join(SUMMARY_FILE))?;
    Ok(summary)
}

pub fn cmd_run(args: &CommonArgs) -> Result<()> {
    let config = ExperimentConfig::load(args.config.as_deref(), &args.all_overrides())?;
    let summary = run_experiment(&config)?;
    let out = config
        .output_dir
        .as_ref()
        .expect("checked by run_experiment");
    eprintln!(
        "wrote {} seed(s) to {} (fingerprint {}, mean peak accuracy {:.4})",
        summary.seeds.len(),
        out.display(),
        config.fingerprint(),
        summary.mean.peak_accuracy
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

/// One sweep dimension: a tuple of keys and the value tuples they take together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub keys: Vec<String>,
    pub values: Vec<Vec<String>>,
}

pub fn parse_axis(spec: &str) -> Result<Axis> {
    let (keys, values) = config::split_assignment(spec)?;
    let keys: Vec<String> = keys.split('+').map(|k| k.trim().to_string()).collect();
    let values = values.trim().trim_start_matches('[').trim_end_matches(']');
    let tuples: Vec<Vec<String>> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| {
            v.split(':')
                .map(|p| p.trim().to_string())
                .collect::<Vec<_>>()
        })
        .collect();
    if tuples.is_empty() {
        return Err(Error::config(format!("axis {spec:?} has no values")));
    }
    if let Some(bad) = tuples.iter().find(|t| t.len() != keys.len()) {
        return Err(Error::config(format!(
            "axis {spec:?}: value {:?} does not match the {} key(s)",
            bad.join(":"),
            keys.len()
        )));
    }
    Ok(Axis {
        keys,
        values: tuples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCell {
    pub name: String,
    pub dir: PathBuf,
    pub assignments: BTreeMap<String, String>,
    pub status: String,
    pub error: Option<String>,
    pub fingerprint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub axes: Vec<Axis>,
    pub cells: Vec<ManifestCell>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn cartesian(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(cells.len() * axis.values.len());
        for cell in &cells {
            for tuple in &axis.values {
                let mut extended = cell.clone();
                extended.extend(axis.keys.iter().cloned().zip(tuple.iter().cloned()));
                next.push(extended);
            }
        }
        cells = next;
    }
    cells
}

fn cell_name(assignments: &[(String, String)]) -> String {
    assignments
        .iter()
        .map(|(k, v)| format!("{k}={v}").replace(['/', '\\', ' '], "-"))
        .collect::<Vec<_>>()
        .join("_")
}

/// Runs every cell; failures are recorded in the manifest and the sweep carries on.
pub fn run_sweep(base: &CommonArgs, axis_specs: &[String]) -> Result<Manifest> {
    let base_overrides = base.all_overrides();
    let base_config = ExperimentConfig::load(base.config.as_deref(), &base_overrides)?;
    let out = base_config.output_dir.clone().ok_or_else(|| {
        Error::config("output_dir is required (set it in the config or pass --out)")
    })?;
    let axes = axis_specs
        .iter()
        .map(|s| parse_axis(s))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let mut cells = Vec::new();
    for assignments in cartesian(&axes) {
        let name = cell_name(&assignments);
        let dir = out.join(&name);
        let mut overrides = base_overrides.clone();
        overrides.extend(assignments.iter().map(|(k, v)| format!("{k}={v}")));
        overrides.push(format!(
            "output_dir={}",
            toml::Value::String(dir.display().to_string())
        ));

        let outcome = ExperimentConfig::load(base.config.as_deref(), &overrides)
            .and_then(|cfg| run_experiment(&cfg).map(|_| cfg.fingerprint()));
        let (status, error, fingerprint) = match outcome {
            Ok(fp) => ("ok".to_string(), None, Some(fp)),
            Err(e) => {
                eprintln!("cell {name} failed: {e}");
                ("failed".to_string(), Some(e.to_string()), None)
            }
        };
        cells.push(ManifestCell {
            name: name.clone(),
            dir: PathBuf::from(&name),
            assignments: assignments.into_iter().collect(),
            status,
            error,
            fingerprint,
        });
    }

    let manifest = Manifest { axes, cells };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn cmd_sweep(base: &CommonArgs, axis_specs: &[String]) -> Result<()> {
    if axis_specs.is_empty() {
        return cmd_run(base);
    }
    let manifest = run_sweep(base, axis_specs)?;
    let failed = manifest.cells.iter().filter(|c| c.status != "ok").count();
    eprintln!(
        "sweep finished: {} cell(s), {} failed",
        manifest.cells.len(),
        failed
    );
    if failed > 0 {
        return Err(Error::config(format!(
            "{failed} sweep cell(s) failed; see {MANIFEST_FILE}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct Cell {
    name: String,
    summary: SummaryFile,
    dir: PathBuf,
}

fn find_summaries(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            find_summaries(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == SUMMARY_FILE) {
            found.push(path);
        }
    }
    Ok(())
}

fn resolved<'a>(
    summary: &'a SummaryFile,
    section: &str,
    key: &str,
) -> Option<&'a serde_json::Value> {
    summary.config.get("resolved")?.get(section)?.get(key)
}

fn method_label(summary: &SummaryFile) -> String {
    let policy = resolved(summary, "federation", "policy")
        .and_then(|v| v.as_str())
        .unwrap_or("?")
        .to_string();
    match resolved(summary, "federation", "lambda").and_then(|v| v.as_f64()) {
        Some(l) if l < 1.0 => format!("{policy} ({}%)", fmt_num(l * 100.0)),
        _ => policy,
    }
}

fn fmt_num(x: f64) -> String {
    let rounded = (x * 1e6).round() / 1e6;
    format!("{rounded}")
}

fn method_order(summary: &SummaryFile) -> (u8, i64) {
    let policy = match resolved(summary, "federation", "policy").and_then(|v| v.as_str()) {
        Some("fedavg") => 0,
        Some("leanfed_static") => 1,
        Some("leanfed_adaptive") => 2,
        _ => 3,
    };
    let lambda = resolved(summary, "federation", "lambda")
        .and_then(|v| v.as_f64())
        .unwrap_or(1.0);
    (policy, -(lambda * 1e6).round() as i64)
}

fn pad(s: &str, width: usize) -> String {
    format!("{s:<width$}")
}

/// Renders the accuracy and depletion tables for every summary under `results_dir`.
pub fn render_report(results_dir: &Path) -> Result<String> {
    let mut paths = Vec::new();
    find_summaries(results_dir, &mut paths)?;
    if paths.is_empty() {
        return Err(Error::config(format!(
            "no {SUMMARY_FILE} found under {}",
            results_dir.display()
        )));
    }
    let mut cells = Vec::with_capacity(paths.len());
    for path in paths {
        let summary = metrics::read_summary_json(&path)?;
        let dir = path.parent().expect("file has a parent").to_path_buf();
        let name = dir
            .strip_prefix(results_dir)
            .ok()
            .map(|p| p.display().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| ".".to_string());
        cells.push(Cell { name, summary, dir });
    }

    let fingerprints: BTreeSet<&str> = cells
        .iter()
        .map(|c| {
            c.summary
                .config
                .get("dataset_fingerprint")
                .and_then(|v| v.as_str())
                .unwrap_or("")
        })
        .collect();
    if fingerprints.len() > 1 {
        return Err(Error::config(format!(
            "refusing to merge cells built on different datasets (fingerprints {:?})",
            fingerprints
        )));
    }

    let mut text = String::new();
    accuracy_table(&cells, &mut text);
    text.push('\n');
    depletion_table(&cells, &mut text)?;
    Ok(text)
}

fn accuracy_table(cells: &[Cell], text: &mut String) {
    let gamma_of = |c: &Cell| {
        resolved(&c.summary, "partition", "gamma")
            .and_then(|v| v.as_f64())
            .unwrap_or(f64::NAN)
    };
    let mut gammas: Vec<f64> = cells.iter().map(gamma_of).collect();
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();

    // Rows keyed by method; cells that would collide keep their directory name.
    let mut rows: Vec<((u8, i64), String)> = Vec::new();
    let mut grid: BTreeMap<(String, usize), &Cell> = BTreeMap::new();
    for cell in cells {
        let col = gammas
            .iter()
            .position(|g| g.total_cmp(&gamma_of(cell)).is_eq())
            .expect("gamma listed");
        let mut label = method_label(&cell.summary);
        if grid.contains_key(&(label.clone(), col)) {
            label = format!("{label} [{}]", cell.name);
        }
        if !rows.iter().any(|(_, l)| *l == label) {
            rows.push((method_order(&cell.summary), label.clone()));
        }
        grid.insert((label, col), cell);
    }
    rows.sort();

    let best: Vec<Option<f64>> = (0..gammas.len())
        .map(|col| {
            grid.iter()
                .filter(|((_, c), _)| *c == col)
                .map(|(_, cell)| cell.summary.mean.peak_accuracy)
                .max_by(f64::total_cmp)
        })
        .collect();

    let render = |cell: &Cell, col: usize| {
        let mean = cell.summary.mean.peak_accuracy;
        let std = cell.summary.std.map_or("n/a".to_string(), |s| {
            format!("{:.2}", s.peak_accuracy * 100.0)
        });
        let mark = if Some(mean) == best[col] { " *" } else { "" };
        format!("{:.2} ± {std}{mark}", mean * 100.0)
    };

    let headers: Vec<String> = gammas
        .iter()
        .map(|g| format!("gamma={}", fmt_num(*g)))
        .collect();
    let mut body: Vec<Vec<String>> = Vec::new();
    for (_, label) in &rows {
        let mut line = vec![label.clone()];
        for col in 0..gammas.len() {
            line.push(
                grid.get(&(label.clone(), col))
                    .map_or("-".to_string(), |c| render(c, col)),
            );
        }
        body.push(line);
    }
    let mut widths = vec!["method".len()];
    widths.extend(headers.iter().map(String::len));
    for line in &body {
        for (w, s) in widths.iter_mut().zip(line) {
            *w = (*w).max(s.chars().count());
        }
    }

    let _ = writeln!(
        text,
        "Peak test accuracy (%), mean ± sample std over seeds; * marks the column maximum"
    );
    let mut header = pad("method", widths[0]);
    for (h, w) in headers.iter().zip(&widths[1..]) {
        let _ = write!(header, "  {}", pad(h, *w));
    }
    let _ = writeln!(text, "{}", header.trim_end());
    for line in &body {
        let mut out = pad(&line[0], widths[0]);
        for (s, w) in line[1..].iter().zip(&widths[1..]) {
            let extra = s.len() - s.chars().count();
            let _ = write!(out, "  {}", pad(s, w + extra));
        }
        let _ = writeln!(text, "{}", out.trim_end());
    }
}

fn depletion_table(cells: &[Cell], text: &mut String) -> Result<()> {
    let _ = writeln!(
        text,
        "Depletion round per device, pooled over seeds (devices that never ran out count as R)"
    );
    let gamma_of = |c: &Cell| {
        resolved(&c.summary, "partition", "gamma")
            .and_then(|v| v.as_f64())
            .unwrap_or(f64::NAN)
    };
    let mut ordered: Vec<&Cell> = cells.iter().collect();
    ordered.sort_by(|a, b| {
        method_order(&a.summary)
            .cmp(&method_order(&b.summary))
            .then(gamma_of(a).total_cmp(&gamma_of(b)))
            .then(a.name.cmp(&b.name))
    });
    let labels: Vec<String> = ordered.iter().map(|c| method_label(&c.summary)).collect();
    let name_width = labels
        .iter()
        .map(|l| l.chars().count())
        .max()
        .unwrap_or(6)
        .max(6);
    let _ = writeln!(
        text,
        "{}  {:>7}  {:>5}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}",
        pad("method", name_width),
        "gamma",
        "R",
        "devices",
        "min",
        "q1",
        "median",
        "q3",
        "max"
    );
    for (cell, label) in ordered.into_iter().zip(&labels) {
        let total_rounds = resolved(&cell.summary, "federation", "total_rounds")
            .and_then(|v| v.as_u64())
            .unwrap_or(0) as usize;
        let mut rounds = Vec::new();
        for entry in &cell.summary.seeds {
            let path = cell.dir.join(depletion_file(entry.seed));
            let records = metrics::read_depletion_csv(&path)?;
            rounds.extend(
                metrics::depletion_rounds_or_survival(&records, total_rounds)
                    .into_iter()
                    .map(|r| r as f64),
            );
        }
        if rounds.is_empty() {
            continue;
        }
        let [min, q1, med, q3, max] = metrics::five_number_summary(&rounds);
        let _ = writeln!(
            text,
            "{}  {:>7}  {:>5}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}",
            pad(label, name_width),
            fmt_num(gamma_of(cell)),
            total_rounds,
            rounds.len(),
            fmt_num(min),
            fmt_num(q1),
            fmt_num(med),
            fmt_num(q3),
            fmt_num(max)
        );
    }
    Ok(())
}

pub fn cmd_report(results_dir: &Path) -> Result<String> {
    render_report(results_dir)
}
