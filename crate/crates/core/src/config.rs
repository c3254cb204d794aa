//! Declarative experiment files.
//!
//! An experiment is a TOML document with `[dataset]`, `[partition]`, `[energy]` and
//! `[federation]` sections plus top-level `seeds` and `output_dir`. Every field except
//! `output_dir` has a default. `--set dotted.key=value` overrides are applied to the
//! parsed document before it is validated, so they go through the same checks
//! (including the unknown-key check) as the file itself.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Dataset, PartitionConfig, SyntheticConfig};
use crate::energy::EnergyConfig;
use crate::error::{Error, Result};
use crate::federation::{Execution, FederationConfig, Policy};
use crate::model::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub source: DataSource,
    pub synthetic: SyntheticConfig,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            synthetic: SyntheticConfig::default(),
            train_csv: None,
            test_csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    pub num_clients: usize,
    pub gamma: f64,
    pub min_shard_size: usize,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            num_clients: 50,
            gamma: 0.5,
            min_shard_size: 1,
        }
    }
}

/// Battery distribution; the sampling seed comes from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergySection {
    pub alpha_mean: f64,
    pub alpha_var: f64,
    pub beta_mean: f64,
    pub beta_var: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
}

impl Default for EnergySection {
    fn default() -> Self {
        let d = EnergyConfig::default();
        Self {
            alpha_mean: d.alpha_mean,
            alpha_var: d.alpha_var,
            beta_mean: d.beta_mean,
            beta_var: d.beta_var,
            clip_lo: d.clip_lo,
            clip_hi: d.clip_hi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub total_rounds: usize,
    pub lambda: f64,
    pub policy: Policy,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub weight_decay: f64,
    /// 1 trains clients serially, 0 uses every core, n > 1 uses n workers.
    pub threads: usize,
}

impl Default for FederationSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            total_rounds: 200,
            lambda: 1.0,
            policy: Policy::LeanfedAdaptive,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            local_epochs: t.local_epochs,
            weight_decay: t.weight_decay,
            threads: 1,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default)]
    pub energy: EnergySection,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// Short names accepted wherever a dotted key is expected.
pub fn resolve_key(key: &str) -> &str {
    match key {
        "gamma" => "partition.gamma",
        "clients" | "num_clients" => "partition.num_clients",
        "lambda" => "federation.lambda",
        "policy" => "federation.policy",
        "rounds" | "total_rounds" => "federation.total_rounds",
        "local_epochs" => "federation.local_epochs",
        "learning_rate" => "federation.learning_rate",
        "threads" => "federation.threads",
        other => other,
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `dotted.key = value` in `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let key = resolve_key(key.trim());
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("malformed key {key:?}")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut node = table;
    for (depth, part) in parents.iter().enumerate() {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| {
            Error::config(format!("{} is not a section", parts[..=depth].join(".")))
        })?;
    }
    let mut value = parse_value(value);
    // Seeds are a list; allow `--set seeds=3` as shorthand for a single seed.
    if key == "seeds" {
        if let toml::Value::Integer(_) = value {
            value = toml::Value::Array(vec![value]);
        }
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Splits `KEY=VALUE`.
pub fn split_assignment(assignment: &str) -> Result<(&str, &str)> {
    assignment
        .split_once('=')
        .filter(|(k, _)| !k.trim().is_empty())
        .ok_or_else(|| Error::config(format!("expected KEY=VALUE, got {assignment:?}")))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults), applies overrides, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| Error::Parse {
                    path: p.to_path_buf(),
                    line: e
                        .span()
                        .map_or(0, |s| text[..s.start].lines().count().max(1) as u64),
                    message: e.message().to_string(),
                })?
            }
            None => toml::Table::new(),
        };
        for assignment in overrides {
            let (key, value) = split_assignment(assignment)?;
            apply_override(&mut table, key, value)?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let config: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().trim().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Checks every field by building the engine configs from it.
    pub fn validate(&self) -> Result<()> {
        match self.dataset.source {
            DataSource::Synthetic => self
                .dataset
                .synthetic
                .validate()
                .map_err(|e| Error::config(format!("dataset.synthetic: {e}")))?,
            DataSource::Csv => {
                if self.dataset.train_csv.is_none() || self.dataset.test_csv.is_none() {
                    return Err(Error::config(
                        "dataset.train_csv and dataset.test_csv are required when dataset.source = \"csv\"",
                    ));
                }
            }
        }
        self.partition_config(0)
            .validate()
            .map_err(|e| Error::config(format!("partition: {e}")))?;
        self.energy_config(0)
            .validate()
            .map_err(|e| Error::config(format!("energy: {e}")))?;
        let fed = self.federation_config(0);
        if !(fed.participation_rate > 0.0 && fed.participation_rate <= 1.0) {
            return Err(Error::config(format!(
                "federation.lambda must be in (0, 1], got {}",
                fed.participation_rate
            )));
        }
        fed.validate()
            .map_err(|e| Error::config(format!("federation: {e}")))?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must list at least one seed"));
        }
        Ok(())
    }

    pub fn partition_config(&self, seed: u64) -> PartitionConfig {
        PartitionConfig {
            num_clients: self.partition.num_clients,
            gamma: self.partition.gamma,
            min_shard_size: self.partition.min_shard_size,
            seed,
        }
    }

    pub fn energy_config(&self, seed: u64) -> EnergyConfig {
        let e = &self.energy;
        EnergyConfig {
            alpha_mean: e.alpha_mean,
            alpha_var: e.alpha_var,
            beta_mean: e.beta_mean,
            beta_var: e.beta_var,
            clip_lo: e.clip_lo,
            clip_hi: e.clip_hi,
            seed,
        }
    }

    pub fn federation_config(&self, seed: u64) -> FederationConfig {
        let f = &self.federation;
        FederationConfig {
            total_rounds: f.total_rounds,
            participation_rate: f.lambda,
            policy: f.policy,
            num_clients: self.partition.num_clients,
            train: TrainConfig {
                learning_rate: f.learning_rate,
                batch_size: f.batch_size,
                local_epochs: f.local_epochs,
                weight_decay: f.weight_decay,
            },
            local_epochs: None,
            master_seed: seed,
            execution: match f.threads {
                1 => Execution::Serial,
                n => Execution::Parallel { threads: n },
            },
        }
    }

    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        match self.dataset.source {
            DataSource::Synthetic => data::generate_synthetic(&self.dataset.synthetic),
            DataSource::Csv => {
                let train = self.dataset.train_csv.as_ref().expect("validated");
                let test = self.dataset.test_csv.as_ref().expect("validated");
                data::load_csv_split(train, test)
            }
        }
    }

    /// The resolved configuration minus fields that cannot change results
    /// (`output_dir`, `federation.threads`).
    pub fn resolved_json(&self) -> serde_json::Value {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("output_dir");
            if let Some(fed) = obj.get_mut("federation").and_then(|f| f.as_object_mut()) {
                fed.remove("threads");
            }
        }
        value
    }

    /// Stable hash of [`resolved_json`](Self::resolved_json).
    pub fn fingerprint(&self) -> String {
        sha256_hex(self.resolved_json().to_string().as_bytes())
    }

    /// Hash of the dataset block alone; cells that share it are comparable.
    pub fn dataset_fingerprint(&self) -> String {
        let value = serde_json::to_value(&self.dataset).expect("dataset serializes");
        sha256_hex(value.to_string().as_bytes())
    }

    /// The `config` block written into summary files.
    pub fn summary_block(&self) -> serde_json::Value {
        serde_json::json!({
            "fingerprint": self.fingerprint(),
            "dataset_fingerprint": self.dataset_fingerprint(),
            "resolved": self.resolved_json(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str, overrides: &[&str]) -> Result<ExperimentConfig> {
        let mut table: toml::Table = text.parse().unwrap();
        for o in overrides {
            let (k, v) = split_assignment(o)?;
            apply_override(&mut table, k, v)?;
        }
        ExperimentConfig::from_table(table)
    }

    #[test]
    fn defaults_fill_everything() {
        let c = load("", &[]).unwrap();
        assert_eq!(c.partition.num_clients, 50);
        assert_eq!(c.federation.total_rounds, 200);
        assert_eq!(c.federation.policy, Policy::LeanfedAdaptive);
        assert_eq!(c.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(c.dataset.synthetic, SyntheticConfig::default());
        assert!(c.output_dir.is_none());
    }

    #[test]
    fn overrides_apply_and_change_fingerprint() {
        let base = load("[federation]\nlambda = 1.0\n", &[]).unwrap();
        let c = load(
            "[federation]\nlambda = 1.0\n",
            &["federation.lambda=0.2", "policy=fedavg", "seeds=[7, 8]"],
        )
        .unwrap();
        assert_eq!(c.federation.lambda, 0.2);
        assert_eq!(c.federation.policy, Policy::Fedavg);
        assert_eq!(c.seeds, vec![7, 8]);
        assert_ne!(base.fingerprint(), c.fingerprint());
        assert_eq!(base.dataset_fingerprint(), c.dataset_fingerprint());
        assert_eq!(load("", &["seeds=3"]).unwrap().seeds, vec![3]);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = load("[federation]\nlamda = 0.5\n", &[]).unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
        let err = load("", &["energy.alpha_sd=0.3"]).unwrap_err();
        assert!(err.to_string().contains("alpha_sd"), "{err}");
        let err = load("bogus = 1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in [
            "federation.lambda=0",
            "federation.lambda=1.5",
            "partition.gamma=-1",
            "federation.policy=fedprox",
            "energy.clip_lo=0",
            "seeds=[]",
            "dataset.source=csv",
        ] {
            assert!(
                matches!(load("", &[bad]), Err(Error::Config(_))),
                "{bad} accepted"
            );
        }
    }

    #[test]
    fn threads_and_output_do_not_affect_fingerprint() {
        let a = load("output_dir = \"a\"\n", &["threads=4"]).unwrap();
        let b = load("output_dir = \"b\"\n", &[]).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
    }

    #[test]
    fn override_into_scalar_is_an_error() {
        assert!(load("", &["seeds.x=1"]).is_err());
        assert!(split_assignment("novalue").is_err());
    }
}
