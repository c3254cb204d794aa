//! Labeled datasets and their Dirichlet label-skew split across clients.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Row-major `n × d` feature matrix with one integer label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    dim: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        dim: usize,
        split: Split,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if dim == 0 {
            return Err(Error::config("feature dimension must be at least 1"));
        }
        if labels.is_empty() {
            return Err(Error::config("dataset must contain at least one row"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::config(format!(
                "feature matrix has {} entries, expected {} rows × {} columns",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::config(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if let Some(pos) = features.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite feature at row {}, column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            dim,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Fraction of rows carrying each label.
    pub fn label_distribution(&self) -> Vec<f64> {
        histogram(self.labels.iter().copied(), self.num_classes, self.len())
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Isotropic Gaussian classes with means spread `class_separation` away from the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub class_separation: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 32,
            n_train: 10_000,
            n_test: 2_000,
            class_separation: 2.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("synthetic num_classes must be at least 2"));
        }
        if self.dim < 2 {
            return Err(Error::config("synthetic dim must be at least 2"));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::config(
                "synthetic n_train and n_test must be positive",
            ));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(Error::config(
                "class_separation must be a positive finite number",
            ));
        }
        Ok(())
    }
}

/// Draws a train and a test set from the same class-conditional Gaussians.
///
/// When `num_classes <= dim` the class means form a random orthonormal frame scaled by
/// `class_separation`, so every pair of classes is equally far apart. Otherwise the means
/// are independent random unit directions.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(Dataset, Dataset)> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, Domain::Synthetic, 0, 0);
    let means = class_means(
        config.num_classes,
        config.dim,
        config.class_separation,
        &mut rng,
    );
    let train = sample_split(config, &means, config.n_train, Split::Train, &mut rng)?;
    let test = sample_split(config, &means, config.n_test, Split::Test, &mut rng)?;
    Ok((train, test))
}

fn gaussian_vector(dim: usize, rng: &mut StreamRng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

fn class_means(classes: usize, dim: usize, separation: f64, rng: &mut StreamRng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while basis.len() < classes {
        let mut v = gaussian_vector(dim, rng);
        if classes <= dim {
            // Gram-Schmidt against the directions accepted so far.
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        if normalize(&mut v) > 1e-8 {
            basis.push(v);
        }
    }
    basis
        .into_iter()
        .map(|v| v.into_iter().map(|x| x * separation).collect())
        .collect()
}

fn sample_split(
    config: &SyntheticConfig,
    means: &[Vec<f64>],
    n: usize,
    split: Split,
    rng: &mut StreamRng,
) -> Result<Dataset> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % config.num_classes).collect();
    labels.shuffle(rng);
    let mut features = Vec::with_capacity(n * config.dim);
    for &y in &labels {
        for &m in &means[y] {
            let noise: f64 = StandardNormal.sample(rng);
            features.push(m + noise);
        }
    }
    Dataset::new(features, labels, config.num_classes, config.dim, split)
}

// ---------------------------------------------------------------------------
// CSV loading
// ---------------------------------------------------------------------------

struct RawTable {
    features: Vec<f64>,
    labels: Vec<i64>,
    dim: usize,
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_label(field: &str) -> Option<i64> {
    if let Ok(v) = field.parse::<i64>() {
        return Some(v);
    }
    let v: f64 = field.parse().ok()?;
    (v.is_finite() && v.fract() == 0.0 && v.abs() < 9.0e15).then_some(v as i64)
}

fn read_raw(path: &Path) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_error(path, 1, format!("{other:?}")),
        })?;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dim: Option<usize> = None;
    let mut first_record = true;

    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let is_header = first_record && record.iter().any(|f| f.parse::<f64>().is_err());
        first_record = false;
        if is_header {
            continue;
        }
        if record.len() < 2 {
            return Err(parse_error(
                path,
                line,
                "expected at least one feature and a label",
            ));
        }
        let row_dim = record.len() - 1;
        match dim {
            None => dim = Some(row_dim),
            Some(d) if d != row_dim => {
                return Err(parse_error(
                    path,
                    line,
                    format!("ragged row: {} fields, expected {}", record.len(), d + 1),
                ));
            }
            Some(_) => {}
        }
        for (col, field) in record.iter().take(row_dim).enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                parse_error(
                    path,
                    line,
                    format!("non-numeric feature {field:?} in column {}", col + 1),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_error(
                    path,
                    line,
                    format!("non-finite feature {field:?}"),
                ));
            }
            features.push(v);
        }
        let label = parse_label(&record[row_dim]).ok_or_else(|| {
            parse_error(
                path,
                line,
                format!("label {:?} is not an integer", &record[row_dim]),
            )
        })?;
        labels.push(label);
    }

    let dim = dim.ok_or_else(|| parse_error(path, 1, "file contains no data rows"))?;
    Ok(RawTable {
        features,
        labels,
        dim,
    })
}

fn remap(raw: RawTable, classes: &[i64], split: Split) -> Result<Dataset> {
    let labels = raw
        .labels
        .iter()
        .map(|l| {
            classes
                .binary_search(l)
                .expect("label drawn from class list")
        })
        .collect();
    Dataset::new(raw.features, labels, classes.len(), raw.dim, split)
}

/// Loads `f_1,...,f_d,label` rows. A non-numeric first row is treated as a header.
/// Labels are remapped to `[0, C)` in ascending order of their original values.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let raw = read_raw(path.as_ref())?;
    let classes: Vec<i64> = raw
        .labels
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    remap(raw, &classes, Split::Train)
}

/// Loads a train/test pair with one label mapping built from the union of both files.
pub fn load_csv_split(
    train: impl AsRef<Path>,
    test: impl AsRef<Path>,
) -> Result<(Dataset, Dataset)> {
    let (train_path, test_path) = (train.as_ref(), test.as_ref());
    let train_raw = read_raw(train_path)?;
    let test_raw = read_raw(test_path)?;
    if train_raw.dim != test_raw.dim {
        return Err(parse_error(
            test_path,
            1,
            format!(
                "test set has {} features, train set has {}",
                test_raw.dim, train_raw.dim
            ),
        ));
    }
    let classes: Vec<i64> = train_raw
        .labels
        .iter()
        .chain(&test_raw.labels)
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    Ok((
        remap(train_raw, &classes, Split::Train)?,
        remap(test_raw, &classes, Split::Test)?,
    ))
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub num_clients: usize,
    /// Dirichlet concentration. Small values skew labels, `1e3` is effectively iid.
    pub gamma: f64,
    pub min_shard_size: usize,
    pub seed: u64,
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("num_clients must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma must be a positive finite number"));
        }
        if self.min_shard_size == 0 {
            return Err(Error::config("min_shard_size must be at least 1"));
        }
        Ok(())
    }
}

/// One device's rows of the training set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draws one point from a symmetric Dirichlet over `k` categories via normalized gammas.
pub fn sample_dirichlet(concentration: f64, k: usize, rng: &mut StreamRng) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("concentration validated positive");
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter_mut().for_each(|x| *x /= total);
    } else {
        // Every gamma draw underflowed; the limiting distribution is a uniform vertex.
        let hot = rng.random_range(0..k);
        draws
            .iter_mut()
            .enumerate()
            .for_each(|(i, x)| *x = if i == hot { 1.0 } else { 0.0 });
    }
    draws
}

/// Integer counts summing to `total` whose deviation from `proportions[i] * total` is
/// below one. Remainders are handed out largest first, ties to the lower index.
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor().max(0.0) as usize).collect();
    let assigned: usize = counts.iter().sum();
    if assigned > total {
        // Only reachable through rounding noise in an unnormalized input.
        let mut excess = assigned - total;
        for c in counts.iter_mut().rev() {
            let take = excess.min(*c);
            *c -= take;
            excess -= take;
        }
        return counts;
    }
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Splits the training rows across clients with per-class Dirichlet proportions.
///
/// Class members are shuffled and dealt out in contiguous runs sized by
/// [`largest_remainder`]. Shards below `min_shard_size` are then topped up with rows
/// drawn uniformly from whichever shard is currently largest.
pub fn partition_dirichlet(train: &Dataset, config: &PartitionConfig) -> Result<Vec<ClientShard>> {
    config.validate()?;
    let clients = config.num_clients;
    let needed = clients
        .checked_mul(config.min_shard_size)
        .ok_or_else(|| Error::config("num_clients × min_shard_size overflows"))?;
    if needed > train.len() {
        return Err(Error::config(format!(
            "{clients} clients × min_shard_size {} exceeds the {} training rows",
            config.min_shard_size,
            train.len()
        )));
    }

    let mut rng = rng::stream(config.seed, Domain::Partition, 0, 0);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); train.num_classes()];
    for (i, &y) in train.labels().iter().enumerate() {
        members[y].push(i);
    }

    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for class_rows in &mut members {
        class_rows.shuffle(&mut rng);
        let proportions = sample_dirichlet(config.gamma, clients, &mut rng);
        let counts = largest_remainder(&proportions, class_rows.len());
        let mut offset = 0;
        for (shard, count) in shards.iter_mut().zip(counts) {
            shard.extend_from_slice(&class_rows[offset..offset + count]);
            offset += count;
        }
    }

    while let Some(short) = shards.iter().position(|s| s.len() < config.min_shard_size) {
        let donor = (0..clients)
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let pick = rng.random_range(0..shards[donor].len());
        let row = shards[donor].swap_remove(pick);
        shards[short].push(row);
    }

    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(client_id, mut indices)| {
            indices.sort_unstable();
            ClientShard { client_id, indices }
        })
        .collect())
}

fn histogram(labels: impl Iterator<Item = usize>, classes: usize, n: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    labels.for_each(|y| counts[y] += 1);
    counts.into_iter().map(|c| c as f64 / n as f64).collect()
}

/// Label distribution of one shard.
pub fn label_histogram(shard: &ClientShard, train: &Dataset) -> Result<Vec<f64>> {
    if shard.is_empty() {
        return Err(Error::config(format!("shard {} is empty", shard.client_id)));
    }
    Ok(histogram(
        shard.indices.iter().map(|&i| train.label(i)),
        train.num_classes(),
        shard.len(),
    ))
}

/// Total variation distance between two distributions over the same support.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Mean over shards of the TV distance between the shard's labels and the global labels.
pub fn mean_tv_to_global(shards: &[ClientShard], train: &Dataset) -> Result<f64> {
    let global = train.label_distribution();
    let mut total = 0.0;
    for shard in shards {
        total += tv_distance(&label_histogram(shard, train)?, &global);
    }
    Ok(total / shards.len() as f64)
}
