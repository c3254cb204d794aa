//! Multinomial logistic regression trained with mini-batch SGD.
//!
//! Parameters are a `C × (d + 1)` row-major matrix; the last column is the bias,
//! applied to an implicit constant-one feature.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    weights: Vec<f64>,
    num_classes: usize,
    dim: usize,
}

impl ModelParams {
    /// All-zero parameters: every class gets the same score.
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        assert!(
            num_classes >= 2 && dim >= 1,
            "model needs C >= 2 and d >= 1"
        );
        Self {
            weights: vec![0.0; num_classes * (dim + 1)],
            num_classes,
            dim,
        }
    }

    pub fn from_weights(num_classes: usize, dim: usize, weights: Vec<f64>) -> Result<Self> {
        if num_classes < 2 || dim == 0 {
            return Err(Error::config("model needs C >= 2 and d >= 1"));
        }
        if weights.len() != num_classes * (dim + 1) {
            return Err(Error::config(format!(
                "expected {} weights for a {num_classes}×{} model, got {}",
                num_classes * (dim + 1),
                dim + 1,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numeric("model weights must be finite".into()));
        }
        Ok(Self {
            weights,
            num_classes,
            dim,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Row `c`: `d` feature weights followed by the bias.
    pub fn row(&self, c: usize) -> &[f64] {
        let width = self.dim + 1;
        &self.weights[c * width..(c + 1) * width]
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.num_classes == other.num_classes && self.dim == other.dim
    }

    pub fn squared_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum()
    }

    fn scores(&self, x: &[f64], out: &mut [f64]) {
        for (c, s) in out.iter_mut().enumerate() {
            let row = self.row(c);
            let (w, bias) = row.split_at(self.dim);
            *s = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias[0];
        }
    }

    /// Highest-scoring class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut scores = vec![0.0; self.num_classes];
        self.scores(x, &mut scores);
        argmax(&scores)
    }
}

pub fn init_params(num_classes: usize, dim: usize) -> ModelParams {
    ModelParams::zeros(num_classes, dim)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 64,
            local_epochs: 5,
            weight_decay: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "learning_rate must be a positive finite number",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs must be at least 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(
                "weight_decay must be a non-negative finite number",
            ));
        }
        Ok(())
    }
}

/// L2-regularized mean cross-entropy over a batch and its exact gradient.
///
/// `features` is a row-major `m × d` block. The softmax subtracts the row maximum
/// before exponentiating, so large scores stay finite.
pub fn loss_and_grad(
    params: &ModelParams,
    features: &[f64],
    labels: &[usize],
    weight_decay: f64,
) -> Result<(f64, ModelParams)> {
    let (classes, dim) = (params.num_classes, params.dim);
    let m = labels.len();
    if m == 0 {
        return Err(Error::config("empty batch"));
    }
    if features.len() != m * dim {
        return Err(Error::config(format!(
            "batch has {} feature values for {m} rows of dimension {dim}",
            features.len()
        )));
    }
    if features.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite input feature".into()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::config(format!("label {bad} outside [0, {classes})")));
    }

    let width = dim + 1;
    let mut grad = vec![0.0; params.weights.len()];
    let mut probs = vec![0.0; classes];
    let mut loss = 0.0;

    for (x, &y) in features.chunks_exact(dim).zip(labels) {
        params.scores(x, &mut probs);
        let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted_target = probs[y] - max;
        let mut total = 0.0;
        for p in probs.iter_mut() {
            *p = (*p - max).exp();
            total += *p;
        }
        // -log softmax_y = log(total) - (s_y - max)
        loss += total.ln() - shifted_target;
        for p in probs.iter_mut() {
            *p /= total;
        }
        probs[y] -= 1.0;
        for (c, &delta) in probs.iter().enumerate() {
            let g = &mut grad[c * width..(c + 1) * width];
            for (gj, &xj) in g.iter_mut().zip(x) {
                *gj += delta * xj;
            }
            g[dim] += delta;
        }
    }

    let inv_m = 1.0 / m as f64;
    for (g, w) in grad.iter_mut().zip(&params.weights) {
        *g = *g * inv_m + weight_decay * w;
    }
    let loss = loss * inv_m + 0.5 * weight_decay * params.squared_norm();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite ({loss})")));
    }
    Ok((
        loss,
        ModelParams {
            weights: grad,
            num_classes: classes,
            dim,
        },
    ))
}

fn gather(data: &Dataset, rows: &[usize], features: &mut Vec<f64>, labels: &mut Vec<usize>) {
    features.clear();
    labels.clear();
    for &i in rows {
        features.extend_from_slice(data.row(i));
        labels.push(data.label(i));
    }
}

/// One shuffled pass over `rows`, taking an SGD step per batch. The last batch may be short.
pub fn sgd_epoch(
    params: &mut ModelParams,
    data: &Dataset,
    rows: &[usize],
    config: &TrainConfig,
    rng: &mut StreamRng,
) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::config("cannot train on an empty shard"));
    }
    if params.dim != data.dim() || params.num_classes != data.num_classes() {
        return Err(Error::config("model shape does not match the dataset"));
    }
    let mut order = rows.to_vec();
    order.shuffle(rng);
    let mut features = Vec::with_capacity(config.batch_size.min(order.len()) * data.dim());
    let mut labels = Vec::with_capacity(config.batch_size.min(order.len()));
    for batch in order.chunks(config.batch_size) {
        gather(data, batch, &mut features, &mut labels);
        let (_, grad) = loss_and_grad(params, &features, &labels, config.weight_decay)?;
        for (w, g) in params.weights.iter_mut().zip(&grad.weights) {
            *w -= config.learning_rate * g;
        }
    }
    Ok(())
}

/// Mean regularized loss over `rows` of `data`.
pub fn dataset_loss(
    params: &ModelParams,
    data: &Dataset,
    rows: &[usize],
    weight_decay: f64,
) -> Result<f64> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    gather(data, rows, &mut features, &mut labels);
    loss_and_grad(params, &features, &labels, weight_decay).map(|(loss, _)| loss)
}

/// Fraction of rows whose argmax prediction matches the label.
pub fn evaluate(params: &ModelParams, test: &Dataset) -> f64 {
    accuracy_on(params, test, 0..test.len())
}

pub fn accuracy_on(
    params: &ModelParams,
    data: &Dataset,
    rows: impl IntoIterator<Item = usize>,
) -> f64 {
    let mut scores = vec![0.0; params.num_classes];
    let (mut correct, mut total) = (0usize, 0usize);
    for i in rows {
        params.scores(data.row(i), &mut scores);
        correct += usize::from(argmax(&scores) == data.label(i));
        total += 1;
    }
    if total == 0 {
        return 0.0;
    }
    correct as f64 / total as f64
}
