//! Battery budgets and energy accounting.
//!
//! Energy is measured in abstract units: a full pass over a device's data costs
//! `|D_e| / |D|`, and the budget scales with the same ratio times a random
//! fraction of the total round count.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// Distribution of the two budget factors. Each is Gaussian and then clipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    pub alpha_mean: f64,
    /// Variance, not standard deviation.
    pub alpha_var: f64,
    pub beta_mean: f64,
    pub beta_var: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub seed: u64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            alpha_mean: 0.5,
            alpha_var: 0.5,
            beta_mean: 0.5,
            beta_var: 0.5,
            clip_lo: 0.1,
            clip_hi: 1.0,
            seed: 0,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_lo > 0.0 && self.clip_lo <= self.clip_hi && self.clip_hi.is_finite()) {
            return Err(Error::config(format!(
                "energy clip range must satisfy 0 < clip_lo <= clip_hi, got [{}, {}]",
                self.clip_lo, self.clip_hi
            )));
        }
        for (name, var) in [("alpha_var", self.alpha_var), ("beta_var", self.beta_var)] {
            if !(var >= 0.0 && var.is_finite()) {
                return Err(Error::config(format!(
                    "{name} must be a non-negative finite number"
                )));
            }
        }
        for (name, mean) in [
            ("alpha_mean", self.alpha_mean),
            ("beta_mean", self.beta_mean),
        ] {
            if !mean.is_finite() {
                return Err(Error::config(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    pub fn clip(&self, x: f64) -> f64 {
        x.clamp(self.clip_lo, self.clip_hi)
    }
}

/// One device's battery. The remaining budget can only go down, through [`DeviceEnergy::charge_epoch`].
///
/// The battery stores the cumulative data fraction trained on rather than a running
/// balance, so `initial - cost * spent` is exact whenever the epochs used whole data.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceEnergy {
    client_id: usize,
    budget_initial: f64,
    per_epoch_cost: f64,
    fraction_spent: f64,
}

impl DeviceEnergy {
    pub fn new(client_id: usize, budget: f64, per_epoch_cost: f64) -> Result<Self> {
        if budget.is_nan() || budget < 0.0 {
            return Err(Error::config(format!(
                "device {client_id}: budget must be >= 0, got {budget}"
            )));
        }
        if !(per_epoch_cost > 0.0 && per_epoch_cost.is_finite()) {
            return Err(Error::config(format!(
                "device {client_id}: per-epoch cost must be positive, got {per_epoch_cost}"
            )));
        }
        Ok(Self {
            client_id,
            budget_initial: budget,
            per_epoch_cost,
            fraction_spent: 0.0,
        })
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }

    pub fn budget_initial(&self) -> f64 {
        self.budget_initial
    }

    pub fn budget_remaining(&self) -> f64 {
        self.budget_initial - self.per_epoch_cost * self.fraction_spent
    }

    /// Sum of the data fractions of every epoch charged so far.
    pub fn fraction_spent(&self) -> f64 {
        self.fraction_spent
    }

    pub fn per_epoch_cost(&self) -> f64 {
        self.per_epoch_cost
    }

    /// Pays for one local epoch over a fraction `eta` of the data.
    ///
    /// No affordability check: the caller gates on [`is_active`](Self::is_active) before the
    /// epoch, so the last epoch may leave the budget negative.
    pub fn charge_epoch(&mut self, eta: f64) {
        debug_assert!(
            (0.0..=1.0).contains(&eta),
            "data fraction {eta} outside [0, 1]"
        );
        self.fraction_spent += eta;
    }

    pub fn is_active(&self) -> bool {
        self.budget_remaining() > 0.0
    }

    /// Rounds of `local_epochs` full-data epochs the remaining budget still pays for.
    pub fn max_rounds(&self, local_epochs: usize) -> f64 {
        max_rounds(self.budget_remaining(), self.per_epoch_cost, local_epochs)
    }
}

/// `budget / (per_epoch_cost * local_epochs)`, clamped below at zero.
pub fn max_rounds(budget: f64, per_epoch_cost: f64, local_epochs: usize) -> f64 {
    (budget / (per_epoch_cost * local_epochs as f64)).max(0.0)
}

/// Samples one battery per shard.
///
/// With `share = |D_e| / total_samples`, the budget is `alpha * share * beta * total_rounds`
/// and a full-data epoch costs `share`, where `alpha` and `beta` are independent clipped
/// Gaussians drawn in client order.
pub fn sample_fleet(
    shard_sizes: &[usize],
    total_samples: usize,
    total_rounds: usize,
    config: &EnergyConfig,
) -> Result<Vec<DeviceEnergy>> {
    config.validate()?;
    if total_rounds == 0 {
        return Err(Error::config("total_rounds must be at least 1"));
    }
    if let Some(id) = shard_sizes.iter().position(|&s| s == 0) {
        return Err(Error::config(format!("shard {id} is empty")));
    }
    let assigned: usize = shard_sizes.iter().sum();
    if assigned > total_samples {
        return Err(Error::config(format!(
            "shards hold {assigned} samples but the dataset has only {total_samples}"
        )));
    }

    let alpha = Normal::new(config.alpha_mean, config.alpha_var.sqrt())
        .map_err(|e| Error::config(format!("alpha distribution: {e}")))?;
    let beta = Normal::new(config.beta_mean, config.beta_var.sqrt())
        .map_err(|e| Error::config(format!("beta distribution: {e}")))?;
    let mut rng = rng::stream(config.seed, Domain::Energy, 0, 0);

    shard_sizes
        .iter()
        .enumerate()
        .map(|(id, &size)| {
            let a = config.clip(alpha.sample(&mut rng));
            let b = config.clip(beta.sample(&mut rng));
            let share = size as f64 / total_samples as f64;
            DeviceEnergy::new(id, a * share * b * total_rounds as f64, share)
        })
        .collect()
}
