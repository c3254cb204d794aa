//! The federation engine: who trains, on how much data, and how results are merged.
//!
//! One round is: sample participants among devices with battery left, let each
//! participant pick its data fraction, run the local round (at most `L` epochs, each
//! gated on the battery and paid for afterwards), and average the updates of the
//! devices that still had charge when they finished. Devices whose battery ran out
//! during the round discard their work.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, Dataset};
use crate::energy::DeviceEnergy;
use crate::error::{Error, Result};
use crate::metrics::{DepletionRecord, MetricsLog, RoundRecord};
use crate::model::{self, ModelParams, TrainConfig};
use crate::rng::{self, Domain, StreamRng};

/// How each participant chooses its data fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Always the whole shard.
    Fedavg,
    /// Fraction fixed once from the initial budget and the total round count.
    LeanfedStatic,
    /// Fraction recomputed every round from the remaining budget and rounds left.
    LeanfedAdaptive,
}

impl Policy {
    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Fedavg => "fedavg",
            Policy::LeanfedStatic => "leanfed_static",
            Policy::LeanfedAdaptive => "leanfed_adaptive",
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Policy::Fedavg),
            "leanfed_static" => Ok(Policy::LeanfedStatic),
            "leanfed_adaptive" => Ok(Policy::LeanfedAdaptive),
            other => Err(Error::config(format!(
                "unknown policy {other:?} (expected fedavg, leanfed_static or leanfed_adaptive)"
            ))),
        }
    }
}

/// Where local rounds run. Results are identical either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Serial,
    /// Rayon pool with this many workers; 0 uses rayon's default.
    Parallel {
        threads: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub total_rounds: usize,
    pub participation_rate: f64,
    pub policy: Policy,
    pub num_clients: usize,
    pub train: TrainConfig,
    /// Per-client epoch counts; `None` gives every client `train.local_epochs`.
    pub local_epochs: Option<Vec<usize>>,
    pub master_seed: u64,
    pub execution: Execution,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_rounds == 0 {
            return Err(Error::config("total_rounds must be at least 1"));
        }
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return Err(Error::config(format!(
                "participation rate must be in (0, 1], got {}",
                self.participation_rate
            )));
        }
        if self.num_clients == 0 {
            return Err(Error::config("num_clients must be at least 1"));
        }
        self.train.validate()?;
        if let Some(epochs) = &self.local_epochs {
            if epochs.len() != self.num_clients {
                return Err(Error::config(format!(
                    "local_epochs lists {} clients, expected {}",
                    epochs.len(),
                    self.num_clients
                )));
            }
            if epochs.contains(&0) {
                return Err(Error::config("every client needs at least one local epoch"));
            }
        }
        Ok(())
    }

    pub fn epochs_for(&self, client_id: usize) -> usize {
        self.local_epochs
            .as_ref()
            .map_or(self.train.local_epochs, |e| e[client_id])
    }
}

// ---------------------------------------------------------------------------
// Data-fraction policies
// ---------------------------------------------------------------------------

/// `clamp(B / (λ R b L), 0, 1)` from the initial budget and total rounds.
pub fn data_fraction_static(
    budget_initial: f64,
    per_epoch_cost: f64,
    local_epochs: usize,
    lambda: f64,
    total_rounds: usize,
) -> f64 {
    let eta =
        budget_initial / (lambda * total_rounds as f64 * per_epoch_cost * local_epochs as f64);
    eta.clamp(0.0, 1.0)
}

/// `clamp(B / (max(1, λ · rounds_remaining) b L), 0, 1)` from the remaining budget.
///
/// Spreads what is left evenly over the participations still expected, so a device
/// taking part every round under `λ = 1` reaches round `R` with charge.
pub fn data_fraction_adaptive(
    budget_remaining: f64,
    per_epoch_cost: f64,
    local_epochs: usize,
    lambda: f64,
    rounds_remaining: usize,
) -> f64 {
    let expected = (lambda * rounds_remaining as f64).max(1.0);
    let eta = budget_remaining / (expected * per_epoch_cost * local_epochs as f64);
    eta.clamp(0.0, 1.0)
}

fn policy_fraction(
    policy: Policy,
    device: &DeviceEnergy,
    epochs: usize,
    config: &FederationConfig,
    round: usize,
) -> f64 {
    match policy {
        Policy::Fedavg => 1.0,
        Policy::LeanfedStatic => data_fraction_static(
            device.budget_initial(),
            device.per_epoch_cost(),
            epochs,
            config.participation_rate,
            config.total_rounds,
        ),
        Policy::LeanfedAdaptive => data_fraction_adaptive(
            device.budget_remaining(),
            device.per_epoch_cost(),
            epochs,
            config.participation_rate,
            config.total_rounds - round + 1,
        ),
    }
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Participants per round: `λ E` rounded half-up, at least one.
pub fn participant_target(lambda: f64, num_clients: usize) -> usize {
    ((lambda * num_clients as f64 + 0.5).floor() as usize).clamp(1, num_clients.max(1))
}

/// Uniform sample without replacement from the active clients, returned sorted.
/// When fewer clients are active than the target, all of them take part.
pub fn sample_participants(
    active: &[usize],
    lambda: f64,
    num_clients: usize,
    rng: &mut StreamRng,
) -> Vec<usize> {
    let target = participant_target(lambda, num_clients);
    if active.len() <= target {
        return active.to_vec();
    }
    let mut chosen: Vec<usize> = index::sample(rng, active.len(), target)
        .into_iter()
        .map(|i| active[i])
        .collect();
    chosen.sort_unstable();
    chosen
}

/// Rows a client trains on this round: `max(1, floor(η |D_e|))` drawn without
/// replacement, the whole shard in order when `η = 1`, nothing when `η = 0`.
pub fn subsample_shard(shard: &ClientShard, eta: f64, rng: &mut StreamRng) -> Vec<usize> {
    let n = shard.len();
    if eta <= 0.0 || n == 0 {
        return Vec::new();
    }
    let k = ((eta * n as f64).floor() as usize).max(1);
    if eta >= 1.0 || k >= n {
        return shard.indices.clone();
    }
    let mut rows: Vec<usize> = index::sample(rng, n, k)
        .into_iter()
        .map(|i| shard.indices[i])
        .collect();
    rows.sort_unstable();
    rows
}

// ---------------------------------------------------------------------------
// Local round
// ---------------------------------------------------------------------------

/// One epoch of local training. The default is [`SgdTrainer`]; tests substitute
/// instrumented trainers.
pub trait LocalTrainer: Sync {
    fn train_epoch(
        &self,
        client_id: usize,
        params: &mut ModelParams,
        data: &Dataset,
        rows: &[usize],
        config: &TrainConfig,
        rng: &mut StreamRng,
    ) -> Result<()>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SgdTrainer;

impl LocalTrainer for SgdTrainer {
    fn train_epoch(
        &self,
        _client_id: usize,
        params: &mut ModelParams,
        data: &Dataset,
        rows: &[usize],
        config: &TrainConfig,
        rng: &mut StreamRng,
    ) -> Result<()> {
        model::sgd_epoch(params, data, rows, config, rng)
    }
}

/// A finished local round, ready for aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub client_id: usize,
    pub params: ModelParams,
    pub shard_size: usize,
    pub epochs_completed: usize,
    pub fraction_used: f64,
}

/// Runs one device's round and returns its update, or `None` when the battery is
/// empty afterwards (the partial work is thrown away).
///
/// `config.local_epochs` is the epoch count for this device.
#[allow(clippy::too_many_arguments)]
pub fn local_round(
    trainer: &dyn LocalTrainer,
    data: &Dataset,
    shard: &ClientShard,
    device: &mut DeviceEnergy,
    global: &ModelParams,
    eta: f64,
    config: &TrainConfig,
    rng: &mut StreamRng,
) -> Result<Option<LocalUpdate>> {
    if !device.is_active() {
        return Ok(None);
    }
    let mut params = global.clone();
    let rows = subsample_shard(shard, eta, rng);
    let mut epochs_completed = 0;
    for _ in 0..config.local_epochs {
        if !device.is_active() {
            break;
        }
        if !rows.is_empty() {
            trainer.train_epoch(shard.client_id, &mut params, data, &rows, config, rng)?;
        }
        device.charge_epoch(eta);
        epochs_completed += 1;
    }
    if !device.is_active() {
        return Ok(None);
    }
    Ok(Some(LocalUpdate {
        client_id: shard.client_id,
        params,
        shard_size: shard.len(),
        epochs_completed,
        fraction_used: eta,
    }))
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub params: ModelParams,
    /// Sum of the normalized weights actually applied; 1 up to rounding.
    pub weight_sum: f64,
}

/// Shard-size weighted mean of the senders' parameters, with weights normalized over
/// the senders only. Summation runs in ascending client id for reproducibility.
pub fn aggregate(updates: &[LocalUpdate]) -> Result<Aggregate> {
    let first = updates.first().ok_or(Error::StalledRound)?;
    if updates.iter().any(|u| !u.params.same_shape(&first.params)) {
        return Err(Error::config("updates have mismatched parameter shapes"));
    }
    let total: usize = updates.iter().map(|u| u.shard_size).sum();
    if total == 0 {
        return Err(Error::config("updates carry no samples"));
    }

    let mut ordered: Vec<&LocalUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);

    let mut acc = vec![0.0; first.params.weights().len()];
    let mut weight_sum = 0.0;
    for update in ordered {
        let w = update.shard_size as f64 / total as f64;
        weight_sum += w;
        for (a, p) in acc.iter_mut().zip(update.params.weights()) {
            *a += w * p;
        }
    }
    Ok(Aggregate {
        params: ModelParams::from_weights(first.params.num_classes(), first.params.dim(), acc)?,
        weight_sum,
    })
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

/// Everything that happened in one round, handed to the observer of
/// [`run_federation_with`].
#[derive(Debug)]
pub struct RoundOutcome<'a> {
    pub round_index: usize,
    pub participants: &'a [usize],
    pub completed: &'a [LocalUpdate],
    pub depleted_this_round: &'a [usize],
    pub global_params_after: &'a ModelParams,
}

fn check_inputs(
    train: &Dataset,
    test: &Dataset,
    shards: &[ClientShard],
    fleet: &[DeviceEnergy],
    config: &FederationConfig,
) -> Result<()> {
    config.validate()?;
    if shards.len() != config.num_clients || fleet.len() != config.num_clients {
        return Err(Error::config(format!(
            "expected {} clients, got {} shards and {} devices",
            config.num_clients,
            shards.len(),
            fleet.len()
        )));
    }
    for (i, (shard, device)) in shards.iter().zip(fleet).enumerate() {
        if shard.client_id != i || device.client_id() != i {
            return Err(Error::config(format!(
                "client {i} is out of order in shards or fleet"
            )));
        }
        if shard.is_empty() {
            return Err(Error::config(format!("shard {i} is empty")));
        }
        if let Some(&bad) = shard.indices.iter().find(|&&r| r >= train.len()) {
            return Err(Error::config(format!(
                "shard {i} references row {bad} beyond the train set"
            )));
        }
        if !device.is_active() {
            return Err(Error::config(format!(
                "device {i} has no energy at the start of training"
            )));
        }
    }
    if train.dim() != test.dim() || train.num_classes() != test.num_classes() {
        return Err(Error::config(
            "train and test sets disagree on dimension or class count",
        ));
    }
    Ok(())
}

/// Runs the whole federation with SGD local training. `fleet` is drained in place.
pub fn run_federation(
    train: &Dataset,
    test: &Dataset,
    shards: &[ClientShard],
    fleet: &mut [DeviceEnergy],
    config: &FederationConfig,
) -> Result<MetricsLog> {
    run_federation_with(train, test, shards, fleet, config, &SgdTrainer, |_| {})
}

/// [`run_federation`] with a custom local trainer and a per-round observer.
pub fn run_federation_with<F>(
    train: &Dataset,
    test: &Dataset,
    shards: &[ClientShard],
    fleet: &mut [DeviceEnergy],
    config: &FederationConfig,
    trainer: &dyn LocalTrainer,
    mut observe: F,
) -> Result<MetricsLog>
where
    F: FnMut(&RoundOutcome<'_>),
{
    check_inputs(train, test, shards, fleet, config)?;

    let pool = match config.execution {
        Execution::Serial => None,
        Execution::Parallel { threads } => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::config(format!("thread pool: {e}")))?,
        ),
    };

    let mut global = model::init_params(train.num_classes(), train.dim());
    let mut rounds = Vec::with_capacity(config.total_rounds);
    let mut weight_sums = Vec::with_capacity(config.total_rounds);
    let mut depletions: Vec<DepletionRecord> = (0..config.num_clients)
        .map(|client_id| DepletionRecord {
            client_id,
            depletion_round: None,
        })
        .collect();

    for round in 1..=config.total_rounds {
        let active: Vec<usize> = fleet
            .iter()
            .filter(|d| d.is_active())
            .map(|d| d.client_id())
            .collect();
        let mut sampler = rng::stream(config.master_seed, Domain::Participants, round as u64, 0);
        let participants = sample_participants(
            &active,
            config.participation_rate,
            config.num_clients,
            &mut sampler,
        );

        let mut jobs: Vec<(&mut DeviceEnergy, f64, TrainConfig)> =
            Vec::with_capacity(participants.len());
        let mut selected = participants.iter().peekable();
        for device in fleet.iter_mut() {
            if selected.peek() == Some(&&device.client_id()) {
                selected.next();
                let epochs = config.epochs_for(device.client_id());
                let eta = policy_fraction(config.policy, device, epochs, config, round);
                let train_cfg = TrainConfig {
                    local_epochs: epochs,
                    ..config.train.clone()
                };
                jobs.push((device, eta, train_cfg));
            }
        }
        let mean_eta = if jobs.is_empty() {
            0.0
        } else {
            jobs.iter().map(|(_, eta, _)| eta).sum::<f64>() / jobs.len() as f64
        };

        let run_job = |(device, eta, train_cfg): (&mut DeviceEnergy, f64, TrainConfig)| {
            let id = device.client_id();
            let mut stream = rng::stream(
                config.master_seed,
                Domain::ClientRound,
                id as u64,
                round as u64,
            );
            let update = local_round(
                trainer,
                train,
                &shards[id],
                device,
                &global,
                eta,
                &train_cfg,
                &mut stream,
            )?;
            Ok::<_, Error>((id, device.is_active(), update))
        };
        let results: Vec<Result<_>> = match &pool {
            None => jobs.into_iter().map(run_job).collect(),
            Some(pool) => pool.install(|| jobs.into_par_iter().map(run_job).collect()),
        };

        let mut completed = Vec::new();
        let mut depleted = Vec::new();
        for result in results {
            let (id, still_active, update) = result?;
            if !still_active {
                depleted.push(id);
                depletions[id].depletion_round = Some(round);
            }
            completed.extend(update);
        }

        match aggregate(&completed) {
            Ok(agg) => {
                global = agg.params;
                weight_sums.push(Some(agg.weight_sum));
            }
            Err(Error::StalledRound) => weight_sums.push(None),
            Err(e) => return Err(e),
        }

        let test_accuracy = model::evaluate(&global, test);
        rounds.push(RoundRecord {
            round,
            test_accuracy,
            num_active_start: active.len(),
            num_participating: participants.len(),
            num_completed: completed.len(),
            mean_eta,
            total_energy_remaining: fleet.iter().map(|d| d.budget_remaining().max(0.0)).sum(),
        });

        observe(&RoundOutcome {
            round_index: round,
            participants: &participants,
            completed: &completed,
            depleted_this_round: &depleted,
            global_params_after: &global,
        });
    }

    Ok(MetricsLog {
        rounds,
        depletions,
        aggregation_weight_sums: weight_sums,
        final_params: global,
    })
}
