#![allow(dead_code)]

use std::sync::OnceLock;

use leanfed_sim::data::{self, Dataset, PartitionConfig, SyntheticConfig};
use leanfed_sim::energy::{self, DeviceEnergy, EnergyConfig};
use leanfed_sim::federation::{self, Execution, FederationConfig, Policy};
use leanfed_sim::metrics::MetricsLog;
use leanfed_sim::model::TrainConfig;

/// The default synthetic task (10 classes, 32 dims, 10k/2k rows), generated once.
pub fn default_task() -> &'static (Dataset, Dataset) {
    static TASK: OnceLock<(Dataset, Dataset)> = OnceLock::new();
    TASK.get_or_init(|| data::generate_synthetic(&SyntheticConfig::default()).unwrap())
}

/// A smaller task for tests that only need something to train on.
pub fn small_task() -> &'static (Dataset, Dataset) {
    static TASK: OnceLock<(Dataset, Dataset)> = OnceLock::new();
    TASK.get_or_init(|| {
        data::generate_synthetic(&SyntheticConfig {
            n_train: 2000,
            n_test: 500,
            ..SyntheticConfig::default()
        })
        .unwrap()
    })
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub clients: usize,
    pub gamma: f64,
    pub rounds: usize,
    pub lambda: f64,
    pub policy: Policy,
    pub seed: u64,
    pub energy: EnergyConfig,
    pub train: TrainConfig,
    pub execution: Execution,
    /// Replaces the sampled budgets when set.
    pub budget_override: Option<f64>,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            clients: 50,
            gamma: 0.5,
            rounds: 200,
            lambda: 1.0,
            policy: Policy::LeanfedAdaptive,
            seed: 0,
            energy: EnergyConfig::default(),
            train: TrainConfig::default(),
            execution: Execution::Serial,
            budget_override: None,
        }
    }
}

pub struct Setup {
    pub shards: Vec<data::ClientShard>,
    pub fleet: Vec<DeviceEnergy>,
    pub config: FederationConfig,
}

impl Experiment {
    pub fn setup(&self, train: &Dataset) -> Setup {
        let shards = data::partition_dirichlet(
            train,
            &PartitionConfig {
                num_clients: self.clients,
                gamma: self.gamma,
                min_shard_size: 1,
                seed: self.seed,
            },
        )
        .unwrap();
        let sizes: Vec<usize> = shards.iter().map(|s| s.len()).collect();
        let mut fleet = energy::sample_fleet(
            &sizes,
            train.len(),
            self.rounds,
            &EnergyConfig {
                seed: self.seed,
                ..self.energy.clone()
            },
        )
        .unwrap();
        if let Some(budget) = self.budget_override {
            fleet = fleet
                .iter()
                .map(|d| DeviceEnergy::new(d.client_id(), budget, d.per_epoch_cost()).unwrap())
                .collect();
        }
        let config = FederationConfig {
            total_rounds: self.rounds,
            participation_rate: self.lambda,
            policy: self.policy,
            num_clients: self.clients,
            train: self.train.clone(),
            local_epochs: None,
            master_seed: self.seed,
            execution: self.execution,
        };
        Setup {
            shards,
            fleet,
            config,
        }
    }

    pub fn run_on(&self, task: &(Dataset, Dataset)) -> (MetricsLog, Vec<DeviceEnergy>) {
        let (train, test) = task;
        let mut s = self.setup(train);
        let log =
            federation::run_federation(train, test, &s.shards, &mut s.fleet, &s.config).unwrap();
        (log, s.fleet)
    }
}

/// Prints one result line and fails the test if the criterion did not hold.
pub fn verdict(
    id: u32,
    name: &str,
    pass: bool,
    detail: &str,
    elapsed: std::time::Duration,
    limit_secs: f64,
) {
    let in_time = elapsed.as_secs_f64() < limit_secs;
    let ok = pass && in_time;
    println!(
        "criterion {id:>2} [{}] {name}: {detail} ({:.2}s, limit {limit_secs}s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
    assert!(
        in_time,
        "criterion {id} ({name}) exceeded its {limit_secs}s budget"
    );
}
