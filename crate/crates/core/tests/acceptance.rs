//! Acceptance suite. Each test checks one exit criterion at its stated tolerance and
//! runtime budget and prints a single PASS/FAIL line; run with `--nocapture` to see them.

mod common;

use std::time::Instant;

use common::{default_task, small_task, verdict, Experiment};
use leanfed_sim::data::{self, Dataset, PartitionConfig, Split};
use leanfed_sim::energy::{self, EnergyConfig};
use leanfed_sim::federation::{self, data_fraction_static, Execution, LocalUpdate, Policy};
use leanfed_sim::metrics::{self, DepletionRecord};
use leanfed_sim::model::{self, ModelParams};
use leanfed_sim::rng::{self, Domain};
use num::{BigInt, BigRational, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}

#[test]
fn criterion_01_formula_suite() {
    let start = Instant::now();
    let mut r = rng::stream(2024, Domain::Synthetic, 1, 0);
    let (mut worst_eta, mut worst_rounds) = (0.0f64, 0.0f64);
    let mut clamped = 0;
    for _ in 0..1000 {
        let budget = 10f64.powf(r.random_range(-3.0..3.0));
        let cost = 10f64.powf(r.random_range(-4.0..0.0));
        let epochs = r.random_range(1..=10usize);
        let lambda: f64 = r.random_range(0.01..=1.0);
        let rounds = r.random_range(1..=1000usize);

        // Re-derivation in log space: ln η = ln B - ln λ - ln R - ln b - ln L.
        let log_eta =
            budget.ln() - lambda.ln() - (rounds as f64).ln() - cost.ln() - (epochs as f64).ln();
        let expected_eta = log_eta.exp().clamp(0.0, 1.0);
        let eta = data_fraction_static(budget, cost, epochs, lambda, rounds);
        worst_eta = worst_eta.max(rel_err(eta, expected_eta));
        clamped += usize::from(eta == 1.0);

        let expected_rounds = (budget.ln() - cost.ln() - (epochs as f64).ln()).exp();
        worst_rounds = worst_rounds.max(rel_err(
            energy::max_rounds(budget, cost, epochs),
            expected_rounds,
        ));
    }
    let pass = worst_eta <= 1e-12 && worst_rounds <= 1e-12 && clamped > 0 && clamped < 1000;
    verdict(
        1,
        "formula suite",
        pass,
        &format!("max rel err data fraction {worst_eta:.2e}, max rounds {worst_rounds:.2e}, {clamped} clamped"),
        start.elapsed(),
        1.0,
    );
}

#[test]
fn criterion_02_fedavg_recovery() {
    let start = Instant::now();
    let task = small_task();
    let mut identical = true;
    let mut detail = Vec::new();
    for lambda in [1.0, 0.5] {
        let base = Experiment {
            clients: 10,
            rounds: 20,
            lambda,
            seed: 11,
            budget_override: Some(1e12),
            ..Experiment::default()
        };
        let (fedavg, _) = Experiment {
            policy: Policy::Fedavg,
            ..base.clone()
        }
        .run_on(task);
        for policy in [Policy::LeanfedStatic, Policy::LeanfedAdaptive] {
            let (lean, _) = Experiment {
                policy,
                ..base.clone()
            }
            .run_on(task);
            let same = lean == fedavg
                && lean
                    .rounds
                    .iter()
                    .zip(&fedavg.rounds)
                    .all(|(a, b)| a.test_accuracy.to_bits() == b.test_accuracy.to_bits());
            identical &= same;
            detail.push(format!(
                "{policy} λ={lambda}: {}",
                if same { "identical" } else { "DIFFERS" }
            ));
        }
    }
    verdict(
        2,
        "FedAvg recovery",
        identical,
        &detail.join(", "),
        start.elapsed(),
        10.0,
    );
}

#[test]
fn criterion_03_adaptive_non_depletion() {
    let start = Instant::now();
    let task = default_task();
    let mut early = 0;
    let mut at_end = 0;
    for seed in SEEDS {
        let (log, _) = Experiment {
            seed,
            ..Experiment::default()
        }
        .run_on(task);
        for rec in &log.depletions {
            match rec.depletion_round {
                Some(r) if r < 200 => early += 1,
                Some(_) => at_end += 1,
                None => {}
            }
        }
    }
    verdict(
        3,
        "adaptive non-depletion",
        early == 0,
        &format!(
            "{early} devices depleted before round 200 ({at_end} spent out in the final round)"
        ),
        start.elapsed(),
        60.0,
    );
}

#[test]
fn criterion_04_early_depletion_bound() {
    let start = Instant::now();
    let task = default_task();
    let rounds: usize = 200;
    let bound = rounds.div_ceil(5) + 1;
    let mut worst = 0;
    let mut survivors = 0;
    for seed in SEEDS {
        let (log, _) = Experiment {
            seed,
            policy: Policy::Fedavg,
            energy: EnergyConfig {
                clip_hi: 1.0,
                ..EnergyConfig::default()
            },
            ..Experiment::default()
        }
        .run_on(task);
        for rec in &log.depletions {
            match rec.depletion_round {
                Some(r) => worst = worst.max(r),
                None => survivors += 1,
            }
        }
    }
    verdict(
        4,
        "early-depletion bound",
        survivors == 0 && worst <= bound,
        &format!("latest depletion round {worst} (bound {bound}), {survivors} survivors"),
        start.elapsed(),
        60.0,
    );
}

fn pooled_median(records: &[DepletionRecord], rounds: usize) -> Vec<f64> {
    metrics::depletion_rounds_or_survival(records, rounds)
        .into_iter()
        .map(|r| r as f64)
        .collect()
}

#[test]
fn criterion_05_dropout_ordering() {
    let start = Instant::now();
    let task = default_task();
    let rounds = 200;
    let mut medians = Vec::new();
    for lambda in [1.0, 0.8, 0.5, 0.2] {
        let mut pooled = Vec::new();
        for seed in SEEDS {
            let (log, _) = Experiment {
                seed,
                lambda,
                policy: Policy::Fedavg,
                ..Experiment::default()
            }
            .run_on(task);
            pooled.extend(pooled_median(&log.depletions, rounds));
        }
        medians.push((lambda, metrics::median(&pooled)));
    }
    let mut lean = Vec::new();
    for seed in SEEDS {
        let (log, _) = Experiment {
            seed,
            ..Experiment::default()
        }
        .run_on(task);
        lean.extend(pooled_median(&log.depletions, rounds));
    }
    let lean_median = metrics::median(&lean);
    let monotone = medians.windows(2).all(|w| w[0].1 <= w[1].1);
    let detail = medians
        .iter()
        .map(|(l, m)| format!("fedavg λ={l}: {m}"))
        .chain(std::iter::once(format!("leanfed_adaptive: {lean_median}")))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        5,
        "dropout ordering",
        monotone && lean_median == rounds as f64,
        &format!("median depletion round {detail}"),
        start.elapsed(),
        300.0,
    );
}

#[test]
fn criterion_06_accuracy_dynamics() {
    let start = Instant::now();
    let task = default_task();
    let rounds = 200;
    let (mut lean_final, mut fed_final, mut fed_peak_round) = (Vec::new(), Vec::new(), Vec::new());
    for seed in SEEDS {
        let (lean, _) = Experiment {
            seed,
            ..Experiment::default()
        }
        .run_on(task);
        let (fed, _) = Experiment {
            seed,
            policy: Policy::Fedavg,
            ..Experiment::default()
        }
        .run_on(task);
        let lean = metrics::summarize_run(&lean.rounds, seed, "").unwrap();
        let fed = metrics::summarize_run(&fed.rounds, seed, "").unwrap();
        lean_final.push(lean.final_accuracy);
        fed_final.push(fed.final_accuracy);
        fed_peak_round.push(fed.peak_round as f64);
    }
    let (lean_mean, fed_mean) = (metrics::mean(&lean_final), metrics::mean(&fed_final));
    let peak_round = metrics::mean(&fed_peak_round);
    verdict(
        6,
        "accuracy dynamics",
        lean_mean - fed_mean >= 0.0 && peak_round < rounds as f64 / 2.0,
        &format!(
            "mean final accuracy leanfed_adaptive {lean_mean:.4} vs fedavg {fed_mean:.4}; fedavg mean peak round {peak_round}"
        ),
        start.elapsed(),
        600.0,
    );
}

/// Central finite difference of the loss along one coordinate.
fn finite_difference(
    params: &ModelParams,
    x: &[f64],
    y: &[usize],
    decay: f64,
    k: usize,
    h: f64,
) -> f64 {
    let mut plus = params.clone();
    plus.weights_mut()[k] += h;
    let mut minus = params.clone();
    minus.weights_mut()[k] -= h;
    let (lp, _) = model::loss_and_grad(&plus, x, y, decay).unwrap();
    let (lm, _) = model::loss_and_grad(&minus, x, y, decay).unwrap();
    (lp - lm) / (2.0 * h)
}

#[test]
fn criterion_07_gradient_check() {
    let start = Instant::now();
    let mut r = rng::stream(77, Domain::Synthetic, 7, 0);
    let mut worst = 0.0f64;
    let mut coords = 0;
    for _ in 0..100 {
        let classes = r.random_range(2..=6usize);
        let dim = r.random_range(1..=8usize);
        let m = r.random_range(1..=12usize);
        let decay = if r.random_bool(0.5) {
            0.0
        } else {
            r.random_range(0.0..0.1)
        };
        let weights: Vec<f64> = (0..classes * (dim + 1))
            .map(|_| {
                0.5 * {
                    let z: f64 = StandardNormal.sample(&mut r);
                    z
                }
            })
            .collect();
        let params = ModelParams::from_weights(classes, dim, weights).unwrap();
        let x: Vec<f64> = (0..m * dim)
            .map(|_| {
                1.5 * {
                    let z: f64 = StandardNormal.sample(&mut r);
                    z
                }
            })
            .collect();
        let y: Vec<usize> = (0..m).map(|_| r.random_range(0..classes)).collect();
        let (_, grad) = model::loss_and_grad(&params, &x, &y, decay).unwrap();
        for (k, &g) in grad.weights().iter().enumerate() {
            let fd = finite_difference(&params, &x, &y, decay, k, 1e-5);
            // Denominator floored so coordinates with near-zero gradient are not
            // judged on roundoff alone.
            let err = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-4);
            worst = worst.max(err);
            coords += 1;
        }
    }
    verdict(
        7,
        "gradient check",
        worst < 1e-5,
        &format!("max relative error {worst:.2e} over {coords} coordinates"),
        start.elapsed(),
        5.0,
    );
}

#[test]
fn criterion_08_partition_statistics() {
    let start = Instant::now();
    let (train, _) = default_task();
    let mut means = Vec::new();
    for gamma in [0.5, 1.0, 1e3] {
        let mut total = 0.0;
        for seed in 0..50u64 {
            let cfg = PartitionConfig {
                num_clients: 10,
                gamma,
                min_shard_size: 1,
                seed,
            };
            let shards = data::partition_dirichlet(train, &cfg).unwrap();
            total += data::mean_tv_to_global(&shards, train).unwrap();
        }
        means.push((gamma, total / 50.0));
    }
    let decreasing = means.windows(2).all(|w| w[0].1 > w[1].1);
    let detail = means
        .iter()
        .map(|(g, m)| format!("γ={g}: {m:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        8,
        "partition statistics",
        decreasing,
        &format!("mean TV {detail}"),
        start.elapsed(),
        10.0,
    );
}

fn schedule_run(execution: Execution) -> leanfed_sim::metrics::MetricsLog {
    Experiment {
        rounds: 100,
        lambda: 0.5,
        seed: 9,
        execution,
        ..Experiment::default()
    }
    .run_on(default_task())
    .0
}

#[test]
fn criterion_09_schedule_independence() {
    let start = Instant::now();
    let serial = schedule_run(Execution::Serial);
    let parallel = schedule_run(Execution::Parallel { threads: 8 });
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (
        dir.path().join("serial.csv"),
        dir.path().join("parallel.csv"),
    );
    metrics::write_round_csv(&serial.rounds, &a).unwrap();
    metrics::write_round_csv(&parallel.rounds, &b).unwrap();
    let same = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    verdict(
        9,
        "determinism / schedule independence",
        same && serial == parallel,
        &format!(
            "rounds CSV {} between serial and 8-worker runs",
            if same { "byte-identical" } else { "DIFFERS" }
        ),
        start.elapsed(),
        120.0,
    );
}

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

#[test]
fn criterion_10_aggregation_oracle() {
    let start = Instant::now();
    let mut r = rng::stream(10, Domain::Synthetic, 10, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let count = r.random_range(1..=20usize);
        let (classes, dim) = (r.random_range(2..=4usize), r.random_range(1..=5usize));
        let mut ids: Vec<usize> = (0..count * 3).collect();
        rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut r);
        let updates: Vec<LocalUpdate> = ids[..count]
            .iter()
            .map(|&client_id| LocalUpdate {
                client_id,
                params: ModelParams::from_weights(
                    classes,
                    dim,
                    (0..classes * (dim + 1))
                        .map(|_| r.random_range(-10.0..10.0))
                        .collect(),
                )
                .unwrap(),
                shard_size: r.random_range(1..=1000),
                epochs_completed: 5,
                fraction_used: 1.0,
            })
            .collect();

        let total = BigInt::from(updates.iter().map(|u| u.shard_size).sum::<usize>());
        let agg = federation::aggregate(&updates).unwrap();
        for (k, &got) in agg.params.weights().iter().enumerate() {
            let mut acc = BigRational::from_integer(BigInt::from(0));
            for u in &updates {
                let w = BigRational::new(BigInt::from(u.shard_size), total.clone());
                acc += w * exact(u.params.weights()[k]);
            }
            let want = acc.to_f64().unwrap();
            worst = worst.max((got - want).abs() / want.abs().max(1.0));
        }
    }

    let run = schedule_run(Execution::Serial);
    let sums: Vec<f64> = run
        .aggregation_weight_sums
        .iter()
        .flatten()
        .copied()
        .collect();
    let worst_sum = sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    verdict(
        10,
        "aggregation oracle",
        worst <= 1e-12 && worst_sum <= 1e-12 && !sums.is_empty(),
        &format!(
            "max error vs exact rational mean {worst:.2e}; weight sums within {worst_sum:.2e} of 1 over {} aggregated rounds",
            sums.len()
        ),
        start.elapsed(),
        120.0,
    );
}

#[test]
fn dataset_helper_is_train_split() {
    let (train, test): &(Dataset, Dataset) = default_task();
    assert_eq!(train.split(), Split::Train);
    assert_eq!(test.split(), Split::Test);
}
