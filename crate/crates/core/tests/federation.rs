use std::collections::BTreeMap;
use std::sync::Arc;

use fedsilo::datagen::{generate_partitioned, LabeledDataset, SplitRatios, SyntheticSpec};
use fedsilo::federation::{
    init_silos, local_update, partition_keys, run_federation, run_federation_observed, FederationConfig,
    FederationOutcome, Strategy,
};
use fedsilo::model::ParamTag;
use fedsilo::wire::{decode_update, inspect_update};
use fedsilo::{AdamHyper, InputShape, ModelSpec, ParamSet};

fn spec(with_bn: bool) -> ModelSpec {
    ModelSpec::conv_blocks(InputShape::new(3, 8, 8), &[4, 8], with_bn)
}

fn train_sets(k: usize, seed: u64) -> Vec<Arc<LabeledDataset>> {
    let data = SyntheticSpec {
        n_centers: k,
        samples_per_center: 100,
        image: InputShape::new(3, 8, 8),
        shift_magnitude: 0.5,
        seed,
        ..SyntheticSpec::default()
    };
    generate_partitioned(&data, SplitRatios::default())
        .unwrap()
        .into_iter()
        .map(|(train, _, _)| Arc::new(train))
        .collect()
}

fn config(strategy: Strategy, rounds: usize) -> FederationConfig {
    FederationConfig {
        strategy,
        local_steps: 3,
        rounds,
        batch_size: 8,
        fedprox_lambda: 0.0,
        adam: AdamHyper {
            lr: 1e-3,
            ..AdamHyper::default()
        },
        seed: 5,
    }
}

fn run(spec: &ModelSpec, data: &[Arc<LabeledDataset>], cfg: &FederationConfig) -> FederationOutcome<f64> {
    run_federation(spec, init_silos(spec, data, cfg).unwrap(), cfg).unwrap()
}

fn same_models(a: &FederationOutcome<f64>, b: &FederationOutcome<f64>) -> bool {
    let (ma, mb) = (a.center_models().unwrap(), b.center_models().unwrap());
    ma.len() == mb.len() && ma.iter().zip(&mb).all(|((ia, pa), (ib, pb))| ia == ib && pa.bit_eq(pb))
}

#[test]
fn silobn_equals_fedavg_without_batch_norm() {
    let (s, data) = (spec(false), train_sets(3, 1));
    let a = run(&s, &data, &config(Strategy::SiloBn, 3));
    let b = run(&s, &data, &config(Strategy::FedAvg, 3));
    assert!(same_models(&a, &b));
    assert_eq!(a.rounds, b.rounds);
}

#[test]
fn fedprox_without_penalty_equals_fedavg() {
    let (s, data) = (spec(true), train_sets(3, 2));
    let a = run(&s, &data, &config(Strategy::FedProx, 3));
    let b = run(&s, &data, &config(Strategy::FedAvg, 3));
    assert!(same_models(&a, &b));
}

#[test]
fn single_silo_fedavg_equals_local() {
    let (s, data) = (spec(true), train_sets(1, 3));
    let a = run(&s, &data, &config(Strategy::FedAvg, 4));
    let b = run(&s, &data, &config(Strategy::Local, 4));
    assert!(same_models(&a, &b));
    let c = run(&s, &data, &config(Strategy::SiloBn, 4));
    assert!(same_models(&b, &c));
}

#[test]
fn reruns_are_bit_identical() {
    let (s, data) = (spec(true), train_sets(3, 4));
    for strategy in Strategy::ALL {
        let a = run(&s, &data, &config(strategy, 2));
        let b = run(&s, &data, &config(strategy, 2));
        assert!(same_models(&a, &b), "{strategy}");
        assert_eq!(a.rounds, b.rounds);
    }
}

#[test]
fn zero_rounds_return_the_initialization() {
    let (s, data) = (spec(true), train_sets(2, 5));
    let cfg = config(Strategy::FedAvg, 0);
    let silos = init_silos::<f64>(&s, &data, &cfg).unwrap();
    let init = silos[0].params.clone();
    let out = run_federation(&s, silos, &cfg).unwrap();
    let global: ParamSet<f64> = out.global_shared.clone().into_iter().collect();
    assert!(global.bit_eq(&init));
    assert!(out.rounds.is_empty());
}

#[test]
fn zero_learning_rate_returns_the_broadcast() {
    let (s, data) = (spec(true), train_sets(2, 6));
    let mut cfg = config(Strategy::SiloBn, 1);
    cfg.adam.lr = 0.0;
    let mut silos = init_silos::<f64>(&s, &data, &cfg).unwrap();
    let global = silos[0]
        .params
        .restrict(&partition_keys(&s, Strategy::SiloBn).shared)
        .unwrap();
    let (update, _) = local_update(&s, &mut silos[1], &global, &cfg, 0).unwrap();
    assert_eq!(update.entries.len(), global.len());
    assert!(update.entries.iter().all(|(k, v)| v.bit_eq(&global[k])));
    // running statistics still moved
    assert!(!silos[1].params.bn_stats(1).unwrap().0.iter().all(|&m| m == 0.0));
}

#[test]
fn statistics_never_cross_the_wire_under_silobn() {
    let (s, data) = (spec(true), train_sets(3, 7));
    let bn_layers = s.bn_layers().count();
    for (strategy, want) in [(Strategy::SiloBn, 0), (Strategy::FedAvg, 2 * bn_layers)] {
        let mut messages = 0;
        let mut stats_seen = BTreeMap::new();
        run_federation_observed(
            &s,
            init_silos::<f64>(&s, &data, &config(strategy, 5)).unwrap(),
            &config(strategy, 5),
            |m| {
                messages += 1;
                let n = inspect_update(m.bytes)
                    .unwrap()
                    .iter()
                    .filter(|e| {
                        e.tag == ParamTag::LocalStatistic
                            || e.key.ends_with("running_mean")
                            || e.key.ends_with("running_var")
                    })
                    .count();
                stats_seen.insert((m.round, m.sender), n);
                let decoded = decode_update::<f64>(m.bytes).unwrap();
                assert_eq!(decoded.entries.keys().filter(|k| k.is_statistic()).count(), n);
            },
        )
        .unwrap();
        assert_eq!(messages, 5 * 4, "{strategy}: one broadcast and three updates per round");
        assert!(stats_seen.values().all(|&n| n == want), "{strategy}: {stats_seen:?}");
    }
}

#[test]
fn local_strategy_sends_nothing() {
    let (s, data) = (spec(true), train_sets(2, 8));
    let mut sent = 0;
    let out = run_federation_observed(
        &s,
        init_silos::<f64>(&s, &data, &config(Strategy::Local, 2)).unwrap(),
        &config(Strategy::Local, 2),
        |_| sent += 1,
    )
    .unwrap();
    assert_eq!(sent, 0);
    assert!(out.rounds.iter().all(|r| r.communicated.is_empty()));
    assert_eq!(out.silos[0].adam.step(), 2 * 3);
}

#[test]
fn pooled_is_one_participant_with_all_data() {
    let (s, data) = (spec(true), train_sets(3, 9));
    let out = run(&s, &data, &config(Strategy::Pooled, 2));
    assert_eq!(out.silos.len(), 1);
    assert_eq!(
        out.silos[0].n_samples() as usize,
        data.iter().map(|d| d.len()).sum::<usize>()
    );
    assert!(out.global_model().is_some());
}

#[test]
fn strong_proximal_term_limits_drift() {
    let (s, data) = (spec(false), train_sets(3, 10));
    let drift = |lambda: f64| {
        let mut cfg = config(Strategy::FedProx, 1);
        cfg.local_steps = 10;
        cfg.fedprox_lambda = lambda;
        let silos = init_silos::<f64>(&s, &data, &cfg).unwrap();
        let start = silos[0].params.clone();
        let out = run_federation(&s, silos, &cfg).unwrap();
        out.silos
            .iter()
            .map(|silo| {
                silo.params
                    .iter()
                    .map(|(k, v)| {
                        let w = start.require(*k).unwrap();
                        v.data()
                            .iter()
                            .zip(w.data())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect::<Vec<_>>()
    };
    let (free, held) = (drift(0.0), drift(1e3));
    for (f, h) in free.iter().zip(&held) {
        assert!(h < f, "{held:?} vs {free:?}");
    }
}

#[test]
fn personalized_models_differ_only_in_statistics() {
    let (s, data) = (spec(true), train_sets(3, 11));
    let out = run(&s, &data, &config(Strategy::SiloBn, 2));
    let models = out.center_models().unwrap();
    let first = &models[&0];
    for m in models.values() {
        for (k, v) in m.iter() {
            if !k.is_statistic() {
                assert!(v.bit_eq(first.require(*k).unwrap()));
            }
        }
    }
    assert!(out.global_model().is_none());
}
