use std::sync::Arc;

use fedsilo::adabn::adabn_recompute;
use fedsilo::datagen::{generate_partitioned, LabeledDataset, Split, SplitRatios, SyntheticSpec};
use fedsilo::federation::{init_silos, run_federation, FederationConfig, Strategy};
use fedsilo::metrics::{dataset_auc, evaluate_out_of_domain};
use fedsilo::nn::{apply_batch_moments, forward, Mode};
use fedsilo::{AdamHyper, Error, InputShape, ModelSpec, ParamSet, Tensor};

fn setup() -> (
    ModelSpec,
    Vec<(LabeledDataset, LabeledDataset, LabeledDataset)>,
    ParamSet<f64>,
) {
    let spec = ModelSpec::conv_blocks(InputShape::new(3, 8, 8), &[4, 8], true);
    let data = SyntheticSpec {
        n_centers: 2,
        samples_per_center: 400,
        image: spec.input,
        shift_magnitude: 1.0,
        seed: 3,
        ..SyntheticSpec::default()
    };
    let parts = generate_partitioned(&data, SplitRatios::default()).unwrap();
    let cfg = FederationConfig {
        strategy: Strategy::Local,
        local_steps: 10,
        rounds: 20,
        batch_size: 16,
        fedprox_lambda: 0.0,
        adam: AdamHyper {
            lr: 3e-3,
            ..AdamHyper::default()
        },
        seed: 1,
    };
    let train = vec![Arc::new(parts[0].0.clone())];
    let out = run_federation(&spec, init_silos(&spec, &train, &cfg).unwrap(), &cfg).unwrap();
    let model = out.center_model(0).unwrap();
    (spec, parts, model)
}

#[test]
fn recalibrating_on_training_data_reproduces_converged_statistics() {
    let (spec, parts, mut model) = setup();
    let train = &parts[0].0;
    // let the running statistics settle with parameters frozen
    let batches: Vec<Tensor<f64>> = train.batches::<f64>(40).map(|b| b.unwrap().images).collect();
    for _ in 0..30 {
        for b in &batches {
            let pass = forward(&spec, &model, b, Mode::Train).unwrap();
            apply_batch_moments(&mut model, &pass.observations).unwrap();
        }
    }
    let adapted = adabn_recompute(&spec, &model, &batches).unwrap();
    for layer in spec.bn_layers() {
        let (m0, v0) = model.bn_stats(layer).unwrap();
        let (m1, v1) = adapted.bn_stats(layer).unwrap();
        for c in 0..m0.len() {
            let sd = v1[c].sqrt();
            assert!(
                (m0[c] - m1[c]).abs() < 0.05 * sd + 1e-9,
                "layer {layer} mean {} vs {}",
                m0[c],
                m1[c]
            );
            assert!(
                (v0[c] - v1[c]).abs() < 0.1 * v1[c] + 1e-9,
                "layer {layer} var {} vs {}",
                v0[c],
                v1[c]
            );
        }
    }
}

#[test]
fn adapting_to_own_distribution_keeps_accuracy() {
    let (spec, parts, model) = setup();
    let intra = dataset_auc(&spec, &model, &parts[0].2, 128).unwrap();
    let adapt: Vec<_> = parts[0].0.batches::<f64>(128).collect::<Result<_, _>>().unwrap();
    let closed = evaluate_out_of_domain(&spec, &model, &parts[0].2, true, &adapt, 128).unwrap();
    assert!(closed.adapted);
    assert!((closed.auc - intra).abs() < 0.03, "{} vs {intra}", closed.auc);
}

#[test]
fn adaptation_reads_only_training_batches() {
    let (spec, parts, model) = setup();
    let target = &parts[1];
    let adapt: Vec<_> = target.0.batches::<f64>(64).collect::<Result<_, _>>().unwrap();
    let out = evaluate_out_of_domain(&spec, &model, &target.2, true, &adapt, 64).unwrap();
    assert_eq!(out.accessed.len(), adapt.len());
    assert!(out.accessed.iter().all(|o| o.split == Split::Train && o.center_id == 1));

    let leak: Vec<_> = target.2.batches::<f64>(64).collect::<Result<_, _>>().unwrap();
    assert!(matches!(
        evaluate_out_of_domain(&spec, &model, &target.2, true, &leak, 64),
        Err(Error::AdaptationLeak(_))
    ));
}

#[test]
fn flag_is_inert_without_batch_norm() {
    let spec = ModelSpec::conv_blocks(InputShape::new(3, 8, 8), &[4], false);
    let data = SyntheticSpec {
        n_centers: 1,
        samples_per_center: 100,
        image: spec.input,
        ..SyntheticSpec::default()
    };
    let parts = generate_partitioned(&data, SplitRatios::default()).unwrap();
    let model = fedsilo::build_model::<f64>(&spec, 2).unwrap();
    let adapt: Vec<_> = parts[0].0.batches::<f64>(32).collect::<Result<_, _>>().unwrap();
    let a = evaluate_out_of_domain(&spec, &model, &parts[0].2, false, &[], 32).unwrap();
    let b = evaluate_out_of_domain(&spec, &model, &parts[0].2, true, &adapt, 32).unwrap();
    assert_eq!(a.auc.to_bits(), b.auc.to_bits());
    assert!(!b.adapted);
}
