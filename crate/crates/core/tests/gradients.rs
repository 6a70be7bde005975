use fedsilo::gradcheck::{check_gradients, grad_check, random_problem, GradCheckOptions};
use fedsilo::model::{ParamKey, ParamName};
use fedsilo::{InputShape, ModelSpec};

fn arch(with_bn: bool) -> ModelSpec {
    ModelSpec::conv_blocks(InputShape::new(3, 8, 8), &[4, 8, 8], with_bn)
}

#[test]
fn plain_network_matches_finite_differences() {
    for seed in 0..3 {
        let r = grad_check(&arch(false), seed, 4, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-5, "seed {seed}: {r:?}");
    }
}

#[test]
fn batch_norm_network_matches_finite_differences() {
    for seed in 0..3 {
        let r = grad_check(&arch(true), seed, 4, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn injected_fault_names_the_key() {
    let spec = arch(true);
    let key = ParamKey::new(5, ParamName::Gamma);
    let (p, x, y) = random_problem(&spec, 0, 4).unwrap();
    let r = check_gradients(
        &spec,
        &p,
        &x,
        &y,
        &GradCheckOptions {
            h: 1e-5,
            corrupt: Some((key, 2.0)),
        },
    )
    .unwrap();
    assert_eq!(r.worst_key, Some(key));
    assert!(r.max_rel_error > 1e-4);
}
