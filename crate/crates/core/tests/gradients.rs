mod common;

use bayescope::autodiff::Graph;
use bayescope::models::{Model, Variant};
use bayescope::Tensor;
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for case in op_cases() {
            let inputs = (case.inputs)(&mut rng);
            let err = gradcheck(case.build.as_ref(), &inputs, &mut rng);
            prop_assert!(err < FD_TOL, "{}: relative error {err:e}", case.name);
        }
    }

    #[test]
    fn backward_is_linear_over_independent_subgraphs(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&mut rng, &[3, 2], -1.0, 1.0, 0.0);
        let b = random_tensor(&mut rng, &[2, 2], -1.0, 1.0, 0.0);
        let c = random_tensor(&mut rng, &[4], -1.0, 1.0, 0.0);

        let grads = |with_first: bool, with_second: bool| {
            let mut g = Graph::new();
            let (va, vb, vc) = (g.param(a.clone()), g.param(b.clone()), g.param(c.clone()));
            let first = {
                let m = g.matmul(va, vb).unwrap();
                let t = g.tanh(m).unwrap();
                g.sum(t).unwrap()
            };
            let second = {
                let e = g.exp(vc).unwrap();
                let s = g.mul(e, vc).unwrap();
                g.mean(s).unwrap()
            };
            let loss = match (with_first, with_second) {
                (true, true) => g.add(first, second).unwrap(),
                (true, false) => first,
                _ => second,
            };
            g.backward(loss).unwrap();
            (g.grad(va), g.grad(vb), g.grad(vc))
        };
        let (ja, jb, jc) = grads(true, true);
        let (fa, fb, _) = grads(true, false);
        let (_, _, sc) = grads(false, true);
        for (x, y) in ja.data().iter().zip(fa.data()).chain(jb.data().iter().zip(fb.data())).chain(jc.data().iter().zip(sc.data())) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn unreachable_parameters_get_zero_gradient(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let used = g.param(random_tensor(&mut rng, &[3], -1.0, 1.0, 0.0));
        let unused = g.param(random_tensor(&mut rng, &[3], -1.0, 1.0, 0.0));
        let _dangling = g.square(unused).unwrap();
        let s = g.square(used).unwrap();
        let loss = g.sum(s).unwrap();
        g.backward(loss).unwrap();
        prop_assert!(g.grad(unused).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn repeated_backward_accumulates(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.param(random_tensor(&mut rng, &[4], -1.0, 1.0, 0.0));
        let t = g.tanh(x).unwrap();
        let loss = g.sum(t).unwrap();
        g.backward(loss).unwrap();
        let once = g.grad(x);
        g.backward(loss).unwrap();
        let twice = g.grad(x);
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((2.0 * a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn full_losses_match_finite_differences_with_frozen_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for variant in Variant::ALL {
        for seed in 0..5 {
            let spec = small_vector_spec(variant, 2, seed);
            let model = jitter(&Model::build(spec).unwrap(), &mut rng);
            let batch = random_batch(&mut rng, spec_input(&model), 6);
            let err = model_gradcheck(&model, &batch, 0.3, seed + 100, None);
            assert!(err < FD_TOL, "{variant} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn image_bcnn_sigma_loss_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = jitter(&Model::build(bayescope::models::ModelSpec::image(Variant::BcnnSigma, 10, 1, 2)).unwrap(), &mut rng);
    let batch = random_batch(&mut rng, spec_input(&model), 2);
    let err = model_gradcheck(&model, &batch, 0.5, 9, Some(12));
    assert!(err < FD_TOL, "{err:e}");
}

#[test]
fn non_scalar_backward_is_a_contract_error() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(bayescope::Error::Contract(_))));
}

fn spec_input(model: &Model) -> bayescope::models::InputKind {
    model.spec().input
}
