use approx::assert_relative_eq;
use ndarray::Array2;
use proptest::prelude::*;

use dbdp_core::adam::{AdamConfig, AdamState};
use dbdp_core::deeponet::{deeponet_eval, SpaceDescriptor};
use dbdp_core::mlp::{concat_params, growth_constants, mse_gradient};
use dbdp_core::regression::{train_mse, RegressionConfig};
use dbdp_core::{DeepOnetSpec, HilbertVec, MlpParams};

#[test]
fn f32_and_f64_networks_agree() {
    let theta = MlpParams::he_init(&[3, 16, 2], 5, 0).unwrap();
    let theta32: dbdp_core::mlp::MlpParams<f32> = theta.cast();
    let x = [0.3, -1.2, 0.8];
    let a = theta.forward(&x).unwrap();
    let b = theta32.forward(&[0.3f32, -1.2, 0.8]).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert_relative_eq!(*p, *q as f64, max_relative = 1e-5, epsilon = 1e-6);
    }
}

#[test]
fn concatenation_equals_composition() {
    let inner = MlpParams::he_init(&[2, 8, 3], 1, 0).unwrap();
    let outer = MlpParams::he_init(&[3, 6, 2], 1, 1).unwrap();
    let both = concat_params(&outer, &inner).unwrap();
    assert_eq!(both.depth(), inner.depth() + outer.depth());
    for x in [[0.1, 0.2], [-3.0, 1.5], [0.0, 0.0]] {
        let seq = outer.forward(&inner.forward(&x).unwrap()).unwrap();
        let direct = both.forward(&x).unwrap();
        for (p, q) in seq.iter().zip(&direct) {
            assert_relative_eq!(*p, *q, epsilon = 1e-12);
        }
    }
}

#[test]
fn regression_fits_a_linear_map() {
    let xs = Array2::from_shape_fn((256, 2), |(i, j)| ((i * 7 + j * 3) % 17) as f64 / 8.5 - 1.0);
    let ys = Array2::from_shape_fn((256, 1), |(i, _)| 2.0 * xs[[i, 0]] - xs[[i, 1]] + 0.5);
    let mut theta = MlpParams::he_init(&[2, 32, 1], 3, 0).unwrap();
    let cfg = RegressionConfig {
        epochs: 400,
        batch: 64,
        adam: AdamConfig::with_lr(1e-2),
        final_lr_fraction: 0.05,
        seed: 1,
    };
    let curve = train_mse(&mut theta, xs.view(), ys.view(), &cfg, 0).unwrap();
    let last = mse_gradient(&theta, xs.view(), ys.view()).unwrap().loss_value;
    assert!(last < 1e-3 && last < curve[0] / 100.0, "{last} from {}", curve[0]);
}

#[test]
fn adam_descends_a_quadratic() {
    let mut p = vec![3.0f64, -2.0];
    let mut state = AdamState::new(2);
    let cfg = AdamConfig::with_lr(0.05);
    for _ in 0..2000 {
        let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        state.step(&cfg, vec![&mut p[..]], vec![&g[..]]).unwrap();
    }
    assert!(p.iter().all(|v| v.abs() < 1e-3), "{p:?}");
}

#[test]
fn deeponet_checkpoints_round_trip() {
    let theta = MlpParams::he_init(&[2, 8, 3], 9, 0).unwrap();
    let spec = DeepOnetSpec::new(theta, SpaceDescriptor::new("H", 4), SpaceDescriptor::new("V0", 5)).unwrap();
    let text = serde_json::to_string(&spec.to_checkpoint()).unwrap();
    let back = DeepOnetSpec::from_checkpoint(&serde_json::from_str(&text).unwrap()).unwrap();
    let x = HilbertVec::new(vec![0.5, -0.25, 3.0, 9.0], SpaceDescriptor::new("H", 4).basis_id()).unwrap();
    assert_eq!(deeponet_eval(&spec, &x).unwrap(), deeponet_eval(&back, &x).unwrap());
    // coordinates past the encoder truncation are ignored; decoder pads with zeros
    let y = deeponet_eval(&spec, &x).unwrap();
    assert_eq!(y.coeffs()[3..], [0.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn growth_bound_holds(seed in 0u64..10_000, x in prop::collection::vec(-50.0f64..50.0, 3)) {
        let theta = MlpParams::he_init(&[3, 10, 2], seed, 0).unwrap();
        let (c1, c2) = growth_constants(&theta).unwrap();
        let f = theta.forward(&x).unwrap();
        let lhs: f64 = f.iter().map(|v| v * v).sum();
        let rhs = c1 * x.iter().map(|v| v * v).sum::<f64>() + c2;
        prop_assert!(lhs <= rhs * (1.0 + 1e-12));
    }
}
