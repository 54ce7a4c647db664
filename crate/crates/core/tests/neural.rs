mod common;

use common::{forward_oracle, mlp_fd_case, random_net};
use proptest::prelude::*;
use rand::Rng;
use spvt::neural::{
    cosine_lr, decode_weights, encode_weights, load_weights, save_weights, Activation, MlpNetwork, NeuralError,
    OptimizerState, Tensor, WEIGHT_FORMAT_VERSION,
};
use spvt::rng::stream;

#[test]
fn relu_nets_match_the_loop_oracle() {
    let mut rng = stream(11, "neural-forward", 0);
    for _ in 0..20 {
        let dims = [rng.random_range(1..=12), rng.random_range(1..=32), rng.random_range(1..=6)];
        let net = random_net(&mut rng, &dims, Activation::Relu, Activation::Identity, 1.5);
        for _ in 0..100 {
            let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = net.forward(&x).unwrap();
            for (a, b) in got.iter().zip(forward_oracle(&net, &x)) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn batch_forward_matches_rows() {
    let mut rng = stream(11, "neural-batch", 0);
    let net = random_net(&mut rng, &[5, 17, 9, 3], Activation::Tanh, Activation::Tanh, 1.0);
    let rows: Vec<Vec<f64>> = (0..13).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let out = net.forward_batch(&Tensor::from_rows(&rows).unwrap()).unwrap();
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(out.row_slice(i), net.forward(r).unwrap().as_slice());
    }
}

#[test]
fn wrong_input_width_is_an_input_shape_error() {
    let net = random_net(&mut stream(1, "shape", 0), &[4, 3, 2], Activation::Relu, Activation::Identity, 1.0);
    assert!(matches!(
        net.forward(&[0.0; 3]),
        Err(NeuralError::InputShape { expected: 4, got: 3 })
    ));
}

#[test]
fn reverse_mode_matches_central_differences_on_random_mlps() {
    let mut rng = stream(5, "neural-fd", 0);
    let (mut total, mut tight) = (0usize, 0usize);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let st = mlp_fd_case(&mut rng, case);
        total += st.total;
        tight += st.tight;
        worst = worst.max(st.worst);
        assert!(st.norm_rel <= 1e-4, "case {case}: {}", st.norm_rel);
    }
    assert!(worst <= 1e-3, "worst relative error {worst}");
    assert!(tight as f64 >= 0.99 * total as f64, "{tight}/{total} within 1e-4");
}

#[test]
fn adam_minimizes_a_convex_quadratic() {
    let mut p = Tensor::scalar(0.0);
    let mut opt = OptimizerState::new(&[p.shape()], 0.05);
    for _ in 0..1000 {
        let grad = Tensor::scalar(2.0 * (p.data()[0] - 2.0));
        opt.adam_step(&mut [&mut p], &[&grad]).unwrap();
    }
    assert!((p.data()[0] - 2.0).abs() < 1e-2);
    assert_eq!(opt.step_count(), 1000);
}

#[test]
fn cosine_schedule_midpoint() {
    let lr = cosine_lr(50, 100, 8e-5, 1e-5);
    assert!((lr - 4.5e-5).abs() < 1e-15);
    assert_eq!(cosine_lr(0, 100, 8e-5, 1e-5), 8e-5);
    assert_eq!(cosine_lr(100, 100, 8e-5, 1e-5), 1e-5);
}

#[test]
fn weight_file_on_disk_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("n.spvn");
    let net = random_net(&mut stream(2, "disk", 0), &[6, 8, 2], Activation::Relu, Activation::Tanh, 1.0);
    save_weights(&net, &p).unwrap();
    let back = load_weights(&p).unwrap();
    assert_eq!(back, net);
    let p2 = dir.path().join("m.spvn");
    save_weights(&back, &p2).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn layout_is_the_documented_one() {
    let net = random_net(&mut stream(2, "layout", 0), &[3, 2], Activation::Relu, Activation::Tanh, 1.0);
    let bytes = encode_weights(&net);
    assert_eq!(&bytes[0..4], b"SPVN");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), WEIGHT_FORMAT_VERSION);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1, "layer count");
    assert_eq!(bytes[12], 2, "tanh code");
    assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 3);
    assert_eq!(u32::from_le_bytes(bytes[17..21].try_into().unwrap()), 2);
    let w0 = f64::from_le_bytes(bytes[21..29].try_into().unwrap());
    assert_eq!(w0.to_bits(), net.layers()[0].weight.data()[0].to_bits());
    assert_eq!(bytes.len(), 21 + 8 * (6 + 2));
}

fn arb_net() -> impl Strategy<Value = MlpNetwork> {
    (any::<u64>(), 1usize..8, 1usize..12, 1usize..4, 0usize..3).prop_map(|(seed, i, h, o, a)| {
        let act = [Activation::Identity, Activation::Relu, Activation::Tanh][a];
        random_net(&mut stream(seed, "arb-net", 0), &[i, h, o], act, act, 2.0)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decode_inverts_encode_bit_for_bit(net in arb_net()) {
        let bytes = encode_weights(&net);
        let back = decode_weights(&bytes).unwrap();
        prop_assert_eq!(encode_weights(&back), bytes);
        for (a, b) in back.layers().iter().zip(net.layers()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.weight), bits(&b.weight));
            prop_assert_eq!(bits(&a.bias), bits(&b.bias));
        }
    }

    #[test]
    fn every_strict_prefix_is_rejected(net in arb_net(), cut in 0.0f64..1.0) {
        let bytes = encode_weights(&net);
        let n = ((bytes.len() as f64) * cut) as usize;
        prop_assert!(decode_weights(&bytes[..n]).is_err());
    }

    #[test]
    fn forward_is_deterministic(net in arb_net(), seed in any::<u64>()) {
        let mut rng = stream(seed, "x", 0);
        let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a = net.forward(&x).unwrap();
        let b = net.clone().forward(&x).unwrap();
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn cosine_stays_between_endpoints(step in 0usize..=1000, start in 1e-6f64..1e-2, end in 0.0f64..1e-6) {
        let lr = cosine_lr(step, 1000, start, end);
        prop_assert!(lr <= start && lr >= end);
    }
}
