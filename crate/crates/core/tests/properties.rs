use proptest::prelude::*;

use cgh_core::data::{join_atomic, split_atomic};
use cgh_core::layers::{dropout, softmax, Activation, Conv1d, Layer, MaxPool, Mode};
use cgh_core::model::{
    count_parameters, load_bytes, memory_footprint_bits, save_bytes, ArchConfig, Model, ModelKind, Network,
    TrainingMetadata,
};
use cgh_core::optim::{AdamConfig, AdamState};
use cgh_core::{Rng, Tensor};

fn vector(len: std::ops::Range<usize>, scale: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-scale..scale, len)
}

fn kind() -> impl Strategy<Value = ModelKind> {
    prop_oneof![Just(ModelKind::Full), Just(ModelKind::Trimmed), Just(ModelKind::Logreg)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(z in vector(1..16, 40.0), shift in -100.0..100.0f64) {
        let z = Tensor::from_vec(z);
        let p = softmax(&z).unwrap();
        prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
        let q = softmax(&z.map(|v| v + shift)).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn maxpool_conserves_gradient_mass(x in vector(8..40, 5.0), g_seed in any::<u64>(), region in 1usize..5) {
        let len = x.len();
        let x = Tensor::new(vec![1, len], x).unwrap();
        let mut pool = MaxPool::new(region);
        let mut rng = Rng::new(g_seed);
        let y = pool.forward(&x, Mode::Train, &mut rng).unwrap();
        let g = Tensor::rand_uniform(&mut rng, y.shape(), -1.0, 1.0).unwrap();
        let dx = pool.backward(&g).unwrap();
        prop_assert_eq!(dx.sum(), g.sum());
    }

    #[test]
    fn conv_is_translation_equivariant(x in vector(12..30, 2.0), seed in any::<u64>(), width in 1usize..5) {
        let mut rng = Rng::new(seed);
        let k = Tensor::rand_uniform(&mut rng, &[2, 1, width], -1.0, 1.0).unwrap();
        let b = Tensor::rand_uniform(&mut rng, &[2], -0.5, 0.5).unwrap();
        let conv = Conv1d::from_params("c", k, b, Activation::Relu).unwrap();
        let len = x.len();
        let shifted: Vec<f64> = std::iter::once(0.0).chain(x.iter().copied()).collect();
        let y = conv.apply(&Tensor::new(vec![1, len], x).unwrap()).unwrap();
        let ys = conv.apply(&Tensor::new(vec![1, len + 1], shifted).unwrap()).unwrap();
        let (n, ns) = (y.shape()[1], ys.shape()[1]);
        for ch in 0..2 {
            for t in 0..n {
                prop_assert_eq!(y.data()[ch * n + t].to_bits(), ys.data()[ch * ns + t + 1].to_bits());
            }
        }
    }

    #[test]
    fn dropout_eval_is_identity(x in vector(1..50, 10.0), rate in 0.0..0.95f64, seed in any::<u64>()) {
        let x = Tensor::from_vec(x);
        let y = dropout(&x, rate, Mode::Eval, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(y, x);
    }

    #[test]
    fn dropout_train_outputs_zero_or_scaled(x in vector(1..50, 10.0), rate in 0.05..0.95f64, seed in any::<u64>()) {
        let x = Tensor::from_vec(x);
        let y = dropout(&x, rate, Mode::Train, &mut Rng::new(seed)).unwrap();
        for (o, i) in y.data().iter().zip(x.data()) {
            prop_assert!(*o == 0.0 || (o - i / (1.0 - rate)).abs() <= 1e-12 * i.abs().max(1.0));
        }
    }

    #[test]
    fn atomic_split_round_trips(seed in any::<u64>()) {
        let x = Tensor::rand_uniform(&mut Rng::new(seed), &[3, 300], -4.0, 4.0).unwrap();
        prop_assert_eq!(join_atomic(&split_atomic(&x).unwrap()).unwrap(), x);
    }

    #[test]
    fn adam_second_moment_nonnegative(grads in prop::collection::vec(vector(4..5, 100.0), 1..20)) {
        let mut w = Tensor::zeros(&[4]);
        let mut adam = AdamState::new(AdamConfig::default(), &[&[4]]);
        for g in grads {
            let g = Tensor::from_vec(g);
            adam.step(&mut [&mut w], &[&g]).unwrap();
            prop_assert!(adam.v[0].data().iter().all(|v| *v >= 0.0));
            prop_assert!(w.is_finite());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn memory_identity_and_valid_probabilities(
        kind in kind(),
        k1 in 1usize..4,
        k2 in 1usize..4,
        d in 2usize..10,
        h in 2usize..10,
        seed in any::<u64>(),
    ) {
        let arch = ArchConfig { kind, conv1_kernels: k1, conv2_kernels: k2, feature_dim: d, lstm_hidden: h, fc1_dim: h, ..ArchConfig::default() };
        let mut rng = Rng::new(seed);
        let m = Model::build(&arch, &mut rng).unwrap();
        prop_assert_eq!(memory_footprint_bits(&m), 32 * count_parameters(&m) as u64);
        let x = Tensor::rand_uniform(&mut rng, &[3, 300], -2.0, 2.0).unwrap();
        let p = m.infer(&x).unwrap();
        prop_assert_eq!(p.len(), 8);
        prop_assert!(p.data().iter().all(|v| *v >= 0.0));
        prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(kind in kind(), seed in any::<u64>()) {
        let arch = ArchConfig { kind, conv1_kernels: 2, conv2_kernels: 2, feature_dim: 4, lstm_hidden: 3, fc1_dim: 5, ..ArchConfig::default() };
        let mut rng = Rng::new(seed);
        let m = Model::build(&arch, &mut rng).unwrap();
        let meta = TrainingMetadata { seed, epochs: 2, l2_strength: 0.01 };
        let back = load_bytes(&save_bytes(&m, &meta)).unwrap();
        let x = Tensor::rand_uniform(&mut rng, &[3, 300], -1.0, 1.0).unwrap();
        let (a, b) = (m.logits(&x).unwrap(), back.model.logits(&x).unwrap());
        prop_assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        prop_assert_eq!(back.metadata, meta);
    }
}
