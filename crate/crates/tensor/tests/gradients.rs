use aoept_tensor::gradcheck::{max_relative_error, standard_cases};
use aoept_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_finite_differences() {
    for case in standard_cases() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = (case.inputs)(&mut rng);
            let err = max_relative_error(&case.build, &inputs, 1e-5, &mut rng).unwrap();
            assert!(err <= 1e-5, "{} seed {seed}: rel err {err:e}", case.name);
        }
    }
}

#[test]
fn matmul_gradient_within_1e6() {
    let case = standard_cases().into_iter().find(|c| c.name == "matmul").unwrap();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let inputs = (case.inputs)(&mut rng);
        let err = max_relative_error(&case.build, &inputs, 1e-5, &mut rng).unwrap();
        assert!(err <= 1e-6, "rel err {err:e}");
    }
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(xs in proptest::collection::vec(-10.0f64..10.0, 2..12)) {
        let mut g = Graph::no_grad();
        let x = g.constant(&Tensor::vector(xs));
        let y = g.softmax(x, 0).unwrap();
        let sum: f64 = g.value(y).iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        prop_assert!(g.value(y).iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn aotn_round_trip_is_bit_exact(
        shape in proptest::collection::vec(1usize..5, 0..4),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| f64::from_bits(rng.random::<u64>() >> 2)).collect();
        let t = Tensor::new(shape, data).unwrap();
        let bytes = aoept_tensor::io::to_bytes(&t);
        let back = aoept_tensor::io::read_tensor(&bytes[..]).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }
}
