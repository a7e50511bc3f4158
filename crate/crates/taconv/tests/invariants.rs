//! Property tests for the crate-wide invariants that hold for arbitrary
//! inputs: resampling linearity, one-hot max gradients, synthesis linearity,
//! perturbation range/identity, and IDX roundtrips.

use proptest::prelude::*;

use taconv::basis::{eval_basis, make_grid, synthesize_kernel, BasisSpec};
use taconv::harness::data::{load_idx, synth_dataset, write_idx};
use taconv::perturb::{apply_perturbation, PerturbationKind, PerturbationSpec};
use taconv::rng::rng_from;
use taconv::tensor::{Tape, Tensor};
use taconv::transforms::{displace_elastic, resample_bilinear};

fn kind_strategy() -> impl Strategy<Value = PerturbationKind> {
    prop_oneof![
        Just(PerturbationKind::RotationScaling),
        Just(PerturbationKind::Elastic),
        Just(PerturbationKind::GaussianBlur),
        Just(PerturbationKind::GaussianNoise),
        Just(PerturbationKind::ObjectOcclusion),
        Just(PerturbationKind::Snow),
        Just(PerturbationKind::Wave),
        Just(PerturbationKind::Saturation),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn resample_is_linear_under_random_elastic_fields(
        seed in 0u64..1000,
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        alpha in 0.0f64..1.5,
    ) {
        let grid = make_grid(5).unwrap();
        let field = displace_elastic(&grid, alpha, 1.0, &mut rng_from(seed)).unwrap();
        let mut rng = rng_from(seed ^ 0xabcd);
        use rand::Rng;
        let f: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let combo: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
        let lhs = resample_bilinear(&combo, 5, 5, &field);
        let rf = resample_bilinear(&f, 5, 5, &field);
        let rg = resample_bilinear(&g, 5, 5, &field);
        for p in 0..25 {
            prop_assert!((lhs[p] - (a * rf[p] + b * rg[p])).abs() < 1e-10);
        }
    }

    #[test]
    fn branch_max_routes_exactly_the_upstream_gradient(
        seed in 0u64..1000,
        branches in 1usize..5,
    ) {
        use rand::Rng;
        let mut rng = rng_from(seed);
        let n = 10usize;
        let mut tape = Tape::new();
        let ids: Vec<_> = (0..branches)
            .map(|_| {
                let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
                tape.leaf(&Tensor::new(vec![n], data).unwrap().with_grad()).unwrap()
            })
            .collect();
        let m = tape.branch_max(&ids).unwrap();
        // Random positive upstream weights via elementwise product.
        let upstream: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
        let u = tape.constant(vec![n], upstream.clone()).unwrap();
        let weighted = tape.mul(m, u).unwrap();
        let loss = tape.sum(weighted).unwrap();
        tape.backward(loss).unwrap();
        for i in 0..n {
            let mut nonzero = 0;
            let mut total = 0.0;
            for &id in &ids {
                let g = tape.grad(id).unwrap()[i];
                if g != 0.0 {
                    nonzero += 1;
                }
                total += g.abs();
            }
            // One-hot: a single branch receives the whole upstream gradient.
            prop_assert!(nonzero <= 1);
            prop_assert!((total - upstream[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn synthesis_is_linear_in_weights(
        seed in 0u64..1000,
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        use rand::Rng;
        let spec = BasisSpec::with_count(5, 1.5, 12).unwrap();
        let stack = eval_basis(&spec, &make_grid(5).unwrap()).unwrap();
        let mut rng = rng_from(seed);
        let w1: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w2: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let combo: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
        let lhs = synthesize_kernel(&combo, &stack).unwrap();
        let s1 = synthesize_kernel(&w1, &stack).unwrap();
        let s2 = synthesize_kernel(&w2, &stack).unwrap();
        for p in 0..25 {
            prop_assert!((lhs[p] - (a * s1[p] + b * s2[p])).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbations_stay_in_range_and_are_identity_at_zero(
        kind in kind_strategy(),
        severity in 0.0f64..3.0,
        seed in 0u64..1000,
    ) {
        use rand::Rng;
        let mut rng = rng_from(seed);
        let data: Vec<f64> = (0..1 * 10 * 10).map(|_| rng.gen_range(0.0..1.0)).collect();
        let image = Tensor::new(vec![1, 10, 10], data).unwrap();

        let zero = apply_perturbation(&image, &PerturbationSpec::new(kind, 0.0, seed), None).unwrap();
        prop_assert_eq!(&zero.data, &image.data);

        let out = apply_perturbation(&image, &PerturbationSpec::new(kind, severity, seed), None).unwrap();
        prop_assert!(out.data.iter().all(|&v| (0.0..=1.0).contains(&v)));

        // Same spec, same seed: bit-identical output.
        let again = apply_perturbation(&image, &PerturbationSpec::new(kind, severity, seed), None).unwrap();
        let bits_a: Vec<u64> = out.data.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = again.data.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn idx_roundtrip_is_stable(seed in 0u64..500, n in 1usize..4) {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset(n, 3, 10, seed).unwrap();
        let ip = dir.path().join("im.idx");
        let lp = dir.path().join("lb.idx");
        write_idx(&ds, &ip, &lp).unwrap();
        let once = load_idx(&ip, &lp).unwrap();
        write_idx(&once, &ip, &lp).unwrap();
        let twice = load_idx(&ip, &lp).unwrap();
        prop_assert_eq!(&once.labels, &twice.labels);
        let bits_a: Vec<u64> = once.images.data.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = twice.images.data.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(bits_a, bits_b);
    }
}
