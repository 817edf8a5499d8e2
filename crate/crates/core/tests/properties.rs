use piffuse::coupling::{coupling_forward, coupling_inverse, CouplingBlock};
use piffuse::wavelet::{haar_analyze, haar_synthesize};
use piffuse::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cube(h: usize, w: usize, c: usize, seed: u64) -> Tensor<f64> {
    Tensor::randn(&[h, w, c], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn haar_round_trip_any_even_shape(h in 1usize..12, w in 1usize..12, c in 1usize..5, seed: u64) {
        let x = cube(2 * h, 2 * w, c, seed);
        let p = haar_analyze(&x).unwrap();
        prop_assert_eq!(p.ll.shape(), &[h, w, c][..]);
        let back = haar_synthesize(&p).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() < 1e-12);
        let energy = p.ll.sum_sq() + p.lh.sum_sq() + p.hl.sum_sq() + p.hh.sum_sq();
        prop_assert!((energy - x.sum_sq()).abs() <= 1e-12 * x.sum_sq().max(1.0));
    }

    #[test]
    fn haar_rejects_odd_extents(h in 1usize..8, w in 1usize..8) {
        let x = cube(2 * h + 1, 2 * w, 1, 0);
        prop_assert!(haar_analyze(&x).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn coupling_inverts_random_blocks(h in 1usize..5, w in 1usize..5, seed: u64, std in 0.01f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::<f64>::new();
        let b = CouplingBlock::new(&mut ps, "c", 4, 4, &mut rng).unwrap();
        for sub in [&b.i1, &b.i2, &b.i3] {
            for id in sub.out.param_ids() {
                let shape = ps.value(id).shape().to_vec();
                ps.set_value(id, Tensor::randn(&shape, std, &mut rng));
            }
        }
        let xh = Tensor::randn(&[h, w, 4], 1.0, &mut rng);
        let xl = Tensor::randn(&[h, w, 4], 1.0, &mut rng);
        let (h2, l2, ld) = coupling_forward(&xh, &xl, &b, &ps).unwrap();
        prop_assert!(ld.is_finite());
        let (h1, l1) = coupling_inverse(&h2, &l2, &b, &ps).unwrap();
        prop_assert!(h1.max_abs_diff(&xh).unwrap() < 1e-9);
        prop_assert!(l1.max_abs_diff(&xl).unwrap() < 1e-9);
    }
}
