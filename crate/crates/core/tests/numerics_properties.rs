use pkm::metrics::{kl_to_uniform, AccessMass};
use pkm::numerics::{softmax, Rng};
use proptest::prelude::*;

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_permutation_equivariant(
        xs in prop::collection::vec(-50.0f64..50.0, 1..40),
        seed in any::<u64>(),
    ) {
        let p = softmax(&xs);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let mut perm: Vec<usize> = (0..xs.len()).collect();
        Rng::new(seed).shuffle(&mut perm);
        let shuffled: Vec<f64> = perm.iter().map(|&i| xs[i]).collect();
        let q = softmax(&shuffled);
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((q[j] - p[i]).abs() <= 1e-15);
        }
    }

    #[test]
    fn kl_is_non_negative(mass in prop::collection::vec(0.0f64..10.0, 1..64)) {
        prop_assume!(mass.iter().sum::<f64>() > 0.0);
        let kl = kl_to_uniform(&AccessMass::from_mass(mass).unwrap()).unwrap();
        prop_assert!(kl >= 0.0);
    }

    #[test]
    fn kl_vanishes_on_uniform_mass(n in 1usize..200, level in 0.01f64..5.0) {
        let kl = kl_to_uniform(&AccessMass::from_mass(vec![level; n]).unwrap()).unwrap();
        prop_assert!(kl.abs() <= 1e-12);
    }

    #[test]
    fn equal_seeds_give_equal_streams(seed in any::<u64>(), stream in any::<u64>()) {
        let mut a = Rng::with_stream(seed, stream);
        let mut b = Rng::with_stream(seed, stream);
        for _ in 0..16 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}
