use pkm::memory::{Distance, MemoryConfig, MemoryLayer};
use pkm::numerics::{DenseMatrix, Mode, Rng};
use pkm::oracle::{naive_forward, naive_topk};
use proptest::prelude::*;

fn config() -> impl Strategy<Value = (MemoryConfig, u64)> {
    (1usize..=3, 1usize..=3, 2usize..=12, 2usize..=12, 1usize..=6, any::<bool>(), 0.0f64..1.0, any::<u64>()).prop_map(
        |(heads, dh, n1, n2, k, cosine, alpha, seed)| {
            let mut c = MemoryConfig::new(4, 2 * heads * dh, 3, n1, n2, k.min(n1).min(n2), heads);
            if cosine {
                c.distance = Distance::Cosine { alpha };
            }
            (c, seed)
        },
    )
}

fn inputs(rng: &mut Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn selection_matches_brute_force((cfg, seed) in config()) {
        let mut rng = Rng::new(seed);
        let layer = MemoryLayer::new(cfg.clone(), &mut rng).unwrap();
        let q = inputs(&mut rng, 5, cfg.d_q);
        let out = layer.read(&q).unwrap();
        let (dh, hd) = (cfg.half_dim(), cfg.head_dim());
        for b in 0..5 {
            for h in 0..cfg.heads {
                let row = q.row(b);
                let keys = &layer.keys.heads[h];
                let brute = naive_topk(&row[h * hd..h * hd + dh], &row[h * hd + dh..(h + 1) * hd], keys.k1(), keys.k2(), cfg.k, cfg.distance);
                let got: Vec<usize> = out.selection(b, h).indices.clone();
                let want: Vec<usize> = brute.entries.iter().map(|e| e.0).collect();
                prop_assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn selections_are_distinct_and_normalized((cfg, seed) in config()) {
        let mut rng = Rng::new(seed);
        let mut layer = MemoryLayer::new(cfg.clone(), &mut rng).unwrap();
        let x = inputs(&mut rng, 4, cfg.d_in);
        let out = layer.forward(&x, Mode::Train).unwrap();
        for s in &out.selections {
            let mut idx = s.indices.clone();
            idx.sort_unstable();
            idx.dedup();
            prop_assert_eq!(idx.len(), cfg.k);
            prop_assert!(s.weights.iter().all(|w| *w > 0.0));
            prop_assert!((s.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        prop_assert_eq!(out.ops.score_evals, 4 * cfg.score_evals_per_sample());
    }

    #[test]
    fn value_gradient_support_is_the_selected_set((cfg, seed) in config()) {
        let mut rng = Rng::new(seed);
        let mut layer = MemoryLayer::new(cfg.clone(), &mut rng).unwrap();
        let x = inputs(&mut rng, 3, cfg.d_in);
        let out = layer.forward(&x, Mode::Train).unwrap();
        let g = inputs(&mut rng, 3, cfg.d_v);
        let grads = layer.backward(&out, &g).unwrap();
        let mut selected: Vec<usize> = out.selections.iter().flat_map(|s| s.indices.iter().copied()).collect();
        selected.sort_unstable();
        selected.dedup();
        let support: Vec<usize> = grads.values.indices().collect();
        prop_assert_eq!(support, selected);
    }

    #[test]
    fn forward_matches_naive_and_is_deterministic((cfg, seed) in config()) {
        let mut rng = Rng::new(seed);
        let layer = MemoryLayer::new(cfg.clone(), &mut rng).unwrap();
        let x = inputs(&mut rng, 4, cfg.d_in);
        for mode in [Mode::Train, Mode::Eval] {
            let mut a = layer.clone();
            let mut b = layer.clone();
            let oa = a.forward(&x, mode).unwrap();
            let ob = b.forward(&x, mode).unwrap();
            prop_assert_eq!(&oa.output, &ob.output);
            prop_assert_eq!(&oa.selections, &ob.selections);
            let naive = naive_forward(&layer, &x, mode);
            for (p, q) in oa.output.as_slice().iter().zip(naive.as_slice()) {
                prop_assert!((p - q).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn score_count_is_two_sqrt_k_plus_k_squared() {
    for n in [4usize, 8, 16, 32] {
        let cfg = MemoryConfig::new(2, 4, 2, n, n, 3, 1);
        assert_eq!(cfg.score_evals_per_sample(), (2 * n + 9) as u64);
    }
}
