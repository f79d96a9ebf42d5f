use pkm::memory::{MemoryConfig, MemoryLayer};
use pkm::numerics::{DenseMatrix, Mode, Rng};
use pkm::optim::{MemoryOptimizers, Optimizer, OptimizerConfig};
use pkm::reinit::{reinitialize, ReinitConfig, Threshold, UtilizationState};
use proptest::prelude::*;

fn touched_optimizers(layer: &MemoryLayer, cfg: &MemoryConfig) -> MemoryOptimizers {
    let mut opt = MemoryOptimizers::new(cfg, OptimizerConfig::default(), 10.0);
    let mut values = layer.values.slots.as_slice().to_vec();
    let all: Vec<(usize, Vec<f64>)> = (0..cfg.slots()).map(|i| (i, vec![0.5; cfg.d_v])).collect();
    opt.values.sparse_step(&mut values, &all).unwrap();
    for (h, keys) in layer.keys.heads.iter().enumerate() {
        for j in 0..2 {
            let mut k = keys.halves[j].as_slice().to_vec();
            let g = vec![0.25; k.len()];
            opt.keys[h][j].dense_step(&mut k, &g).unwrap();
        }
    }
    opt
}

fn moments_zero(o: &Optimizer, row: usize) -> bool {
    match o {
        Optimizer::Adam(a) => a.first_moment(row).iter().chain(a.second_moment(row)).all(|v| *v == 0.0) && a.step_count(row) == 0,
        Optimizer::Sgd(s) => s.velocity(row).iter().all(|v| *v == 0.0),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reinit_contract(
        heads in 1usize..=2,
        n1 in 2usize..=8,
        n2 in 2usize..=8,
        seed in any::<u64>(),
        threshold in 1u64..=3,
        sigma in prop_oneof![Just(0.0), 0.01f64..0.5],
    ) {
        let cfg = MemoryConfig::new(3, 4 * heads, 2, n1, n2, 1, heads);
        let mut rng = Rng::new(seed);
        let mut layer = MemoryLayer::new(cfg.clone(), &mut rng).unwrap();
        let mut opt = touched_optimizers(&layer, &cfg);
        let mut util = UtilizationState::for_layer(&layer, 5);
        for h in 0..heads {
            for j in 0..2 {
                for c in util.counts_mut(h, j) {
                    *c = rng.below(5) as u64;
                }
            }
        }
        let counts_before: Vec<[Vec<u64>; 2]> = (0..heads)
            .map(|h| [util.counts(h, 0).to_vec(), util.counts(h, 1).to_vec()])
            .collect();
        let before = layer.clone();
        let rc = ReinitConfig { threshold: Threshold::Count(threshold), sigma_n: sigma, ..ReinitConfig::default() };
        let report = reinitialize(&mut layer, &mut util, &mut opt, &rc, &mut rng, 3).unwrap();

        for h in 0..heads {
            for j in 0..2 {
                let (now, old) = (&layer.keys.heads[h].halves[j], &before.keys.heads[h].halves[j]);
                prop_assert_eq!((now.rows(), now.cols()), (old.rows(), old.cols()));
                let replaced: Vec<usize> = report.replacements[h][j].iter().map(|p| p.0).collect();
                for (slot, &c) in counts_before[h][j].iter().enumerate() {
                    let alive = c >= threshold;
                    prop_assert_eq!(replaced.contains(&slot), !alive && !report.all_dead[h][j]);
                    if !replaced.contains(&slot) {
                        prop_assert_eq!(now.row(slot), old.row(slot));
                    }
                }
                for &(slot, src) in &report.replacements[h][j] {
                    prop_assert!(counts_before[h][j][src] >= threshold);
                    prop_assert_eq!(util.counts(h, j)[slot], 0);
                    prop_assert!(moments_zero(&opt.keys[h][j], slot));
                    if sigma == 0.0 {
                        prop_assert_eq!(now.row(slot), old.row(src));
                    }
                }
            }
        }
        prop_assert_eq!(layer.values.slots.rows(), cfg.slots());
        for s in 0..cfg.slots() {
            let reset = report.value_slots.contains(&s);
            if !reset {
                prop_assert_eq!(layer.values.row(s), before.values.row(s));
            } else {
                prop_assert!(moments_zero(&opt.values, s));
            }
        }
    }
}

#[test]
fn counters_conserve_selection_events() {
    let cfg = MemoryConfig::new(5, 8, 3, 6, 7, 3, 2);
    let mut rng = Rng::new(21);
    let mut layer = MemoryLayer::new(cfg.clone(), &mut rng).unwrap();
    let mut util = UtilizationState::for_layer(&layer, 5);
    let mut events = 0u64;
    for _ in 0..10 {
        let x = DenseMatrix::from_vec(8, 5, (0..40).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let out = layer.forward(&x, Mode::Train).unwrap();
        util.observe(&out).unwrap();
        events += out.batch_size() as u64;
    }
    for h in 0..cfg.heads {
        for j in 0..2 {
            assert_eq!(util.counts(h, j).iter().sum::<u64>(), cfg.k as u64 * events);
        }
    }
    let total: u64 = (0..cfg.heads).map(|h| util.counts(h, 0).iter().sum::<u64>()).sum();
    assert_eq!(total, (cfg.k * cfg.heads) as u64 * events);
}
