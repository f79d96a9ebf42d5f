use pkm::data::RandomLabelDataset;
use pkm::experiments::{
    evaluate, load_checkpoint, run_to_dir, save_checkpoint, train, Checkpoint, ExperimentSpec, ModelSpec, Record,
};
use pkm::memory::MemoryConfig;
use pkm::numerics::Rng;
use pkm::reinit::ReinitConfig;
use pkm::PkmError;

fn small(seed: u64, reinit: bool) -> ExperimentSpec {
    let mut s = ExperimentSpec::desk_memory(1, reinit, seed);
    s.dataset.n = 256;
    s.model = ModelSpec::Memory {
        embed_dim: 32,
        memory: MemoryConfig::new(32, 16, 8, 12, 12, 4, 1),
    };
    s.batch_size = 32;
    s.epochs = 8;
    s.early_stop_top1 = None;
    if reinit {
        s.reinit = Some(ReinitConfig {
            window: 2,
            plateau_delta: 0.5,
            ..ReinitConfig::default()
        });
    }
    s
}

#[test]
fn same_seed_gives_byte_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small(3, true);
    let a = run_to_dir(&spec, &dir.path().join("a")).unwrap();
    let b = run_to_dir(&spec, &dir.path().join("b")).unwrap();
    assert_eq!(std::fs::read(&a.metrics).unwrap(), std::fs::read(&b.metrics).unwrap());
    assert_eq!(std::fs::read(&a.checkpoint).unwrap(), std::fs::read(&b.checkpoint).unwrap());

    let c = run_to_dir(&small(4, true), &dir.path().join("c")).unwrap();
    assert_ne!(std::fs::read(&a.metrics).unwrap(), std::fs::read(&c.metrics).unwrap());
}

#[test]
fn run_directory_is_self_describing() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_to_dir(&small(1, false), dir.path()).unwrap();
    let spec = ExperimentSpec::from_json(&std::fs::read_to_string(&run.resolved_config).unwrap()).unwrap();
    let ds = RandomLabelDataset::generate(spec.dataset.n, spec.dataset.d, spec.dataset.m, spec.data_seed()).unwrap();
    let report = evaluate(&load_checkpoint(&run.checkpoint).unwrap(), &ds).unwrap();
    assert_eq!(report, run.outcome.final_eval);

    let text = std::fs::read_to_string(&run.metrics).unwrap();
    let header: Record = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    match header {
        Record::Header { version, spec: logged, .. } => {
            assert_eq!(version, pkm::VERSION);
            assert_eq!(logged.seed, 1);
        }
        other => panic!("first record is {other:?}"),
    }
}

#[test]
fn checkpoint_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&small(2, true), &mut |_| Ok(())).unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &out.checkpoint()).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, out.checkpoint());
    let idx: Vec<usize> = (0..64).collect();
    let (x, _) = out.dataset.batch(&idx);
    let a = out.model.forward_eval(&x).unwrap().0;
    let b = loaded.model.forward_eval(&x).unwrap().0;
    assert!(a.as_slice().iter().zip(b.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(PkmError::Checkpoint { .. })));
}

#[test]
fn untrained_model_is_at_chance() {
    let spec = ExperimentSpec::desk_memory(1, false, 0);
    let ds = RandomLabelDataset::generate(spec.dataset.n, spec.dataset.d, spec.dataset.m, spec.data_seed()).unwrap();
    let model = spec.build_model(&mut Rng::with_stream(spec.seed, 1)).unwrap();
    let report = evaluate(&Checkpoint::new(model, None), &ds).unwrap();
    assert!((report.top1 - 0.1).abs() <= 0.02, "{}", report.top1);
    assert!(report.top5 >= report.top1);
}

#[test]
fn reinit_does_not_lower_utilization_on_a_small_paired_run() {
    let off = train(&small(5, false), &mut |_| Ok(())).unwrap();
    let on = train(&small(5, true), &mut |_| Ok(())).unwrap();
    assert!(!on.reinits.is_empty());
    assert!(on.final_eval.value_util.unwrap() >= off.final_eval.value_util.unwrap());
}

#[test]
fn wide_mlp_trains_and_round_trips() {
    let mut spec = small(6, false);
    spec.model = ModelSpec::WideMlp { embed_dim: 16, hidden: 32 };
    spec.epochs = 3;
    let out = train(&spec, &mut |_| Ok(())).unwrap();
    assert!(out.final_eval.value_util.is_none());
    let ckpt = out.checkpoint();
    assert_eq!(Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap(), ckpt);
}
