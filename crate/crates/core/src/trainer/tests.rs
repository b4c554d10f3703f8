use super::checkpoint::{decode, encode, seal};
use super::*;
use crate::testutil::{tiny_bench, tiny_config, tiny_net};
use crate::translate::fit_translator;
use proptest::prelude::*;

fn setup() -> (crate::dataio::Benchmark, AffineTranslator) {
    let b = tiny_bench(11);
    let tr = fit_translator(b.source_train.images(), b.target_train.images()).unwrap();
    (b, tr)
}

fn component(r: &StepReport, name: &str) -> f64 {
    r.components.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("no {name}")).1
}

#[test]
fn poly_lr_examples() {
    assert_eq!(poly_lr(0, 100, 0.01, 0.9), 0.01);
    assert_eq!(poly_lr(100, 100, 0.01, 0.9), 0.0);
    assert!((poly_lr(50, 100, 0.01, 1.0) - 0.005).abs() < 1e-15);
    // past the end stays at zero
    assert_eq!(poly_lr(150, 100, 0.01, 0.9), 0.0);
}

#[test]
fn sgd_examples() {
    let (mut p, mut v) = (vec![0.0f64], vec![0.0]);
    sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.0);
    assert!((p[0] + 0.1).abs() < 1e-12);

    let (mut p, mut v) = (vec![0.0f64], vec![0.0]);
    sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9);
    sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9);
    assert!((p[0] + 0.29).abs() < 1e-12);

    let (mut p, mut v) = (vec![0.5f64, -2.0], vec![0.3, 0.1]);
    sgd_momentum_step(&mut p, &[4.0, 7.0], &mut v, 0.0, 0.9);
    assert_eq!(p, vec![0.5, -2.0]);
}

proptest! {
    #[test]
    fn routing_invariant(iter in 0usize..10_000) {
        let ours = source_routing(Method::Ours, iter);
        prop_assert_eq!(ours, vec![(0, 0), (1, 1), (2, 2)]);
        prop_assert_eq!(source_routing(Method::Sed, iter), vec![(0, iter % 3)]);
        prop_assert!(source_routing(Method::Mtri, iter).iter().all(|&(_, v)| v == 0));
        for m in Method::ALL {
            prop_assert!(check_routing(m, &source_routing(m, iter)).is_ok());
        }
    }
}

#[test]
fn routing_violations_rejected() {
    assert!(check_routing(Method::Ours, &[(0, 1), (1, 1), (2, 2)]).is_err());
    assert!(check_routing(Method::Sed, &[(1, 0)]).is_err());
    assert!(check_routing(Method::Mtri, &[(0, 0), (1, 2)]).is_err());
}

#[test]
fn discriminator_gets_no_segmentation_gradient() {
    let (b, tr) = setup();
    let cfg = RunConfig {
        losses: LossWeights {
            lambda_adv: 0.5,
            ..LossWeights::default()
        },
        ..tiny_config()
    };
    let state = TrainState::new(cfg.clone(), tr.clone()).unwrap();
    let src: Vec<_> = b.source_train.samples.iter().take(2).collect();
    let tgt: Vec<_> = b.target_train.samples.iter().take(2).collect();
    let g = network_grads(&state.params, &cfg, &tr, Stage::Stage1, 0, &src, &tgt, None).unwrap();
    assert!(!g.discriminator_touched);
    assert!(g.align.is_some());
    assert!(g.encoder.iter().flatten().any(|&x| x != 0.0));

    // a full step moves the discriminator only through its own update
    let data = TrainData::new(&b.source_train, &b.target_train).unwrap();
    let mut s = state.clone();
    s.config.d_lr = 1e-12;
    train_step(&mut s, &data).unwrap();
    let before = state.params.discriminator.tensors();
    let after = s.params.discriminator.tensors();
    let moved: f32 = before.iter().zip(&after).flat_map(|(a, b)| a.iter().zip(b.iter())).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
    assert!(moved < 1e-6, "discriminator moved by {moved}");
}

#[test]
fn zero_adversarial_weight_skips_alignment() {
    let (b, tr) = setup();
    let cfg = RunConfig {
        losses: LossWeights {
            lambda_adv: 0.0,
            ..LossWeights::default()
        },
        ..tiny_config()
    };
    let mut state = TrainState::new(cfg, tr).unwrap();
    let disc = state.params.discriminator.clone();
    let data = TrainData::new(&b.source_train, &b.target_train).unwrap();
    let r = train_step(&mut state, &data).unwrap();
    assert!(r.components.iter().all(|(n, _)| n != "g_loss" && n != "d_loss"));
    assert_eq!(state.params.discriminator, disc);
}

#[test]
fn smoke_training_lowers_segmentation_loss() {
    let (b, tr) = setup();
    let cfg = RunConfig {
        losses: LossWeights {
            lambda_adv: 0.0,
            lambda_ent: 0.0,
            ..LossWeights::default()
        },
        lr0: 1e-2,
        stage1_iters: 200,
        ..tiny_config()
    };
    let data = TrainData::new(&b.source_train, &b.target_train).unwrap();
    let mut state = TrainState::new(cfg, tr).unwrap();
    let mut seg = Vec::new();
    while state.iteration < 200 {
        let r = train_step(&mut state, &data).unwrap();
        seg.push((1..=3).map(|k| component(&r, &format!("seg_{k}"))).sum::<f64>());
    }
    let head: f64 = seg[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = seg[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.8 * head, "seg loss {head} -> {tail}");
}

#[test]
fn sed_rotates_views_and_mtri_adds_cosine() {
    let (b, tr) = setup();
    let data = TrainData::new(&b.source_train, &b.target_train).unwrap();
    let mut sed = TrainState::new(RunConfig { method: Method::Sed, ..tiny_config() }, tr.clone()).unwrap();
    for i in 0..4 {
        let r = train_step(&mut sed, &data).unwrap();
        assert_eq!(r.routing, vec![(0, i % 3)]);
        assert!(r.components.iter().all(|(n, _)| !n.ends_with("_2")));
    }
    let mut mtri = TrainState::new(RunConfig { method: Method::Mtri, ..tiny_config() }, tr).unwrap();
    let r = train_step(&mut mtri, &data).unwrap();
    let cos = component(&r, "cos");
    assert!((0.0..=1.0).contains(&cos));
    assert!(r.routing.iter().all(|&(_, v)| v == 0));
}

#[test]
fn batches_depend_only_on_seed_phase_and_iteration() {
    let (b, tr) = setup();
    let data = TrainData::new(&b.source_train, &b.target_train).unwrap();
    let mut s = TrainState::new(tiny_config(), tr).unwrap();
    s.iteration = 5;
    let a = step_batches(&s, &data);
    let mut t = s.clone();
    t.params = t.params.zeroed();
    assert_eq!(step_batches(&t, &data), a);
    t.phase = Phase::Ssl { round: 1 };
    assert_ne!(step_batches(&t, &data), a);
}

#[test]
fn train_data_checks_roles() {
    let b = tiny_bench(1);
    assert!(TrainData::new(&b.target_train, &b.target_train).is_err());
    assert!(TrainData::new(&b.source_train, &b.target_val).is_err());
}

#[test]
fn divergence_is_reported() {
    let (b, tr) = setup();
    let data = TrainData::new(&b.source_train, &b.target_train).unwrap();
    let mut s = TrainState::new(RunConfig { lr0: 1e30, ..tiny_config() }, tr).unwrap();
    let err = (0..10).find_map(|_| train_step(&mut s, &data).err()).expect("diverges");
    match err {
        Error::Diverged { stage, .. } => assert_eq!(stage, "stage1"),
        other => panic!("expected divergence, got {other}"),
    }
}

#[test]
fn config_validation() {
    assert!(RunConfig::default().validate().is_ok());
    for bad in [
        RunConfig { lr0: 0.0, ..RunConfig::default() },
        RunConfig { momentum: 1.0, ..RunConfig::default() },
        RunConfig { batch_size: 0, ..RunConfig::default() },
        RunConfig { stage1_iters: 0, ..RunConfig::default() },
        RunConfig { lambda_cos: -1.0, ..RunConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    let mut ssl = RunConfig::default();
    ssl.max_rounds = 5;
    ssl.ssl_uses_translation = true;
    assert_eq!(ssl.stage1_key(), RunConfig::default().stage1_key());
    let other = RunConfig { entropy_enabled: false, ..RunConfig::default() };
    assert_ne!(other.stage1_key(), RunConfig::default().stage1_key());
}

fn trained_state() -> TrainState {
    let (b, tr) = setup();
    let data = TrainData::new(&b.source_train, &b.target_train).unwrap();
    let mut s = TrainState::new(tiny_config(), tr).unwrap();
    for _ in 0..2 {
        train_step(&mut s, &data).unwrap();
    }
    s.pseudo = b.target_train_truth();
    s.metrics_lines = 3;
    s
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let s = trained_state();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.ckpt");
    save_checkpoint(&s, &p).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back, s);
    let q = dir.path().join("b.ckpt");
    save_checkpoint(&back, &q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
}

#[test]
fn checkpoint_rejects_other_versions() {
    let mut bytes = encode(&trained_state()).unwrap();
    bytes.truncate(bytes.len() - 32);
    bytes[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    let err = decode(&seal(bytes)).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");
}

#[test]
fn checkpoint_detects_corruption() {
    let mut bytes = encode(&trained_state()).unwrap();
    let n = bytes.len();
    bytes[n - 100] ^= 0x40;
    let err = decode(&bytes).unwrap_err().to_string();
    assert!(err.contains("checksum"), "{err}");
    assert!(decode(b"NOTACKPT").is_err());
}

#[test]
fn checkpoint_class_mismatch_names_num_classes() {
    let mut s = trained_state();
    s.pseudo.clear();
    s.config.net = tiny_net(6);
    let err = decode(&encode(&s).unwrap()).unwrap_err().to_string();
    assert!(err.contains("num_classes"), "{err}");

    let err = trained_state().check_classes(7).unwrap_err().to_string();
    assert!(err.contains("num_classes"), "{err}");
}

fn read(p: &std::path::Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn resume_is_bit_exact() {
    let b = tiny_bench(5);
    let splits = PipelineSplits::from_benchmark(&b);
    let cfg = RunConfig { checkpoint_every: 3, ..tiny_config() };
    let dir = tempfile::tempdir().unwrap();
    let full = run_full_pipeline(&cfg, &splits, &dir.path().join("full"), &PipelineOptions::default()).unwrap();
    assert_eq!(full.state.phase, Phase::Done);
    assert_eq!(full.state.summaries.len(), 3);

    for halt in [(Phase::Stage1, 4), (Phase::Ssl { round: 1 }, 0), (Phase::Ssl { round: 2 }, 3)] {
        let run = dir.path().join(format!("halt_{}_{}", halt.0.label(), halt.1));
        let opts = PipelineOptions { halt_at: Some(halt), ..Default::default() };
        let h = run_full_pipeline(&cfg, &splits, &run, &opts).unwrap();
        assert!(h.halted);
        // leftovers past the checkpoint must be dropped on resume
        std::fs::write(run.join("metrics.jsonl"), read(&run.join("metrics.jsonl")) + "{\"junk\":1}\n").unwrap();
        let opts = PipelineOptions {
            resume: Some(run.join("checkpoints/interrupted.ckpt")),
            ..Default::default()
        };
        let r = run_full_pipeline(&cfg, &splits, &run, &opts).unwrap();
        assert_eq!(r.state, full.state, "halt at {halt:?}");
        assert_eq!(read(&run.join("metrics.jsonl")), read(&dir.path().join("full/metrics.jsonl")));
        let a = std::fs::read(run.join("checkpoints/final.ckpt")).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("full/checkpoints/final.ckpt")).unwrap());
    }
}

#[test]
fn same_seed_runs_match() {
    let b = tiny_bench(5);
    let splits = PipelineSplits::from_benchmark(&b);
    let cfg = RunConfig { max_rounds: 1, ..tiny_config() };
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        run_full_pipeline(&cfg, &splits, &dir.path().join(name), &PipelineOptions::default()).unwrap();
    }
    assert_eq!(read(&dir.path().join("a/metrics.jsonl")), read(&dir.path().join("b/metrics.jsonl")));
}

#[test]
fn zero_rounds_stops_after_initial_pseudo_labels() {
    let b = tiny_bench(5);
    let splits = PipelineSplits::from_benchmark(&b);
    let cfg = RunConfig { max_rounds: 0, ..tiny_config() };
    let dir = tempfile::tempdir().unwrap();
    let o = run_full_pipeline(&cfg, &splits, dir.path(), &PipelineOptions::default()).unwrap();
    assert_eq!(o.state.phase, Phase::Done);
    assert_eq!(o.state.summaries.len(), 1);
    assert!(o.state.meta.is_some());
    assert_eq!(o.state.pseudo.len(), b.target_train.len());
    let round0 = std::fs::read_dir(dir.path().join("pseudo/round_0")).unwrap().count();
    assert_eq!(round0, b.target_train.len());
    assert!(!dir.path().join("pseudo/round_1").exists());
    assert!(dir.path().join("checkpoints/stage1.ckpt").exists());
    assert!(dir.path().join("config.json").exists());
}

#[test]
fn baselines_skip_the_meta_learner() {
    let b = tiny_bench(5);
    let splits = PipelineSplits::from_benchmark(&b);
    let cfg = RunConfig { method: Method::Sed, ..tiny_config() };
    let dir = tempfile::tempdir().unwrap();
    let o = run_full_pipeline(&cfg, &splits, dir.path(), &PipelineOptions::default()).unwrap();
    assert!(o.state.meta.is_none());
    assert_eq!(o.evals.len(), 1);
    assert_eq!(o.evals[0].reports[0].heads.len(), 1);
    assert!(!dir.path().join("pseudo").exists());
}

#[test]
fn resume_rejects_wrong_class_count_and_foreign_override() {
    let b = tiny_bench(5);
    let splits = PipelineSplits::from_benchmark(&b);
    let cfg = RunConfig { max_rounds: 0, ..tiny_config() };
    let dir = tempfile::tempdir().unwrap();
    run_full_pipeline(&cfg, &splits, dir.path(), &PipelineOptions::default()).unwrap();
    let ckpt = dir.path().join("checkpoints/final.ckpt");

    let mut wrong = PipelineSplits::from_benchmark(&b);
    wrong.num_classes = 6;
    let opts = PipelineOptions { resume: Some(ckpt.clone()), ..Default::default() };
    let err = run_full_pipeline(&cfg, &wrong, dir.path(), &opts).unwrap_err().to_string();
    assert!(err.contains("num_classes"), "{err}");

    let opts = PipelineOptions {
        resume: Some(ckpt.clone()),
        config_override: Some(RunConfig { lr0: 1.0, ..cfg.clone() }),
        ..Default::default()
    };
    assert!(matches!(run_full_pipeline(&cfg, &splits, dir.path(), &opts), Err(Error::Config(_))));

    // a finished stage-1-only run continues into self-training
    let opts = PipelineOptions {
        resume: Some(ckpt),
        config_override: Some(RunConfig { max_rounds: 1, ..cfg.clone() }),
        ..Default::default()
    };
    let o = run_full_pipeline(&cfg, &splits, dir.path(), &opts).unwrap();
    assert_eq!(o.state.summaries.len(), 2);
    assert!(dir.path().join("pseudo/round_1").exists());
}

#[test]
fn metrics_log_sorts_keys_and_nulls_non_finite() {
    let mut log = MetricsLog::in_memory();
    let mut e = metrics::event("train", "stage1", 0, 4);
    metrics::put(&mut e, "z", 1.5);
    metrics::put(&mut e, "a", f64::NAN);
    log.log(e).unwrap();
    assert_eq!(log.len(), 1);
    let line = &log.lines()[0];
    assert!(line.find("\"a\":null").unwrap() < line.find("\"z\":1.5").unwrap(), "{line}");
}
