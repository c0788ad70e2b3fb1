use meanflow::config::ExperimentConfig;
use meanflow::metrics::{read_metrics, MetricsRecord, METRICS_HEADER};
use meanflow::net::{Checkpoint, NetConfig};
use meanflow::tensor_ad::Tensor;
use meanflow::train::{
    adam_step, run_stage_sweep, train, AdamParams, AdamState, RunManifest, StageConfig, SweepAxis, SweepValue,
    Trainer, FINAL_CHECKPOINT, MANIFEST_FILE, METRICS_FILE,
};
use meanflow::Error;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.net = NetConfig {
        hidden: vec![16, 16],
        time_embed_dim: 8,
        max_freq: 3.0,
        ..NetConfig::default()
    };
    cfg.train.total = 20;
    cfg.train.batch = 32;
    cfg.train.log_every = 1;
    cfg.train.eval_every = 0;
    cfg.eval.samples = 64;
    cfg.schedule.lambda_samples = 10_000;
    cfg
}

fn losses(cfg: &ExperimentConfig, steps: u64) -> Vec<f64> {
    let mut tr = Trainer::new(cfg.clone()).unwrap();
    (0..steps).map(|_| tr.step().unwrap().loss.total).collect()
}

#[test]
fn adam_converges_on_a_quadratic_bowl() {
    let target = [1.5, -2.0, 0.25];
    let mut params = vec![Tensor::new(vec![3], vec![0.0; 3]).unwrap()];
    let mut state = AdamState::zeros_like(&params);
    let hp = AdamParams {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    for i in 0..1000 {
        let lr = hp.lr * (1.0 - i as f64 / 1000.0);
        let g: Vec<f64> = params[0].data().iter().zip(&target).map(|(p, t)| 2.0 * (p - t)).collect();
        let grads = vec![Tensor::new(vec![3], g).unwrap()];
        adam_step(&mut params, &grads, &mut state, &AdamParams { lr, ..hp }).unwrap();
    }
    for (p, t) in params[0].data().iter().zip(&target) {
        assert!((p - t).abs() < 1e-3, "{p} vs {t}");
    }
}

#[test]
fn first_adam_step_moves_by_lr_times_sign() {
    let mut params = vec![Tensor::new(vec![3], vec![0.0; 3]).unwrap()];
    let mut state = AdamState::zeros_like(&params);
    let hp = AdamParams {
        lr: 0.01,
        beta1: 0.9,
        beta2: 0.999,
        eps: 0.0,
    };
    let grads = vec![Tensor::new(vec![3], vec![3.0, -0.5, 1e-3]).unwrap()];
    adam_step(&mut params, &grads, &mut state, &hp).unwrap();
    for (p, e) in params[0].data().iter().zip([-0.01, 0.01, -0.01]) {
        assert!((p - e).abs() < 1e-15, "{p} vs {e}");
    }
}

#[test]
fn same_seed_gives_identical_losses() {
    let cfg = tiny();
    assert_eq!(losses(&cfg, 10), losses(&cfg, 10));
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(losses(&cfg, 10), losses(&other, 10));
}

#[test]
fn resume_is_bit_exact() {
    let mut cfg = tiny();
    cfg.schedule.progressive = true;
    cfg.schedule.sampler = meanflow::schedules::SamplerKind::Adaptive;
    let straight = losses(&cfg, 20);
    let mut tr = Trainer::new(cfg.clone()).unwrap();
    for _ in 0..10 {
        tr.step().unwrap();
    }
    let bytes = tr.checkpoint().to_bytes();
    let ckpt = Checkpoint::from_slice(&bytes, "memory").unwrap();
    let (mut resumed, warning) = Trainer::resume(cfg, ckpt, false).unwrap();
    assert!(warning.is_none());
    let tail: Vec<f64> = (0..10).map(|_| resumed.step().unwrap().loss.total).collect();
    let same = tail.iter().zip(&straight[10..]).all(|(a, b)| a.to_bits() == b.to_bits());
    assert!(same, "{tail:?} vs {:?}", &straight[10..]);
}

#[test]
fn resume_across_a_stage_boundary() {
    let mut cfg = tiny();
    cfg.train.stages = vec![StageConfig::v_pretrain(8), StageConfig::u_finetune(12, Some([0.1, 0.3]))];
    let straight = losses(&cfg, 20);
    let mut tr = Trainer::new(cfg.clone()).unwrap();
    for _ in 0..8 {
        tr.step().unwrap();
    }
    let (mut resumed, _) = Trainer::resume(cfg, tr.checkpoint(), false).unwrap();
    let tail: Vec<f64> = (0..12).map(|_| resumed.step().unwrap().loss.total).collect();
    assert_eq!(tail, straight[8..].to_vec());
}

#[test]
fn checkpoint_for_another_dimension_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    Trainer::new(tiny()).unwrap().checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.net, Trainer::new(tiny()).unwrap().checkpoint().net);
    let wrong = NetConfig {
        data_dim: 3,
        ..tiny().net
    };
    match Checkpoint::load_for(&path, &wrong) {
        Err(Error::Config(msg)) => assert!(msg.contains("data_dim"), "{msg}"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn digest_mismatch_needs_force() {
    let cfg = tiny();
    let ckpt = Trainer::new(cfg.clone()).unwrap().checkpoint();
    let mut changed = cfg;
    changed.train.lr *= 2.0;
    assert!(matches!(Trainer::resume(changed.clone(), ckpt.clone(), false), Err(Error::Config(_))));
    let (_, warning) = Trainer::resume(changed, ckpt, true).unwrap();
    assert!(warning.is_some());
}

#[test]
fn zero_iteration_run_writes_no_metric_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.train.total = 0;
    let summary = train(&cfg, dir.path()).unwrap();
    assert!(summary.records.is_empty());
    assert_eq!(summary.checkpoint.iteration, 0);
    assert_eq!(summary.checkpoint.net, Trainer::new(cfg).unwrap().net().clone());
}

#[test]
fn run_directory_layout_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.train.log_every = 5;
    cfg.train.eval_every = 10;
    let summary = train(&cfg, dir.path()).unwrap();
    for f in [MANIFEST_FILE, METRICS_FILE, FINAL_CHECKPOINT] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let manifest = RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.config, cfg);
    let text = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER.join(","));
    let rows = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(rows, summary.records);
    assert_eq!(rows.iter().filter(|r| r.has_eval()).count(), 2);
}

#[test]
fn staged_and_joint_runs_share_a_schema() {
    let mut staged = tiny();
    staged.train.stages = vec![StageConfig::v_pretrain(5), StageConfig::u_finetune(15, None)];
    for cfg in [tiny(), staged] {
        let mut tr = Trainer::new(cfg).unwrap();
        let mut rows: Vec<MetricsRecord> = Vec::new();
        tr.run(&mut rows).unwrap();
        assert_eq!(rows.len(), 20);
        assert!(rows.iter().all(|r| r.loss_total.is_some()));
        assert!(rows.last().unwrap().has_eval());
    }
}

#[test]
fn sweeps_produce_one_row_per_value() {
    let cfg = tiny();
    let ks: Vec<SweepValue> = [0.0, 0.03, 0.1].map(SweepValue::Scalar).to_vec();
    let t = run_stage_sweep(&cfg, SweepAxis::KNoise, &ks, None, None, 1).unwrap();
    assert_eq!(t.cells.len(), 3);
    assert!(t.cells.iter().all(|c| c.outcome.is_ok()));
    let ranges: Vec<SweepValue> = meanflow::sample_eval::TAS_INTERVALS.map(SweepValue::Range).to_vec();
    let t = run_stage_sweep(&cfg, SweepAxis::DtRange, &ranges, None, None, 1).unwrap();
    assert_eq!(t.cells.len(), 4);
    assert_eq!(t.to_csv().lines().count(), 5);
    assert!(matches!(run_stage_sweep(&cfg, SweepAxis::KSched, &[], None, None, 1), Err(Error::Config(_))));
}
