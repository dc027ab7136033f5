//! Loop order, determinism, config validation and serialization.

use srcp::dataset::{generate_dataset, Generator, OfflineDataset};
use srcp::env::{EnvConfig, TaskId};
use srcp::evaluate::{evaluate_skill, EvalOptions};
use srcp::trainer::{pretrain, Agent, Phase, PretrainOptions, TrainConfig, CHECKPOINT_FILE, METRICS_FILE};
use srcp::TrainError;

fn tiny(steps: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig {
        seed,
        steps,
        batch_size: 16,
        latent_dim: 8,
        feature_dim: 4,
        log_interval: 1,
        ..TrainConfig::default()
    };
    c.network.encoder_hidden = vec![32];
    c.network.head_hidden = vec![16];
    c.network.phi_hidden = vec![16];
    c.network.psi_hidden = vec![16];
    c.network.policy_hidden = vec![16];
    c
}

fn small_dataset() -> OfflineDataset {
    generate_dataset(&EnvConfig::default(), Generator::GoalSweep, 300, 1).unwrap()
}

pub fn one_iteration_updates_each_module_once_in_order() {
    let ds = small_dataset();
    let opts = PretrainOptions {
        record_trace: true,
        ..PretrainOptions::default()
    };
    let out = pretrain(&tiny(1, 0), &ds, &opts).unwrap();
    let phases: Vec<Phase> = out.trace.iter().map(|e| e.phase).collect();
    assert_eq!(phases, vec![Phase::Saliency, Phase::Rep, Phase::Successor, Phase::Policy, Phase::Ema]);
    assert!(out.trace.iter().all(|e| e.step == 0 && e.inner == 0));

    // the policy is updated on every second iteration only
    let out = pretrain(&tiny(2, 0), &ds, &opts).unwrap();
    let second: Vec<Phase> = out.trace.iter().filter(|e| e.step == 1).map(|e| e.phase).collect();
    assert_eq!(second, vec![Phase::Saliency, Phase::Rep, Phase::Successor, Phase::Ema]);
}

pub fn inner_updates_repeat_the_sequence() {
    let ds = small_dataset();
    let mut cfg = tiny(1, 0);
    cfg.inner_updates = 3;
    let opts = PretrainOptions {
        record_trace: true,
        ..PretrainOptions::default()
    };
    let out = pretrain(&cfg, &ds, &opts).unwrap();
    assert_eq!(out.trace.len(), 15);
    for (k, e) in out.trace.iter().enumerate() {
        assert_eq!(e.inner, k / 5);
    }
}

pub fn same_seed_runs_are_bit_identical() {
    let ds = small_dataset();
    let a = pretrain(&tiny(6, 3), &ds, &PretrainOptions::default()).unwrap();
    let b = pretrain(&tiny(6, 3), &ds, &PretrainOptions::default()).unwrap();
    assert_eq!(a.agent.to_bytes(), b.agent.to_bytes());
    let losses = |m: &[srcp::trainer::MetricsRow]| m.iter().map(|r| r.losses()).collect::<Vec<_>>();
    assert_eq!(losses(&a.metrics), losses(&b.metrics));
    let c = pretrain(&tiny(6, 4), &ds, &PretrainOptions::default()).unwrap();
    assert_ne!(a.agent.to_bytes(), c.agent.to_bytes());

    // regenerated datasets and evaluations are identical as well
    assert_eq!(small_dataset().to_bytes(), ds.to_bytes());
    let opts = EvalOptions {
        n_label: 200,
        n_episodes: 1,
        seed: 5,
        omega: 3.0,
    };
    let z = vec![0.5, -0.5, 0.5, 0.5];
    let r1 = evaluate_skill(&a.agent, &EnvConfig::default(), TaskId::ReachTopLeft, &z, &opts).unwrap();
    let r2 = evaluate_skill(&b.agent, &EnvConfig::default(), TaskId::ReachTopLeft, &z, &opts).unwrap();
    assert_eq!(r1.returns, r2.returns);
}

pub fn checkpoints_round_trip_and_reject_corruption() {
    let ds = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    let opts = PretrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..PretrainOptions::default()
    };
    let out = pretrain(&tiny(3, 1), &ds, &opts).unwrap();
    let path = dir.path().join(CHECKPOINT_FILE);
    let loaded = Agent::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), out.agent.to_bytes());
    assert_eq!(loaded.checksums(), out.agent.checksums());
    assert_eq!(loaded.config, out.agent.config);
    let csv = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let bytes = std::fs::read(&path).unwrap();
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    assert!(Agent::from_bytes(&flipped).is_err());
    assert!(Agent::from_bytes(&bytes[..bytes.len() - 7]).is_err());
    assert!(Agent::from_bytes(b"not a checkpoint").is_err());
    let mut tail = bytes.clone();
    tail.push(0);
    assert!(Agent::from_bytes(&tail).is_err());
}

pub fn dataset_files_round_trip_bit_exactly() {
    let ds = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.srds");
    ds.save(&path).unwrap();
    let back = OfflineDataset::load(&path).unwrap();
    assert_eq!(back.to_bytes(), ds.to_bytes());
    let mut bytes = std::fs::read(&path).unwrap();
    let k = bytes.len() - 100;
    bytes[k] ^= 1;
    assert!(OfflineDataset::from_bytes(&bytes).is_err());
}

pub fn invalid_configs_are_rejected_before_training() {
    let ds = small_dataset();
    let cases: Vec<Box<dyn Fn(&mut TrainConfig)>> = vec![
        Box::new(|c| c.gamma = 1.0),
        Box::new(|c| c.batch_size = 0),
        Box::new(|c| c.lr = -1e-4),
        Box::new(|c| c.tau = 0.0),
        Box::new(|c| c.beta = -0.5),
        Box::new(|c| c.k_frac = 0.0),
        Box::new(|c| c.noise_levels = 1),
        Box::new(|c| c.steps = 0),
        Box::new(|c| c.omega = f64::NAN),
        Box::new(|c| c.network.sigma_max = 0.001),
        Box::new(|c| c.batch_size = 10_000),
        Box::new(|c| c.env.grid_size = 16),
    ];
    for (k, edit) in cases.iter().enumerate() {
        let mut cfg = tiny(1, 0);
        edit(&mut cfg);
        match pretrain(&cfg, &ds, &PretrainOptions::default()) {
            Err(TrainError::Config(_)) => {}
            Err(e) => panic!("case {k}: wrong error {e}"),
            Ok(_) => panic!("case {k}: accepted"),
        }
    }
    assert!(TrainConfig::from_toml_str("steps = 10\nbogus = 1\n").is_err());
    assert!(TrainConfig::from_toml_str("gamma = 2.0\n").is_err());
    let text = tiny(5, 9).to_toml();
    assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), tiny(5, 9));
}

pub fn zero_rewards_run_the_unconditional_branch() {
    let ds = small_dataset();
    let agent = pretrain(&tiny(2, 0), &ds, &PretrainOptions::default()).unwrap().agent;
    let opts = EvalOptions {
        n_label: 100,
        n_episodes: 1,
        seed: 0,
        omega: 3.0,
    };
    let zero = vec![0.0; 4];
    let r = evaluate_skill(&agent, &EnvConfig::default(), TaskId::RunRight, &zero, &opts).unwrap();
    assert_eq!(r.returns.len(), 1);
    assert!(r.mean.is_finite());
}
