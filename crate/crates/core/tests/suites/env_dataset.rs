use srcp::dataset::{generate_dataset, Generator, OfflineDataset};
use srcp::env::{dynamics, render, DistractorMode, DotWorld, EnvConfig, PhysState, TaskId, CHANNELS, DISTRACTOR_CHANNEL};
use srcp::rng::RngStream;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn distractor_uncorrelated_with_agent_position() {
    let cfg = EnvConfig::default();
    let (mut xs, mut ys, mut mass, mut first) = (vec![], vec![], vec![], vec![]);
    for seed in 0..1000 {
        let w = DotWorld::reset(&cfg, seed);
        let o = w.observation();
        let d: Vec<f64> = o.iter().skip(DISTRACTOR_CHANNEL).step_by(CHANNELS).copied().collect();
        xs.push(w.state().pos[0]);
        ys.push(w.state().pos[1]);
        mass.push(d.iter().sum());
        first.push(d[0]);
    }
    for (a, b) in [(&xs, &mass), (&ys, &mass), (&xs, &first), (&ys, &first)] {
        let rho = pearson(a, b);
        assert!(rho.abs() < 0.1, "rho = {rho}");
    }
}

pub fn distractor_never_changes_the_physics() {
    for mode in [DistractorMode::Flicker, DistractorMode::StaticPattern] {
        let cfg = EnvConfig { distractor: mode, ..EnvConfig::default() };
        let start = PhysState { pos: [0.4, 0.7], vel: [0.0; 2] };
        let mut w1 = DotWorld::from_state(&cfg, start, &mut RngStream::new(1));
        let mut w2 = DotWorld::from_state(&cfg, start, &mut RngStream::new(2));
        let mut actions = RngStream::new(9);
        let mut differs = false;
        for _ in 0..100 {
            let a = [actions.uniform_in(-1.0, 1.0), actions.uniform_in(-1.0, 1.0)];
            let o1 = w1.step(a);
            let o2 = w2.step(a);
            assert_eq!(w1.state(), w2.state());
            differs |= o1 != o2;
        }
        assert!(differs);
    }
}

pub fn observation_is_a_function_of_state_and_pattern() {
    let cfg = EnvConfig::default();
    let s = PhysState { pos: [0.25, 0.8], vel: [0.1, 0.0] };
    let pattern: Vec<f64> = (0..144).map(|i| (i % 7) as f64 / 7.0).collect();
    assert_eq!(render(&cfg, &s, &pattern), render(&cfg, &s, &pattern));
    let (n1, _) = dynamics(&s, [0.3, -0.2], &cfg);
    let (n2, _) = dynamics(&s, [0.3, -0.2], &cfg);
    assert_eq!(n1, n2);
}

pub fn goal_sweep_covers_the_arena() {
    let ds = generate_dataset(&EnvConfig::default(), Generator::GoalSweep, 10_000, 0).unwrap();
    assert!(ds.meta().coverage >= 0.9, "coverage {}", ds.meta().coverage);
}

pub fn same_seed_gives_identical_bytes() {
    let cfg = EnvConfig::default();
    let a = generate_dataset(&cfg, Generator::OuNoise, 300, 12).unwrap();
    let b = generate_dataset(&cfg, Generator::OuNoise, 300, 12).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let c = generate_dataset(&cfg, Generator::OuNoise, 300, 13).unwrap();
    assert_ne!(a.to_bytes(), c.to_bytes());
}

pub fn uniform_sampling_passes_chi_square() {
    let ds = generate_dataset(&EnvConfig::default(), Generator::UniformRandom, 100, 5).unwrap();
    let mut counts = [0usize; 100];
    let mut rng = RngStream::new(77);
    for _ in 0..1000 {
        for i in ds.sample_indices(100, &mut rng).unwrap() {
            counts[i] += 1;
        }
    }
    let expected = 1000.0;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(99.0).unwrap().cdf(stat);
    assert!(p > 0.001, "chi2 {stat}, p {p}");
}

pub fn uniform_random_reach_reward_is_small_but_positive() {
    let ds = generate_dataset(&EnvConfig::default(), Generator::UniformRandom, 10_000, 1).unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for task in [TaskId::ReachTopLeft, TaskId::ReachBottomRight] {
        let l = ds.label_rewards(&idx, task).unwrap();
        let mean = l.rewards.iter().sum::<f64>() / l.rewards.len() as f64;
        assert!(mean > 0.0 && mean < 0.25, "{task}: {mean}");
    }
}

pub fn labeling_at_the_corner_gives_full_reward() {
    let cfg = EnvConfig::default();
    let ds = generate_dataset(&cfg, Generator::GoalSweep, 2000, 2).unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let l = ds.label_rewards(&idx, TaskId::ReachTopLeft).unwrap();
    for (k, &i) in idx.iter().enumerate() {
        if ds.next_state(i).pos == [0.0, 1.0] {
            assert_eq!(l.rewards[k], 1.0);
        }
    }
    let before = ds.to_bytes();
    let _ = ds.label_rewards(&idx, TaskId::RunRight).unwrap();
    assert_eq!(before, ds.to_bytes());
}

pub fn save_and_load_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.srds");
    let ds = generate_dataset(&EnvConfig::default(), Generator::UniformRandom, 150, 4).unwrap();
    ds.save(&path).unwrap();
    assert_eq!(OfflineDataset::load(&path).unwrap(), ds);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() / 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(OfflineDataset::load(&path).is_err());
}
