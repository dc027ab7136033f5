//! Classifier-free guidance identities and evaluation counting.

use srcp::policy::{guide, ActMode, ConsistencyPolicy, PolicyConfig};
use srcp::rng::RngStream;
use srcp::successor::sample_skills;
use srcp::tensor::Tensor;

fn randn(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

pub fn guidance_endpoints_are_bit_exact() {
    let mut rng = RngStream::new(1);
    for _ in 0..200 {
        let c = randn(&[8, 2], &mut rng).map(|v| (v * 0.5).clamp(-1.0, 1.0));
        let u = randn(&[8, 2], &mut rng).map(|v| (v * 0.5).clamp(-1.0, 1.0));
        assert_eq!(guide(&c, &u, 1.0).data(), c.data());
        assert_eq!(guide(&c, &u, 0.0).data(), u.data());
        let g = guide(&c, &u, 3.0);
        for ((gv, cv), uv) in g.data().iter().zip(c.data()).zip(u.data()) {
            assert!(gv.abs() <= 1.0);
            assert!((gv - (uv + 3.0 * (cv - uv)).clamp(-1.0, 1.0)).abs() < 1e-12);
        }
    }
}

pub fn actions_at_omega_one_and_zero_match_single_branches() {
    let cfg = PolicyConfig::default();
    let mut rng = RngStream::new(2);
    let policy = ConsistencyPolicy::new(6, 4, &cfg, &mut rng).unwrap();
    let s = randn(&[5, 6], &mut rng);
    let z = sample_skills(5, 4, &mut rng);
    let a_n = Tensor::zeros(&[5, 2]);
    let level = Tensor::full(&[5, 1], policy.schedule.feature(policy.schedule.len()));
    let cond = policy.online.eval(&s, &a_n, &level, Some(&z)).unwrap().map(|v| v.clamp(-1.0, 1.0));
    let uncond = policy.online.eval(&s, &a_n, &level, None).unwrap().map(|v| v.clamp(-1.0, 1.0));
    let a1 = policy.act(&s, &z, 1.0, ActMode::Eval, None, &cfg).unwrap();
    let a0 = policy.act(&s, &z, 0.0, ActMode::Eval, None, &cfg).unwrap();
    assert_eq!(a1.data(), cond.data());
    assert_eq!(a0.data(), uncond.data());
}

pub fn one_conditioned_and_one_unconditional_call_per_action() {
    let cfg = PolicyConfig::default();
    let mut rng = RngStream::new(3);
    let policy = ConsistencyPolicy::new(6, 4, &cfg, &mut rng).unwrap();
    for rows in [1, 7] {
        let s = randn(&[rows, 6], &mut rng);
        let z = sample_skills(rows, 4, &mut rng);
        policy.counter.reset();
        policy.act(&s, &z, 3.0, ActMode::Eval, None, &cfg).unwrap();
        assert_eq!((policy.counter.conditioned(), policy.counter.unconditional()), (1, 1));
        policy.counter.reset();
        let mut noise = RngStream::new(9);
        let a = policy.act(&s, &z, 3.0, ActMode::Train, Some(&mut noise), &cfg).unwrap();
        assert_eq!((policy.counter.conditioned(), policy.counter.unconditional()), (1, 1));
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
    }
}

pub fn eval_actions_are_deterministic() {
    let cfg = PolicyConfig::default();
    let mut rng = RngStream::new(4);
    let policy = ConsistencyPolicy::new(6, 4, &cfg, &mut rng).unwrap();
    let s = randn(&[3, 6], &mut rng);
    let z = sample_skills(3, 4, &mut rng);
    let a = policy.act(&s, &z, 3.0, ActMode::Eval, None, &cfg).unwrap();
    let b = policy.act(&s, &z, 3.0, ActMode::Eval, None, &cfg).unwrap();
    assert_eq!(a.data(), b.data());
}
