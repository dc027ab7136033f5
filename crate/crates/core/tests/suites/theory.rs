//! Tabular theory checks and the bridge between exact successor features
//! and the learned TD loss.

use std::time::Instant;

use srcp::linalg::Matrix;
use srcp::oracle::{
    exact_q, exact_successor_measure, lift_state_features, run_theory_suite, Policy, SuccessorConvention, TabularMdp,
    TheorySuiteConfig,
};
use srcp::rng::RngStream;
use srcp::successor::successor_loss;
use srcp::tensor::{Graph, Tensor};

fn random_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix<f64> {
    Matrix {
        n_rows: rows,
        n_cols: cols,
        data: (0..rows * cols).map(|_| rng.normal()).collect(),
    }
}

/// Truncated `sum_t gamma^t P^t r` by repeated one-step backups, written
/// directly from transition probabilities.
fn neumann_q(mdp: &TabularMdp, policy: &Policy, reward: &[f64], terms: usize) -> Vec<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut total = reward.to_vec();
    let mut term = reward.to_vec();
    let mut discount = 1.0;
    for _ in 1..terms {
        discount *= mdp.gamma();
        let mut next = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                let mut acc = 0.0;
                for s2 in 0..ns {
                    let p = mdp.transition(s, a, s2);
                    for a2 in 0..na {
                        acc += p * policy.prob(s2, a2) * term[s2 * na + a2];
                    }
                }
                next[s * na + a] = acc;
            }
        }
        for (t, v) in total.iter_mut().zip(&next) {
            *t += discount * v;
        }
        term = next;
    }
    total
}

pub fn theory_suite_passes_within_a_minute() {
    let start = Instant::now();
    let report = run_theory_suite(&TheorySuiteConfig::default()).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert_eq!(report.prop1.len(), 20);
    assert_eq!(report.prop2.len(), 200);
    assert_eq!(report.theorem.len(), 100);
    let worst1 = report.prop1.iter().map(|r| r.max_abs_diff).fold(0.0, f64::max);
    assert!(worst1 < 1e-8, "matrix vs Bellman evaluation differ by {worst1:e}");
    assert!(report.prop1_pass && report.prop2_pass);
    let violations = report.theorem.iter().filter(|r| !r.pass || r.lhs_value > r.rhs_value).count();
    assert_eq!(violations, 0);
    assert!(report.theorem_pass && report.pass);
    assert!(elapsed < 60.0, "suite took {elapsed:.1}s");
}

pub fn matrix_q_matches_truncated_series() {
    let root = RngStream::new(31);
    for i in 0..10 {
        let mut rng = root.split(i);
        let mdp = TabularMdp::random(3 + rng.index(5), 2 + rng.index(3), 0.8, 0.5, &mut rng);
        let policy = Policy::random(mdp.n_states(), mdp.n_actions(), &mut rng);
        let reward: Vec<f64> = (0..mdp.n_pairs()).map(|_| rng.normal()).collect();
        let q = exact_q(&mdp, &policy, &reward).unwrap();
        // 0.8^300 is far below f64 resolution of the sum
        let oracle = neumann_q(&mdp, &policy, &reward, 300);
        let diff = q.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "instance {i}: {diff:e}");
    }
}

pub fn successor_features_linearize_q() {
    let mut rng = RngStream::new(5);
    let mdp = TabularMdp::random(6, 3, 0.9, 0.5, &mut rng);
    let policy = Policy::random(6, 3, &mut rng);
    let phi = random_matrix(mdp.n_pairs(), 4, &mut rng);
    let z = [0.3, -1.2, 0.5, 0.9];
    let psi = exact_successor_measure(&mdp, &policy)
        .unwrap()
        .features(&phi, SuccessorConvention::IncludeCurrent)
        .unwrap();
    let reward = phi.matvec(&z);
    let q = neumann_q(&mdp, &policy, &reward, 400);
    for (i, qi) in q.iter().enumerate() {
        let lin: f64 = psi.row(i).iter().zip(&z).map(|(p, w)| p * w).sum();
        assert!((lin - qi).abs() < 1e-9);
    }
}

/// Five states on a ring with two actions (stay, advance) and a fixed policy.
fn ring() -> (TabularMdp, Vec<usize>) {
    let next: Vec<Vec<usize>> = (0..5).map(|s| vec![s, (s + 1) % 5]).collect();
    let mdp = TabularMdp::deterministic(&next, 0.9).unwrap();
    (mdp, vec![1, 1, 0, 1, 1])
}

pub fn exact_successor_features_zero_the_td_loss_on_every_transition() {
    let (mdp, actions) = ring();
    let policy = Policy::deterministic(2, &actions);
    let mut rng = RngStream::new(11);
    let d = 3;
    let phi_states = random_matrix(5, d, &mut rng);
    let psi = exact_successor_measure(&mdp, &policy)
        .unwrap()
        .features(&lift_state_features(&mdp, &phi_states), SuccessorConvention::NextState)
        .unwrap();

    let step = |s: usize, a: usize| if a == 0 { s } else { (s + 1) % 5 };
    // rollout oracle: psi(s, a) = sum_t gamma^t phi(s_{t+1})
    for s in 0..5 {
        for a in 0..2 {
            let mut acc = vec![0.0; d];
            let (mut cur, mut act, mut disc) = (s, a, 1.0);
            for _ in 0..500 {
                cur = step(cur, act);
                for (k, v) in acc.iter_mut().enumerate() {
                    *v += disc * phi_states.get(cur, k);
                }
                act = actions[cur];
                disc *= 0.9;
            }
            for k in 0..d {
                assert!((acc[k] - psi.get(s * 2 + a, k)).abs() < 1e-10);
            }
        }
    }

    let mut worst: f64 = 0.0;
    for s in 0..5 {
        for a in 0..2 {
            let s2 = step(s, a);
            let a2 = actions[s2];
            let mut g = Graph::new();
            let v = g.constant(Tensor::new(vec![1, d], psi.row(s * 2 + a).to_vec()).unwrap());
            let phi_next = Tensor::new(vec![1, d], phi_states.row(s2).to_vec()).unwrap();
            let psi_bar = Tensor::new(vec![1, d], psi.row(s2 * 2 + a2).to_vec()).unwrap();
            let loss = successor_loss(&mut g, v, &phi_next, &psi_bar, 0.9).unwrap();
            worst = worst.max(g.value(loss).data()[0]);
        }
    }
    assert!(worst < 1e-8, "largest per-transition residual {worst:e}");
}

pub fn expected_td_target_vanishes_on_a_stochastic_mdp() {
    let mut rng = RngStream::new(12);
    let mdp = TabularMdp::random(5, 2, 0.9, 0.5, &mut rng);
    let policy = Policy::random(5, 2, &mut rng);
    let d = 3;
    let phi_states = random_matrix(5, d, &mut rng);
    let psi = exact_successor_measure(&mdp, &policy)
        .unwrap()
        .features(&lift_state_features(&mdp, &phi_states), SuccessorConvention::NextState)
        .unwrap();
    for s in 0..5 {
        for a in 0..2 {
            let mut phi_next = vec![0.0; d];
            let mut psi_bar = vec![0.0; d];
            for s2 in 0..5 {
                let p = mdp.transition(s, a, s2);
                for k in 0..d {
                    phi_next[k] += p * phi_states.get(s2, k);
                }
                for a2 in 0..2 {
                    let w = p * policy.prob(s2, a2);
                    for k in 0..d {
                        psi_bar[k] += w * psi.get(s2 * 2 + a2, k);
                    }
                }
            }
            let mut g = Graph::new();
            let v = g.constant(Tensor::new(vec![1, d], psi.row(s * 2 + a).to_vec()).unwrap());
            let loss = successor_loss(
                &mut g,
                v,
                &Tensor::new(vec![1, d], phi_next).unwrap(),
                &Tensor::new(vec![1, d], psi_bar).unwrap(),
                0.9,
            )
            .unwrap();
            assert!(g.value(loss).data()[0] < 1e-8);
        }
    }
}
