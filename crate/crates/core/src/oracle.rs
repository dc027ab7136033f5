//! Exact finite-MDP ground truth: successor measures by linear solve, exact
//! Q-functions, and numeric checks of the successor-feature bounds.
//!
//! State-action pairs are flattened as `s * n_actions + a`.

use rand_distr::{Dirichlet, Distribution};
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{solve, LinalgError, Matrix};
use crate::rng::RngStream;

pub const VALUE_ITERATION_TOL: f64 = 1e-12;
pub const VALUE_ITERATION_MAX_SWEEPS: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `p[(s * A + a) * S + s']`
    p: Vec<f64>,
    gamma: f64,
}

impl TabularMdp {
    pub fn new(n_states: usize, n_actions: usize, p: Vec<f64>, gamma: f64) -> Result<Self, OracleError> {
        if n_states == 0 || n_actions == 0 {
            return Err(OracleError::InvalidMdp("need at least one state and action".into()));
        }
        if p.len() != n_states * n_actions * n_states {
            return Err(OracleError::InvalidMdp(format!(
                "transition table has {} entries, expected {}",
                p.len(),
                n_states * n_actions * n_states
            )));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(OracleError::InvalidMdp(format!("gamma {gamma} not in (0, 1)")));
        }
        for (k, row) in p.chunks(n_states).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
                return Err(OracleError::InvalidMdp(format!(
                    "row (s={}, a={}) is not a distribution (sum {sum})",
                    k / n_actions,
                    k % n_actions
                )));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            p,
            gamma,
        })
    }

    /// Deterministic MDP from a successor table `next[s][a]`.
    pub fn deterministic(next: &[Vec<usize>], gamma: f64) -> Result<Self, OracleError> {
        let n_states = next.len();
        let n_actions = next.first().map_or(0, Vec::len);
        let mut p = vec![0.0; n_states * n_actions * n_states];
        for (s, row) in next.iter().enumerate() {
            if row.len() != n_actions {
                return Err(OracleError::InvalidMdp("ragged successor table".into()));
            }
            for (a, &s2) in row.iter().enumerate() {
                if s2 >= n_states {
                    return Err(OracleError::InvalidMdp(format!("successor {s2} out of range")));
                }
                p[(s * n_actions + a) * n_states + s2] = 1.0;
            }
        }
        Self::new(n_states, n_actions, p, gamma)
    }

    /// Rows drawn from a symmetric Dirichlet(`alpha`).
    pub fn random(n_states: usize, n_actions: usize, gamma: f64, alpha: f64, rng: &mut RngStream) -> Self {
        let mut p = Vec::with_capacity(n_states * n_actions * n_states);
        if n_states == 1 {
            p.resize(n_actions, 1.0);
        } else {
            let dir = Dirichlet::new_with_size(alpha, n_states).expect("valid Dirichlet");
            for _ in 0..n_states * n_actions {
                let row: Vec<f64> = dir.sample(rng);
                let sum: f64 = row.iter().sum();
                p.extend(row.iter().map(|v| v / sum));
            }
        }
        Self::new(n_states, n_actions, p, gamma).expect("random MDP is valid")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transition(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.p[(s * self.n_actions + a) * self.n_states + s2]
    }

    /// `(I - gamma P_pi)` applied implicitly: one Bellman backup of `q`.
    fn backup(&self, policy: &Policy, reward: &[f64], q: &[f64]) -> Vec<f64> {
        let v = policy.state_values(q);
        self.backup_values(reward, &v)
    }

    fn backup_values(&self, reward: &[f64], v: &[f64]) -> Vec<f64> {
        let (ns, na) = (self.n_states, self.n_actions);
        let mut out = vec![0.0; ns * na];
        for sa in 0..ns * na {
            let row = &self.p[sa * ns..(sa + 1) * ns];
            out[sa] = reward[sa] + self.gamma * row.iter().zip(v).map(|(p, v)| p * v).sum::<f64>();
        }
        out
    }

    /// `P_pi[(s,a),(s',a')] = P(s'|s,a) pi(a'|s')`.
    pub fn pair_transition(&self, policy: &Policy) -> Matrix<f64> {
        let (ns, na) = (self.n_states, self.n_actions);
        let mut m = Matrix::zeros(ns * na, ns * na);
        for sa in 0..ns * na {
            for s2 in 0..ns {
                let p = self.p[sa * ns + s2];
                if p == 0.0 {
                    continue;
                }
                for a2 in 0..na {
                    m.data[sa * ns * na + s2 * na + a2] = p * policy.prob(s2, a2);
                }
            }
        }
        m
    }
}

/// Stochastic policy table `pi(a|s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self, OracleError> {
        if probs.len() != n_states * n_actions {
            return Err(OracleError::InvalidPolicy("table size".into()));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
                return Err(OracleError::InvalidPolicy(format!("state {s} is not a distribution")));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Self {
            n_states: actions.len(),
            n_actions,
            probs,
        }
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn random(n_states: usize, n_actions: usize, rng: &mut RngStream) -> Self {
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for _ in 0..n_states {
            let row: Vec<f64> = (0..n_actions).map(|_| rng.uniform() + 1e-3).collect();
            let sum: f64 = row.iter().sum();
            probs.extend(row.iter().map(|v| v / sum));
        }
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    /// Greedy in `q` with lowest-index tie-breaking.
    pub fn greedy(n_actions: usize, q: &[f64]) -> Self {
        let actions: Vec<usize> = q.chunks(n_actions).map(argmax).collect();
        Self::deterministic(n_actions, &actions)
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    /// `V(s) = sum_a pi(a|s) q(s,a)`.
    pub fn state_values(&self, q: &[f64]) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| (0..self.n_actions).map(|a| self.prob(s, a) * q[s * self.n_actions + a]).sum())
            .collect()
    }

    fn check(&self, mdp: &TabularMdp) -> Result<(), OracleError> {
        if self.n_states != mdp.n_states || self.n_actions != mdp.n_actions {
            return Err(OracleError::InvalidPolicy(format!(
                "policy is {}x{}, MDP is {}x{}",
                self.n_states, self.n_actions, mdp.n_states, mdp.n_actions
            )));
        }
        Ok(())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sup_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Which time steps a successor quantity accumulates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuccessorConvention {
    /// `sum_{t>=0} gamma^t P_t`, including the starting pair.
    IncludeCurrent,
    /// `sum_{t>=0} gamma^t P_{t+1}`: features of the next pair onwards.
    NextState,
}

/// `M = (I - gamma P_pi)^{-1}` over state-action pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactSuccessor {
    pub m: Matrix<f64>,
    pub gamma: f64,
}

impl ExactSuccessor {
    /// Successor features for pair features `phi` (`n_pairs x d`).
    pub fn features(&self, phi: &Matrix<f64>, convention: SuccessorConvention) -> Result<Matrix<f64>, OracleError> {
        let mut psi = self.m.matmul(phi)?;
        if convention == SuccessorConvention::NextState {
            // M = I + gamma P_pi M, so P_pi M phi = (M - I) phi / gamma
            for (v, p) in psi.data.iter_mut().zip(&phi.data) {
                *v = (*v - p) / self.gamma;
            }
        }
        Ok(psi)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.m.n_rows).map(|i| self.m.row(i).iter().sum()).collect()
    }
}

pub fn exact_successor_measure(mdp: &TabularMdp, policy: &Policy) -> Result<ExactSuccessor, OracleError> {
    policy.check(mdp)?;
    let n = mdp.n_pairs();
    let mut a = mdp.pair_transition(policy);
    for v in a.data.iter_mut() {
        *v *= -mdp.gamma;
    }
    for i in 0..n {
        a.data[i * n + i] += 1.0;
    }
    let m = solve(&a, &Matrix::identity(n))?;
    Ok(ExactSuccessor { m, gamma: mdp.gamma })
}

/// Lift state features (`n_states x d`) to pair features.
pub fn lift_state_features(mdp: &TabularMdp, phi_states: &Matrix<f64>) -> Matrix<f64> {
    let d = phi_states.n_cols;
    let mut out = Matrix::zeros(mdp.n_pairs(), d);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            out.data[(s * mdp.n_actions + a) * d..(s * mdp.n_actions + a + 1) * d].copy_from_slice(phi_states.row(s));
        }
    }
    out
}

/// `Q = M r`.
pub fn exact_q(mdp: &TabularMdp, policy: &Policy, reward: &[f64]) -> Result<Vec<f64>, OracleError> {
    let m = exact_successor_measure(mdp, policy)?;
    Ok(m.m.matvec(reward))
}

/// Iterative policy evaluation from zero.
pub fn policy_evaluation(mdp: &TabularMdp, policy: &Policy, reward: &[f64], sweeps: usize) -> Vec<f64> {
    let mut q = vec![0.0; mdp.n_pairs()];
    for _ in 0..sweeps {
        let next = mdp.backup(policy, reward, &q);
        let done = sup_abs_diff(&next, &q) == 0.0;
        q = next;
        if done {
            break;
        }
    }
    q
}

/// Optimal Q by value iteration to a sup-norm change below 1e-12.
pub fn value_iteration(mdp: &TabularMdp, reward: &[f64]) -> Vec<f64> {
    let na = mdp.n_actions;
    let mut q = vec![0.0; mdp.n_pairs()];
    for _ in 0..VALUE_ITERATION_MAX_SWEEPS {
        let v: Vec<f64> = q.chunks(na).map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        let next = mdp.backup_values(reward, &v);
        let delta = sup_abs_diff(&next, &q);
        q = next;
        if delta < VALUE_ITERATION_TOL {
            break;
        }
    }
    q
}

fn greedy_values(n_actions: usize, q: &[f64]) -> Vec<f64> {
    q.chunks(n_actions).map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prop1Report {
    /// `sup |M r - Q_bellman|`.
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compare the matrix route `M r` with iterative Bellman evaluation.
pub fn verify_prop1(mdp: &TabularMdp, policy: &Policy, reward: &[f64], sweeps: usize) -> Result<Prop1Report, OracleError> {
    let q_matrix = exact_q(mdp, policy, reward)?;
    let q_bellman = policy_evaluation(mdp, policy, reward, sweeps);
    let d = sup_abs_diff(&q_matrix, &q_bellman);
    Ok(Prop1Report {
        max_abs_diff: d,
        tolerance: 1e-8,
        pass: d < 1e-8,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prop2Report {
    /// `sup |f - Q^{pi_f}|`
    pub eps: f64,
    pub lhs_value_gap: f64,
    pub rhs_value_gap: f64,
    pub slack_value_gap: f64,
    pub lhs_policy_gap: f64,
    pub rhs_policy_gap: f64,
    pub slack_policy_gap: f64,
    pub pass: bool,
}

/// Check `sup|f - Q*| <= 2/(1-g) eps` and `sup|Q^{pi_f} - Q*| <= 3/(1-g) eps`
/// with `eps = sup|f - Q^{pi_f}|` and `pi_f` greedy in `f`.
pub fn verify_prop2(mdp: &TabularMdp, reward: &[f64], f: &[f64]) -> Result<Prop2Report, OracleError> {
    let pi_f = Policy::greedy(mdp.n_actions, f);
    let q_pi = exact_q(mdp, &pi_f, reward)?;
    let q_star = value_iteration(mdp, reward);
    let eps = sup_abs_diff(f, &q_pi);
    let k = 1.0 / (1.0 - mdp.gamma);
    let lhs1 = sup_abs_diff(f, &q_star);
    let lhs2 = sup_abs_diff(&q_pi, &q_star);
    // value iteration is accurate to ~1e-12/(1-g); allow for that
    let slop = 1e-9 * k;
    let r = Prop2Report {
        eps,
        lhs_value_gap: lhs1,
        rhs_value_gap: 2.0 * k * eps,
        slack_value_gap: 2.0 * k * eps - lhs1,
        lhs_policy_gap: lhs2,
        rhs_policy_gap: 3.0 * k * eps,
        slack_policy_gap: 3.0 * k * eps - lhs2,
        pass: false,
    };
    Ok(Prop2Report {
        pass: r.slack_value_gap >= -slop && r.slack_policy_gap >= -slop,
        ..r
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoremReport {
    pub perturbation_scale: f64,
    /// Dual norm used for `||z||_*`; the sup over features uses its primal.
    pub dual_norm: &'static str,
    pub z_norm: f64,
    /// `sup_{s,a} ||psi_hat - psi^{pi_z}||` for the derived greedy policy.
    pub sf_error: f64,
    /// Same sup against the successor features of the optimal policy.
    pub sf_error_vs_optimal: f64,
    pub lhs_value: f64,
    pub rhs_value: f64,
    pub tightness_value: f64,
    pub lhs_q: f64,
    pub rhs_q: f64,
    pub tightness_q: f64,
    pub pass: bool,
}

fn ratio(lhs: f64, rhs: f64) -> f64 {
    if rhs > 0.0 {
        lhs / rhs
    } else if lhs <= 1e-12 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Numeric check of the successor-feature error bounds.
///
/// The reward is `r = phi z`. Exact successor features of the optimal policy
/// are perturbed by Gaussian noise of the given scale to form `psi_hat`; the
/// greedy policy in `psi_hat^T z` is evaluated exactly and compared with the
/// optimum. Errors are measured against the successor features of that greedy
/// policy, as the bound requires.
pub fn verify_theorem(
    mdp: &TabularMdp,
    phi: &Matrix<f64>,
    z: &[f64],
    perturbation_scale: f64,
    rng: &mut RngStream,
) -> Result<TheoremReport, OracleError> {
    let n = mdp.n_pairs();
    if phi.n_rows != n || phi.n_cols != z.len() {
        return Err(OracleError::InvalidMdp(format!(
            "features {}x{} vs {} pairs and skill of length {}",
            phi.n_rows,
            phi.n_cols,
            n,
            z.len()
        )));
    }
    let d = z.len();
    let reward = phi.matvec(z);
    let q_star = value_iteration(mdp, &reward);
    let pi_star = Policy::greedy(mdp.n_actions, &q_star);
    let psi_star = exact_successor_measure(mdp, &pi_star)?.features(phi, SuccessorConvention::IncludeCurrent)?;
    let mut psi_hat = psi_star.clone();
    for v in psi_hat.data.iter_mut() {
        *v += perturbation_scale * rng.normal();
    }
    let f = psi_hat.matvec(z);
    let pi_z = Policy::greedy(mdp.n_actions, &f);
    let psi_pi = exact_successor_measure(mdp, &pi_z)?.features(phi, SuccessorConvention::IncludeCurrent)?;
    let row_err = |a: &Matrix<f64>, b: &Matrix<f64>| {
        (0..n)
            .map(|i| {
                a.row(i)
                    .iter()
                    .zip(b.row(i))
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    };
    let sf_error = row_err(&psi_hat, &psi_pi);
    let sf_error_vs_optimal = row_err(&psi_hat, &psi_star);
    let z_norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let k = 1.0 / (1.0 - mdp.gamma);

    let q_pi = exact_q(mdp, &pi_z, &reward)?;
    let v_pi = pi_z.state_values(&q_pi);
    let v_star = greedy_values(mdp.n_actions, &q_star);
    let lhs_value = sup_abs_diff(&v_pi, &v_star);
    let rhs_value = 3.0 * z_norm * k * sf_error;
    let lhs_q = sup_abs_diff(&f, &q_star);
    let rhs_q = 2.0 * z_norm * k * sf_error;
    let slop = 1e-9 * k * (1.0 + z_norm) * (1.0 + d as f64);
    Ok(TheoremReport {
        perturbation_scale,
        dual_norm: "l2",
        z_norm,
        sf_error,
        sf_error_vs_optimal,
        lhs_value,
        rhs_value,
        tightness_value: ratio(lhs_value, rhs_value),
        lhs_q,
        rhs_q,
        tightness_q: ratio(lhs_q, rhs_q),
        pass: lhs_value <= rhs_value + slop && lhs_q <= rhs_q + slop,
    })
}

/// Suite sizes for [`run_theory_suite`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheorySuiteConfig {
    pub n_mdps: usize,
    pub f_tables_per_mdp: usize,
    /// Number of MDPs used for the theorem check.
    pub theorem_mdps: usize,
    pub perturbations_per_mdp: usize,
    pub scales: Vec<f64>,
    pub seed: u64,
}

impl Default for TheorySuiteConfig {
    fn default() -> Self {
        Self {
            n_mdps: 20,
            f_tables_per_mdp: 10,
            theorem_mdps: 10,
            perturbations_per_mdp: 10,
            scales: vec![0.01, 0.1, 1.0],
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MdpSummary {
    pub index: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub min_row_sum: f64,
    pub max_row_sum: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TheorySuiteReport {
    pub config: TheorySuiteConfig,
    pub mdps: Vec<MdpSummary>,
    pub prop1: Vec<Prop1Report>,
    pub prop2: Vec<Prop2Report>,
    pub theorem: Vec<TheoremReport>,
    pub prop1_pass: bool,
    pub prop2_pass: bool,
    pub theorem_pass: bool,
    pub max_tightness: f64,
    pub pass: bool,
}

/// Random instance with 2..=8 states, 2..=4 actions, gamma in [0.5, 0.95].
pub fn random_instance(rng: &mut RngStream) -> TabularMdp {
    let ns = 2 + rng.index(7);
    let na = 2 + rng.index(3);
    let gamma = rng.uniform_in(0.5, 0.95);
    TabularMdp::random(ns, na, gamma, 0.5, rng)
}

pub fn run_theory_suite(config: &TheorySuiteConfig) -> Result<TheorySuiteReport, OracleError> {
    let root = RngStream::new(config.seed);
    let mut mdps = Vec::new();
    let mut prop1 = Vec::new();
    let mut prop2 = Vec::new();
    let mut theorem = Vec::new();
    for i in 0..config.n_mdps {
        let mut rng = root.split(i as u64);
        let mdp = random_instance(&mut rng);
        let n = mdp.n_pairs();
        let policy = Policy::random(mdp.n_states, mdp.n_actions, &mut rng);
        let m = exact_successor_measure(&mdp, &policy)?;
        let sums = m.row_sums();
        mdps.push(MdpSummary {
            index: i,
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
            gamma: mdp.gamma,
            min_row_sum: sums.iter().copied().fold(f64::INFINITY, f64::min),
            max_row_sum: sums.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
        let reward: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        prop1.push(verify_prop1(&mdp, &policy, &reward, 10_000)?);

        let q_star = value_iteration(&mdp, &reward);
        for j in 0..config.f_tables_per_mdp {
            // alternate perturbations of Q* and unstructured tables
            let f: Vec<f64> = if j % 2 == 0 {
                let scale = [0.01, 0.1, 1.0, 10.0][(j / 2) % 4];
                q_star.iter().map(|q| q + scale * rng.normal()).collect()
            } else {
                let spread = 1.0 / (1.0 - mdp.gamma);
                (0..n).map(|_| rng.uniform_in(-spread, spread)).collect()
            };
            prop2.push(verify_prop2(&mdp, &reward, &f)?);
        }

        if i < config.theorem_mdps {
            let d = 2 + rng.index(4);
            let phi = Matrix {
                n_rows: n,
                n_cols: d,
                data: (0..n * d).map(|_| rng.normal()).collect(),
            };
            let z: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            for j in 0..config.perturbations_per_mdp {
                let scale = config.scales[j % config.scales.len()];
                theorem.push(verify_theorem(&mdp, &phi, &z, scale, &mut rng)?);
            }
        }
    }
    let prop1_pass = prop1.iter().all(|r| r.pass);
    let prop2_pass = prop2.iter().all(|r| r.pass);
    let theorem_pass = theorem.iter().all(|r| r.pass);
    let max_tightness = theorem
        .iter()
        .flat_map(|r| [r.tightness_value, r.tightness_q])
        .fold(0.0, f64::max);
    Ok(TheorySuiteReport {
        config: config.clone(),
        mdps,
        prop1,
        prop2,
        theorem,
        prop1_pass,
        prop2_pass,
        theorem_pass,
        max_tightness,
        pass: prop1_pass && prop2_pass && theorem_pass,
    })
}
