//! Basic features from a Hilbert-distance value objective, successor
//! features trained by Bellman consistency, skill sampling and closed-form
//! skill inference.

use serde::{Deserialize, Serialize};

use crate::env::ACTION_DIM;
use crate::linalg::{ridge, LinalgError, Matrix};
use crate::nn::{Activation, BoundMlp, Mlp, MlpSpec};
use crate::rng::RngStream;
use crate::tensor::{ema_update, Adam, AdamConfig, Checkpoint, Graph, Tensor, TensorError, Var};
use crate::TrainError;

/// How the goal-reaching target is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HilpTarget {
    /// `r + gamma (1 - r) V'`.
    Literal,
    /// `(r - 1) + gamma (1 - r) V'`: a unit cost per step until the goal is
    /// reached, so values are negative discounted hop counts.
    StepPenalty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuccessorConfig {
    pub feature_dim: usize,
    pub phi_hidden: Vec<usize>,
    pub psi_hidden: Vec<usize>,
    pub activation: Activation,
    /// Latent distance under which a goal counts as reached.
    pub goal_threshold: f64,
    pub hilp_target: HilpTarget,
    /// Probability that a goal is drawn from the same trajectory.
    pub trajectory_goal_prob: f64,
    /// Ridge term for skill inference.
    pub ridge_eps: f64,
    /// Center and rescale `phi` with running statistics before it reaches
    /// `psi` and skill inference.
    pub feature_norm: bool,
    /// EMA rate of those statistics.
    pub feature_norm_rate: f64,
}

impl Default for SuccessorConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            phi_hidden: vec![128, 128],
            psi_hidden: vec![128, 128],
            activation: Activation::Relu,
            goal_threshold: 0.1,
            hilp_target: HilpTarget::StepPenalty,
            trajectory_goal_prob: 0.625,
            ridge_eps: 1e-6,
            feature_norm: true,
            feature_norm_rate: 0.01,
        }
    }
}

/// Uniform draw on the unit sphere in `R^d`.
pub fn sample_skill(d: usize, rng: &mut RngStream) -> Vec<f64> {
    loop {
        let z: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            return z.iter().map(|v| v / n).collect();
        }
    }
}

/// `n` skills stacked as rows.
pub fn sample_skills(n: usize, d: usize, rng: &mut RngStream) -> Tensor<f64> {
    let data = (0..n).flat_map(|_| sample_skill(d, rng)).collect();
    Tensor::new(vec![n, d], data).unwrap()
}

/// `V(s, g) = -||phi(s) - phi(g)||`, one value per row.
pub fn hilp_value(g: &mut Graph<f64>, phi_s: Var, phi_g: Var) -> Result<Var, TensorError> {
    let d = g.sub(phi_s, phi_g)?;
    let sq = g.square(d);
    let ss = g.row_sum(sq);
    let norm = g.sqrt(ss);
    Ok(g.neg(norm))
}

/// Twin squared TD loss `sum_i E[(target - V_i)^2]` with the target built
/// from `reached` indicators and min-over-twins target values `v_next`.
pub fn hilp_loss(
    g: &mut Graph<f64>,
    values: [Var; 2],
    v_next: &[Tensor<f64>; 2],
    reached: &[f64],
    gamma: f64,
    target: HilpTarget,
) -> Result<Var, TensorError> {
    let rows = reached.len();
    let shift = match target {
        HilpTarget::Literal => 0.0,
        HilpTarget::StepPenalty => 1.0,
    };
    let mut total = None;
    for (&v, v_next) in values.iter().zip(v_next) {
        if v_next.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "hilp_loss",
                lhs: v_next.shape().to_vec(),
                rhs: vec![rows, 1],
            });
        }
        let y: Vec<f64> = reached
            .iter()
            .zip(v_next.data())
            .map(|(&r, &vn)| r - shift + gamma * (1.0 - r) * vn)
            .collect();
        let y = g.constant(Tensor::new(vec![rows, 1], y)?);
        let l = g.mean_sq_dist(v, y)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    Ok(total.unwrap())
}

/// `E ||psi - phi(s') - gamma psi_bar(s', a', z)||^2`; the target is constant.
pub fn successor_loss(
    g: &mut Graph<f64>,
    psi: Var,
    phi_next: &Tensor<f64>,
    psi_bar_next: &Tensor<f64>,
    gamma: f64,
) -> Result<Var, TensorError> {
    if phi_next.shape() != psi_bar_next.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "successor_loss",
            lhs: phi_next.shape().to_vec(),
            rhs: psi_bar_next.shape().to_vec(),
        });
    }
    let y: Vec<f64> = phi_next
        .data()
        .iter()
        .zip(psi_bar_next.data())
        .map(|(p, q)| p + gamma * q)
        .collect();
    let y = g.constant(Tensor::new(phi_next.shape().to_vec(), y)?);
    g.mean_sq_dist(psi, y)
}

/// Closed-form skill `z_r = (Phi^T Phi / n + eps I)^{-1} Phi^T r / n`.
pub fn infer_skill(phi: &Tensor<f64>, rewards: &[f64], eps: f64) -> Result<Vec<f64>, TrainError> {
    if !(eps >= 0.0) {
        return Err(TrainError::Config(format!("ridge eps must be >= 0, got {eps}")));
    }
    let n = phi.rows();
    if n == 0 || rewards.len() != n {
        return Err(TrainError::SkillInference(format!(
            "{n} feature rows but {} rewards",
            rewards.len()
        )));
    }
    let x = Matrix {
        n_rows: n,
        n_cols: phi.cols(),
        data: phi.data().to_vec(),
    };
    let y = Matrix {
        n_rows: n,
        n_cols: 1,
        data: rewards.to_vec(),
    };
    match ridge(&x, &y, eps) {
        Ok(z) => Ok(z.data),
        Err(LinalgError::Singular { column, pivot }) => Err(TrainError::SkillInference(format!(
            "feature second-moment matrix is singular (column {column}, pivot {pivot:e}); use a ridge eps > 0"
        ))),
        Err(e) => Err(e.into()),
    }
}

pub fn l2_normalize(z: &[f64]) -> Vec<f64> {
    let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        z.iter().map(|v| v / n).collect()
    } else {
        z.to_vec()
    }
}

/// Successor features `psi(s, a, z)` as seen by the policy losses.
pub trait SuccessorCritic {
    fn psi(&self, g: &mut Graph<f64>, s: Var, a: Var, z: Var) -> Result<Var, TensorError>;
}

/// Running mean and scalar scale of `phi`. A single scale keeps the
/// geometry of the Hilbert embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNorm {
    pub enabled: bool,
    pub mean: Tensor<f64>,
    /// `[scale, updates]`.
    pub state: Tensor<f64>,
}

impl FeatureNorm {
    fn new(d: usize, enabled: bool) -> Self {
        Self {
            enabled,
            mean: Tensor::zeros(&[1, d]),
            state: Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.state.data()[0]
    }

    pub fn updates(&self) -> u64 {
        self.state.data()[1] as u64
    }

    /// Fold in a batch of raw features. The first batch sets the statistics.
    pub fn observe(&mut self, phi: &Tensor<f64>, rate: f64) -> Result<(), TensorError> {
        if !self.enabled || phi.rows() == 0 {
            return Ok(());
        }
        let n = phi.rows();
        let d = phi.len() / n;
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(phi.row(i)) {
                *m += v / n as f64;
            }
        }
        let var = (0..n)
            .map(|i| phi.row(i).iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>())
            .sum::<f64>()
            / (n * d) as f64;
        let first = self.updates() == 0;
        let r = if first { 1.0 } else { rate };
        let old_sq = self.scale().powi(2);
        let new_mean: Vec<f64> = self.mean.data().iter().zip(&mean).map(|(o, b)| (1.0 - r) * o + r * b).collect();
        let sq = (1.0 - r) * old_sq + r * var;
        self.mean = Tensor::new(vec![1, d], new_mean)?;
        self.state = Tensor::from_f64(&[2], &[sq.sqrt().max(1e-6), (self.updates() + 1) as f64])?;
        Ok(())
    }

    pub fn apply(&self, phi: Tensor<f64>) -> Result<Tensor<f64>, TensorError> {
        if !self.enabled {
            return Ok(phi);
        }
        let d = self.mean.len();
        let (mean, scale) = (self.mean.data(), self.scale());
        let data = phi.data().iter().enumerate().map(|(k, v)| (v - mean[k % d]) / scale).collect();
        Tensor::new(phi.shape().to_vec(), data)
    }
}

/// Twin basic-feature networks, successor network and their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SuccessorModel {
    pub phi: [Mlp<f64>; 2],
    pub phi_target: [Mlp<f64>; 2],
    pub psi: Mlp<f64>,
    pub psi_target: Mlp<f64>,
    pub feature_norm: FeatureNorm,
}

/// A successor network bound on a graph (frozen or trainable).
pub struct BoundPsi<'a> {
    pub net: &'a Mlp<f64>,
    pub bound: BoundMlp,
}

impl SuccessorCritic for BoundPsi<'_> {
    fn psi(&self, g: &mut Graph<f64>, s: Var, a: Var, z: Var) -> Result<Var, TensorError> {
        let x = g.concat(&[s, a, z])?;
        self.net.forward(g, &self.bound, x)
    }
}

impl SuccessorModel {
    pub fn new(latent_dim: usize, cfg: &SuccessorConfig, rng: &mut RngStream) -> Self {
        let d = cfg.feature_dim;
        let phi_spec = MlpSpec::new(latent_dim, &cfg.phi_hidden, d, cfg.activation).layernorm_tanh_first();
        let phi = [
            Mlp::new(phi_spec.clone(), &mut rng.split_named("phi1")),
            Mlp::new(phi_spec, &mut rng.split_named("phi2")),
        ];
        let psi = Mlp::new(
            MlpSpec::new(latent_dim + ACTION_DIM + d, &cfg.psi_hidden, d, cfg.activation),
            &mut rng.split_named("psi"),
        );
        Self {
            phi_target: phi.clone(),
            phi,
            psi_target: psi.clone(),
            psi,
            feature_norm: FeatureNorm::new(d, cfg.feature_norm),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.psi.spec().output
    }

    /// Basic features used by successor features and skill inference.
    pub fn basic_features(&self, s: &Tensor<f64>) -> Result<Tensor<f64>, TensorError> {
        self.feature_norm.apply(self.phi[0].eval(s)?)
    }

    pub fn bind_psi(&self, g: &mut Graph<f64>, trainable: bool) -> BoundPsi<'_> {
        BoundPsi {
            net: &self.psi,
            bound: self.psi.bind(g, trainable),
        }
    }

    pub fn bind_psi_target(&self, g: &mut Graph<f64>) -> BoundPsi<'_> {
        BoundPsi {
            net: &self.psi_target,
            bound: self.psi_target.bind(g, false),
        }
    }

    /// `psi(s, a, z)` outside any training graph.
    pub fn eval_psi(&self, s: &Tensor<f64>, a: &Tensor<f64>, z: &Tensor<f64>, target: bool) -> Result<Tensor<f64>, TensorError> {
        let mut g = Graph::new();
        let b = if target { self.bind_psi_target(&mut g) } else { self.bind_psi(&mut g, false) };
        let (si, ai, zi) = (g.constant(s.clone()), g.constant(a.clone()), g.constant(z.clone()));
        let y = b.psi(&mut g, si, ai, zi)?;
        Ok(g.value(y).clone())
    }

    /// `Q = psi(s, a, z)^T z`, one per row.
    pub fn q_values(&self, s: &Tensor<f64>, a: &Tensor<f64>, z: &Tensor<f64>) -> Result<Vec<f64>, TensorError> {
        let psi = self.eval_psi(s, a, z, false)?;
        Ok((0..psi.rows())
            .map(|i| psi.row(i).iter().zip(z.row(i)).map(|(p, q)| p * q).sum())
            .collect())
    }

    /// `V'_i(s, g)` from each target head.
    pub fn target_value(&self, s: &Tensor<f64>, goal: &Tensor<f64>) -> Result<[Tensor<f64>; 2], TensorError> {
        let head = |net: &Mlp<f64>| -> Result<Tensor<f64>, TensorError> {
            let a = net.eval(s)?;
            let b = net.eval(goal)?;
            let v: Vec<f64> = (0..a.rows())
                .map(|i| -a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
                .collect();
            Tensor::new(vec![v.len(), 1], v)
        };
        Ok([head(&self.phi_target[0])?, head(&self.phi_target[1])?])
    }

    pub fn trainable_params(&self) -> impl Iterator<Item = &Tensor<f64>> {
        self.phi[0]
            .params()
            .iter()
            .chain(self.phi[1].params())
            .chain(self.psi.params())
    }

    pub fn trainable_params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f64>> {
        let [a, b] = &mut self.phi;
        a.params_mut()
            .iter_mut()
            .chain(b.params_mut().iter_mut())
            .chain(self.psi.params_mut().iter_mut())
    }

    /// EMA of every target network towards its online twin.
    pub fn update_targets(&mut self, tau: f64) -> Result<(), TensorError> {
        for i in 0..2 {
            ema_update(self.phi_target[i].params_mut().iter_mut(), self.phi[i].params(), tau)?;
        }
        ema_update(self.psi_target.params_mut().iter_mut(), self.psi.params(), tau)
    }

    pub fn checksum(&self) -> u64 {
        crate::nn::checksum(
            self.trainable_params()
                .chain(self.phi_target[0].params())
                .chain(self.phi_target[1].params())
                .chain(self.psi_target.params())
                .chain([&self.feature_norm.mean, &self.feature_norm.state]),
        )
    }

    pub fn export(&self, ck: &mut Checkpoint<f64>) {
        self.phi[0].export("phi1", ck);
        self.phi[1].export("phi2", ck);
        self.phi_target[0].export("phi1_target", ck);
        self.phi_target[1].export("phi2_target", ck);
        self.psi.export("psi", ck);
        self.psi_target.export("psi_target", ck);
        ck.insert("phi_norm.mean".into(), self.feature_norm.mean.clone());
        ck.insert("phi_norm.state".into(), self.feature_norm.state.clone());
    }

    pub fn import(&mut self, ck: &Checkpoint<f64>) -> Result<(), String> {
        self.phi[0].import("phi1", ck)?;
        self.phi[1].import("phi2", ck)?;
        self.phi_target[0].import("phi1_target", ck)?;
        self.phi_target[1].import("phi2_target", ck)?;
        self.psi.import("psi", ck)?;
        self.psi_target.import("psi_target", ck)?;
        let norm = &mut self.feature_norm;
        for (key, slot) in [("phi_norm.mean", &mut norm.mean), ("phi_norm.state", &mut norm.state)] {
            let t = ck.get(key).ok_or_else(|| format!("missing tensor `{key}`"))?;
            if t.shape() != slot.shape() {
                return Err(format!("tensor `{key}` has shape {:?}, expected {:?}", t.shape(), slot.shape()));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

/// Latents and actions for one successor step. All latents come from the
/// (frozen) encoder.
pub struct SuccessorBatch<'a> {
    pub s: &'a Tensor<f64>,
    pub s_next: &'a Tensor<f64>,
    pub goal: &'a Tensor<f64>,
    pub actions: &'a Tensor<f64>,
    /// `a'` at `s'`, drawn from the current policy.
    pub next_actions: &'a Tensor<f64>,
    pub skills: &'a Tensor<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SuccessorLossValues {
    pub hilp: f64,
    pub psi: f64,
    pub reached_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuccessorLearner {
    pub model: SuccessorModel,
    pub adam: Adam<f64>,
    pub cfg: SuccessorConfig,
    pub gamma: f64,
}

impl SuccessorLearner {
    pub fn new(model: SuccessorModel, cfg: SuccessorConfig, adam: AdamConfig, gamma: f64) -> Self {
        let adam = Adam::new(adam, model.trainable_params());
        Self { model, adam, cfg, gamma }
    }

    /// Goal-reached indicators, judged in latent space on the current state.
    pub fn reached(&self, s: &Tensor<f64>, goal: &Tensor<f64>) -> Vec<f64> {
        (0..s.rows())
            .map(|i| {
                let d = s
                    .row(i)
                    .iter()
                    .zip(goal.row(i))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if d < self.cfg.goal_threshold {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// `L_nu + L_psi` and gradients for `(phi1, phi2, psi)`.
    pub fn loss_and_grads(&self, batch: &SuccessorBatch) -> Result<(SuccessorLossValues, Vec<Tensor<f64>>), TrainError> {
        let phi_next_raw = self.model.phi[0].eval(batch.s_next)?;
        self.loss_and_grads_with(batch, &phi_next_raw)
    }

    fn loss_and_grads_with(&self, batch: &SuccessorBatch, phi_next_raw: &Tensor<f64>) -> Result<(SuccessorLossValues, Vec<Tensor<f64>>), TrainError> {
        let m = &self.model;
        let reached = self.reached(batch.s, batch.goal);
        let v_next = m.target_value(batch.s_next, batch.goal)?;
        let phi_next = m.feature_norm.apply(phi_next_raw.clone())?;
        let psi_bar = m.eval_psi(batch.s_next, batch.next_actions, batch.skills, true)?;

        let mut g = Graph::new();
        let b1 = m.phi[0].bind(&mut g, true);
        let b2 = m.phi[1].bind(&mut g, true);
        let bpsi = m.bind_psi(&mut g, true);
        let s = g.constant(batch.s.clone());
        let goal = g.constant(batch.goal.clone());
        let mut values = [s; 2];
        for (k, (net, b)) in m.phi.iter().zip([&b1, &b2]).enumerate() {
            let ps = net.forward(&mut g, b, s)?;
            let pg = net.forward(&mut g, b, goal)?;
            values[k] = hilp_value(&mut g, ps, pg)?;
        }
        let l_nu = hilp_loss(&mut g, values, &v_next, &reached, self.gamma, self.cfg.hilp_target)?;
        let a = g.constant(batch.actions.clone());
        let z = g.constant(batch.skills.clone());
        let psi = bpsi.psi(&mut g, s, a, z)?;
        let l_psi = successor_loss(&mut g, psi, &phi_next, &psi_bar, self.gamma)?;
        let vals = SuccessorLossValues {
            hilp: g.value(l_nu).item(),
            psi: g.value(l_psi).item(),
            reached_fraction: reached.iter().sum::<f64>() / reached.len().max(1) as f64,
        };
        if !(vals.hilp.is_finite() && vals.psi.is_finite()) {
            return Err(TrainError::NonFinite {
                what: "successor loss".into(),
                detail: format!("{vals:?}"),
            });
        }
        let total = g.add(l_nu, l_psi)?;
        let grads = g.backward(total)?;
        let mut all = b1.grads(&grads, &m.phi[0]);
        all.extend(b2.grads(&grads, &m.phi[1]));
        all.extend(bpsi.bound.grads(&grads, &m.psi));
        Ok((vals, all))
    }

    /// Fold `phi(s')` into the feature statistics, then take one Adam step.
    pub fn update(&mut self, batch: &SuccessorBatch) -> Result<SuccessorLossValues, TrainError> {
        let phi_next_raw = self.model.phi[0].eval(batch.s_next)?;
        self.model.feature_norm.observe(&phi_next_raw, self.cfg.feature_norm_rate)?;
        let (vals, grads) = self.loss_and_grads_with(batch, &phi_next_raw)?;
        if grads.iter().any(|t| !t.is_finite()) {
            return Err(TrainError::NonFinite {
                what: "successor gradient".into(),
                detail: format!("{vals:?}"),
            });
        }
        self.adam.step(self.model.trainable_params_mut(), &grads)?;
        Ok(vals)
    }
}
