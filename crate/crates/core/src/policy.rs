//! Skill-conditioned consistency policy with classifier-free guidance.
//!
//! The denoiser `g(s, a_t, t, c)` maps a noisy action at noise level `t` back
//! to a clean action. The condition `c` is either a skill, passed through a
//! linear skill embedding, or the unconditional token: a learned embedding
//! plus a flag input set to one.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::env::ACTION_DIM;
use crate::nn::{Activation, BoundMlp, Mlp, MlpSpec};
use crate::rng::RngStream;
use crate::successor::{sample_skills, SuccessorCritic, SuccessorModel};
use crate::tensor::{ema_update, Adam, AdamConfig, Checkpoint, Graph, Tensor, TensorError, Var};
use crate::TrainError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// `n` geometrically spaced scales from `min` to `max`.
    pub fn geometric(n: usize, min: f64, max: f64) -> Result<Self, TrainError> {
        if n < 2 || !(min > 0.0 && max > min) {
            return Err(TrainError::Config(format!(
                "noise schedule needs n >= 2 and 0 < min < max (got n={n}, min={min}, max={max})"
            )));
        }
        let ratio = (max / min).powf(1.0 / (n - 1) as f64);
        let mut sigmas: Vec<f64> = (0..n).map(|i| min * ratio.powi(i as i32)).collect();
        sigmas[n - 1] = max;
        Ok(Self { sigmas })
    }

    /// Arbitrary strictly increasing nonnegative scales (tests may use 0).
    pub fn from_sigmas(sigmas: Vec<f64>) -> Result<Self, TrainError> {
        if sigmas.is_empty() || sigmas[0] < 0.0 || sigmas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(TrainError::Config("noise scales must be nonnegative and strictly increasing".into()));
        }
        Ok(Self { sigmas })
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Scale at 1-based level `t`.
    pub fn sigma(&self, t: usize) -> Result<f64, TrainError> {
        if t == 0 || t > self.sigmas.len() {
            return Err(TrainError::Config(format!("noise level {t} outside 1..={}", self.sigmas.len())));
        }
        Ok(self.sigmas[t - 1])
    }

    /// Scalar network input for level `t`, in roughly `[-1, 1]`.
    pub fn feature(&self, t: usize) -> f64 {
        let lo = self.sigmas[0].max(1e-6).ln();
        let hi = self.sigmas[self.sigmas.len() - 1].ln();
        let s = self.sigmas[t - 1].max(1e-6).ln();
        if hi > lo {
            2.0 * (s - lo) / (hi - lo) - 1.0
        } else {
            0.0
        }
    }
}

/// `a + sigma_t * eps`, unclamped.
pub fn perturb(schedule: &NoiseSchedule, action: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>, TrainError> {
    let s = schedule.sigma(t)?;
    Ok(action.iter().zip(eps).map(|(a, e)| a + s * e).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub noise_levels: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub omega: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub explore_std: f64,
    pub explore_clip: f64,
    /// Use a layer norm and tanh after the first linear layer.
    pub layernorm_first: bool,
    pub activation: Activation,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            noise_levels: 8,
            sigma_min: 0.01,
            sigma_max: 1.0,
            omega: 3.0,
            lambda1: 0.2,
            lambda2: 0.2,
            explore_std: 0.2,
            explore_clip: 0.3,
            layernorm_first: true,
            activation: Activation::Relu,
        }
    }
}

/// Denoiser condition.
#[derive(Clone, Copy, Debug)]
pub enum Condition {
    Skill(Var),
    Unconditional,
}

/// A denoiser as seen by the consistency losses.
pub trait DenoiserFn {
    /// `level` is a `[B, 1]` column of noise-level features.
    fn denoise(&self, g: &mut Graph<f64>, s: Var, a_t: Var, level: Var, cond: Condition) -> Result<Var, TensorError>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub net: Mlp<f64>,
    pub skill_embed: Mlp<f64>,
    pub null_embedding: Tensor<f64>,
}

pub struct BoundDenoiser<'a> {
    pub model: &'a Denoiser,
    pub net: BoundMlp,
    pub skill_embed: BoundMlp,
    pub null_embedding: Var,
    trainable: bool,
}

impl DenoiserFn for BoundDenoiser<'_> {
    fn denoise(&self, g: &mut Graph<f64>, s: Var, a_t: Var, level: Var, cond: Condition) -> Result<Var, TensorError> {
        let rows = g.shape(s)[0];
        let (emb, flag) = match cond {
            Condition::Skill(z) => {
                let e = self.model.skill_embed.forward(g, &self.skill_embed, z)?;
                (e, 0.0)
            }
            Condition::Unconditional => {
                let ones = g.constant(Tensor::full(&[rows, 1], 1.0));
                (g.matmul(ones, self.null_embedding)?, 1.0)
            }
        };
        let flag = g.constant(Tensor::full(&[rows, 1], flag));
        let x = g.concat(&[s, a_t, level, emb, flag])?;
        self.model.net.forward(g, &self.net, x)
    }
}

impl BoundDenoiser<'_> {
    /// Gradients aligned with [`Denoiser::params`].
    pub fn grads(&self, grads: &crate::tensor::Gradients<f64>) -> Vec<Tensor<f64>> {
        let mut out = self.net.grads(grads, &self.model.net);
        out.extend(self.skill_embed.grads(grads, &self.model.skill_embed));
        out.push(if self.trainable {
            grads.get(self.null_embedding).clone()
        } else {
            Tensor::zeros(self.model.null_embedding.shape())
        });
        out
    }
}

impl Denoiser {
    pub fn new(latent_dim: usize, skill_dim: usize, cfg: &PolicyConfig, rng: &mut RngStream) -> Self {
        let mut spec = MlpSpec::new(latent_dim + ACTION_DIM + 1 + skill_dim + 1, &cfg.hidden, ACTION_DIM, cfg.activation).output_tanh();
        if cfg.layernorm_first {
            spec = spec.layernorm_tanh_first();
        }
        let net = Mlp::new(spec, &mut rng.split_named("denoiser"));
        let skill_embed = Mlp::new(
            MlpSpec::new(skill_dim, &[], skill_dim, Activation::Tanh),
            &mut rng.split_named("skill_embed"),
        );
        let mut nr = rng.split_named("null");
        let null_embedding = Tensor::new(vec![1, skill_dim], (0..skill_dim).map(|_| 0.1 * nr.normal()).collect()).unwrap();
        Self {
            net,
            skill_embed,
            null_embedding,
        }
    }

    pub fn bind(&self, g: &mut Graph<f64>, trainable: bool) -> BoundDenoiser<'_> {
        let null_embedding = if trainable {
            g.leaf(self.null_embedding.clone())
        } else {
            g.constant(self.null_embedding.clone())
        };
        BoundDenoiser {
            model: self,
            net: self.net.bind(g, trainable),
            skill_embed: self.skill_embed.bind(g, trainable),
            null_embedding,
            trainable,
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<f64>> {
        self.net
            .params()
            .iter()
            .chain(self.skill_embed.params())
            .chain(std::iter::once(&self.null_embedding))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f64>> {
        self.net
            .params_mut()
            .iter_mut()
            .chain(self.skill_embed.params_mut().iter_mut())
            .chain(std::iter::once(&mut self.null_embedding))
    }

    /// Batched denoiser output outside any training graph. `z = None`
    /// selects the unconditional branch.
    pub fn eval(&self, s: &Tensor<f64>, a_t: &Tensor<f64>, level: &Tensor<f64>, z: Option<&Tensor<f64>>) -> Result<Tensor<f64>, TensorError> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let (si, ai, li) = (g.constant(s.clone()), g.constant(a_t.clone()), g.constant(level.clone()));
        let cond = match z {
            Some(z) => Condition::Skill(g.constant(z.clone())),
            None => Condition::Unconditional,
        };
        let y = b.denoise(&mut g, si, ai, li, cond)?;
        Ok(g.value(y).clone())
    }

    pub fn export(&self, prefix: &str, ck: &mut Checkpoint<f64>) {
        self.net.export(&format!("{prefix}.net"), ck);
        self.skill_embed.export(&format!("{prefix}.skill_embed"), ck);
        ck.insert(format!("{prefix}.null_embedding"), self.null_embedding.clone());
    }

    pub fn import(&mut self, prefix: &str, ck: &Checkpoint<f64>) -> Result<(), String> {
        self.net.import(&format!("{prefix}.net"), ck)?;
        self.skill_embed.import(&format!("{prefix}.skill_embed"), ck)?;
        let key = format!("{prefix}.null_embedding");
        let t = ck.get(&key).ok_or_else(|| format!("checkpoint lacks `{key}`"))?;
        if t.shape() != self.null_embedding.shape() {
            return Err(format!("`{key}` has the wrong shape"));
        }
        self.null_embedding = t.clone();
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    /// Random `a_N` and clipped Gaussian exploration noise.
    Train,
    /// `a_N = 0` and no exploration noise: a pure function of `(s, z)`.
    Eval,
}

/// Counts of denoiser evaluations made while synthesizing actions.
#[derive(Debug, Default)]
pub struct EvalCounter {
    conditioned: AtomicU64,
    unconditional: AtomicU64,
}

impl EvalCounter {
    pub fn conditioned(&self) -> u64 {
        self.conditioned.load(Ordering::Relaxed)
    }

    pub fn unconditional(&self) -> u64 {
        self.unconditional.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.conditioned.store(0, Ordering::Relaxed);
        self.unconditional.store(0, Ordering::Relaxed);
    }
}

impl Clone for EvalCounter {
    fn clone(&self) -> Self {
        Self::default()
    }
}

impl PartialEq for EvalCounter {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

/// `clamp(g_null + omega (g_z - g_null), -1, 1)`, rowwise. Evaluated as
/// `(1 - omega) g_null + omega g_z` so that omega = 0 and omega = 1 return
/// the unconditional and conditioned outputs bit for bit.
pub fn guide(g_cond: &Tensor<f64>, g_uncond: &Tensor<f64>, omega: f64) -> Tensor<f64> {
    let data = g_cond
        .data()
        .iter()
        .zip(g_uncond.data())
        .map(|(&c, &u)| ((1.0 - omega) * u + omega * c).clamp(-1.0, 1.0))
        .collect();
    Tensor::new(g_cond.shape().to_vec(), data).unwrap()
}

/// Online denoiser, its EMA target and the noise schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyPolicy {
    pub online: Denoiser,
    pub target: Denoiser,
    pub schedule: NoiseSchedule,
    pub counter: EvalCounter,
}

impl ConsistencyPolicy {
    pub fn new(latent_dim: usize, skill_dim: usize, cfg: &PolicyConfig, rng: &mut RngStream) -> Result<Self, TrainError> {
        let online = Denoiser::new(latent_dim, skill_dim, cfg, rng);
        Ok(Self {
            target: online.clone(),
            online,
            schedule: NoiseSchedule::geometric(cfg.noise_levels, cfg.sigma_min, cfg.sigma_max)?,
            counter: EvalCounter::default(),
        })
    }

    fn level_column(&self, rows: usize, t: usize) -> Tensor<f64> {
        Tensor::full(&[rows, 1], self.schedule.feature(t))
    }

    /// Guided action from the online denoiser at level `t`: one conditioned
    /// and one unconditional evaluation.
    pub fn cfg_action(&self, s: &Tensor<f64>, a_t: &Tensor<f64>, t: usize, z: &Tensor<f64>, omega: f64) -> Result<Tensor<f64>, TrainError> {
        self.schedule.sigma(t)?;
        let level = self.level_column(s.rows(), t);
        let gc = self.online.eval(s, a_t, &level, Some(z))?;
        self.counter.conditioned.fetch_add(1, Ordering::Relaxed);
        let gu = self.online.eval(s, a_t, &level, None)?;
        self.counter.unconditional.fetch_add(1, Ordering::Relaxed);
        Ok(guide(&gc, &gu, omega))
    }

    /// Single-step action synthesis from `a_N` at the top noise level.
    pub fn act(
        &self,
        s: &Tensor<f64>,
        z: &Tensor<f64>,
        omega: f64,
        mode: ActMode,
        rng: Option<&mut RngStream>,
        cfg: &PolicyConfig,
    ) -> Result<Tensor<f64>, TrainError> {
        let rows = s.rows();
        let n = self.schedule.len();
        let sigma_n = self.schedule.sigma(n)?;
        match mode {
            ActMode::Eval => self.cfg_action(s, &Tensor::zeros(&[rows, ACTION_DIM]), n, z, omega),
            ActMode::Train => {
                let rng = rng.ok_or_else(|| TrainError::Config("train-mode act needs an rng".into()))?;
                let a_n = Tensor::new(
                    vec![rows, ACTION_DIM],
                    (0..rows * ACTION_DIM).map(|_| sigma_n * rng.normal()).collect(),
                )?;
                let a = self.cfg_action(s, &a_n, n, z, omega)?;
                let data = a
                    .data()
                    .iter()
                    .map(|v| {
                        let noise = (cfg.explore_std * rng.normal()).clamp(-cfg.explore_clip, cfg.explore_clip);
                        (v + noise).clamp(-1.0, 1.0)
                    })
                    .collect();
                Ok(Tensor::new(vec![rows, ACTION_DIM], data)?)
            }
        }
    }

    /// Target policy's conditioned output at the top level, for the
    /// random-skill behavior in the unconditional consistency loss.
    pub fn target_action(&self, s: &Tensor<f64>, a_n: &Tensor<f64>, z: &Tensor<f64>) -> Result<Tensor<f64>, TensorError> {
        let level = self.level_column(s.rows(), self.schedule.len());
        self.target.eval(s, a_n, &level, Some(z))
    }

    pub fn update_target(&mut self, tau: f64) -> Result<(), TensorError> {
        let online: Vec<&Tensor<f64>> = self.online.params().collect();
        ema_update(self.target.params_mut(), online, tau)
    }

    pub fn checksum(&self) -> u64 {
        crate::nn::checksum(self.online.params().chain(self.target.params()))
    }

    pub fn export(&self, ck: &mut Checkpoint<f64>) {
        self.online.export("policy", ck);
        self.target.export("policy_target", ck);
    }

    pub fn import(&mut self, ck: &Checkpoint<f64>) -> Result<(), String> {
        self.online.import("policy", ck)?;
        self.target.import("policy_target", ck)
    }
}

/// `-E[psi(s, g(s, a_N, N, z), z)^T z]`.
pub fn q_loss(
    g: &mut Graph<f64>,
    policy: &impl DenoiserFn,
    critic: &(impl SuccessorCritic + ?Sized),
    s: Var,
    a_n: Var,
    level_n: Var,
    z: Var,
) -> Result<Var, TensorError> {
    let a = policy.denoise(g, s, a_n, level_n, Condition::Skill(z))?;
    let psi = critic.psi(g, s, a, z)?;
    let q = g.row_dot(psi, z)?;
    let m = g.mean(q);
    Ok(g.neg(m))
}

/// Noise draws for one pair of consistency points per example.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyDraws {
    /// Lower and higher 1-based levels per row (`lo < hi`).
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    /// Shared perturbation direction, `[B, 2]`.
    pub eps: Tensor<f64>,
}

impl ConsistencyDraws {
    pub fn sample(rows: usize, n_levels: usize, rng: &mut RngStream) -> Self {
        let mut lo = Vec::with_capacity(rows);
        let mut hi = Vec::with_capacity(rows);
        for _ in 0..rows {
            let a = 1 + rng.index(n_levels);
            let mut b = 1 + rng.index(n_levels - 1);
            if b >= a {
                b += 1;
            }
            lo.push(a.min(b));
            hi.push(a.max(b));
        }
        let eps = Tensor::new(vec![rows, ACTION_DIM], (0..rows * ACTION_DIM).map(|_| rng.normal()).collect()).unwrap();
        Self { lo, hi, eps }
    }
}

/// `E ||g(s, a_hi, hi, c) - sg(anchor(s, a_lo, lo, c))||^2` with both noisy
/// actions on the same ray `a + sigma * eps`.
#[allow(clippy::too_many_arguments)]
pub fn consistency_loss(
    g: &mut Graph<f64>,
    online: &impl DenoiserFn,
    anchor: &impl DenoiserFn,
    schedule: &NoiseSchedule,
    s: Var,
    clean: &Tensor<f64>,
    draws: &ConsistencyDraws,
    cond: Condition,
) -> Result<Var, TrainError> {
    let rows = clean.rows();
    let mut a_lo = Vec::with_capacity(rows * ACTION_DIM);
    let mut a_hi = Vec::with_capacity(rows * ACTION_DIM);
    let mut f_lo = Vec::with_capacity(rows);
    let mut f_hi = Vec::with_capacity(rows);
    for i in 0..rows {
        let (sl, sh) = (schedule.sigma(draws.lo[i])?, schedule.sigma(draws.hi[i])?);
        for (a, e) in clean.row(i).iter().zip(draws.eps.row(i)) {
            a_lo.push(a + sl * e);
            a_hi.push(a + sh * e);
        }
        f_lo.push(schedule.feature(draws.lo[i]));
        f_hi.push(schedule.feature(draws.hi[i]));
    }
    let a_lo = g.constant(Tensor::new(vec![rows, ACTION_DIM], a_lo)?);
    let a_hi = g.constant(Tensor::new(vec![rows, ACTION_DIM], a_hi)?);
    let f_lo = g.constant(Tensor::new(vec![rows, 1], f_lo)?);
    let f_hi = g.constant(Tensor::new(vec![rows, 1], f_hi)?);
    let pred = online.denoise(g, s, a_hi, f_hi, cond)?;
    let anchor_out = anchor.denoise(g, s, a_lo, f_lo, cond)?;
    let anchor_out = g.detach(anchor_out);
    Ok(g.mean_sq_dist(pred, anchor_out)?)
}

/// Everything random in one policy update, drawn up front so that the
/// update is a deterministic function of these draws.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyDraws {
    pub a_n: Tensor<f64>,
    pub bc1: ConsistencyDraws,
    pub bc2: ConsistencyDraws,
    /// Random skills for the unconditional-branch behavior.
    pub z_prime: Tensor<f64>,
    pub a_n_prime: Tensor<f64>,
}

impl PolicyDraws {
    pub fn sample(rows: usize, skill_dim: usize, schedule: &NoiseSchedule, rng: &mut RngStream) -> Result<Self, TrainError> {
        let sigma_n = schedule.sigma(schedule.len())?;
        let noise = |rng: &mut RngStream| {
            Tensor::new(vec![rows, ACTION_DIM], (0..rows * ACTION_DIM).map(|_| sigma_n * rng.normal()).collect()).unwrap()
        };
        let a_n = noise(rng);
        let bc1 = ConsistencyDraws::sample(rows, schedule.len(), rng);
        let bc2 = ConsistencyDraws::sample(rows, schedule.len(), rng);
        let z_prime = sample_skills(rows, skill_dim, rng);
        let a_n_prime = noise(rng);
        Ok(Self {
            a_n,
            bc1,
            bc2,
            z_prime,
            a_n_prime,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PolicyLossValues {
    pub q: f64,
    pub bc1: f64,
    pub bc2: f64,
    pub total: f64,
}

/// Which loss terms enter the objective (all by default).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyTerms {
    pub q: bool,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Latents, dataset actions and skills for one policy step.
pub struct PolicyBatch<'a> {
    pub s: &'a Tensor<f64>,
    pub actions: &'a Tensor<f64>,
    pub skills: &'a Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyLearner {
    pub policy: ConsistencyPolicy,
    pub adam: Adam<f64>,
    pub cfg: PolicyConfig,
}

impl PolicyLearner {
    pub fn new(policy: ConsistencyPolicy, cfg: PolicyConfig, adam: AdamConfig) -> Self {
        let adam = Adam::new(adam, policy.online.params());
        Self { policy, adam, cfg }
    }

    pub fn terms(&self) -> PolicyTerms {
        PolicyTerms {
            q: true,
            lambda1: self.cfg.lambda1,
            lambda2: self.cfg.lambda2,
        }
    }

    /// `L_Q + lambda1 L_bc1 + lambda2 L_bc2` and gradients for the online
    /// denoiser. The critic is frozen.
    pub fn loss_and_grads(
        &self,
        batch: &PolicyBatch,
        critic: &SuccessorModel,
        draws: &PolicyDraws,
        terms: PolicyTerms,
    ) -> Result<(PolicyLossValues, Vec<Tensor<f64>>), TrainError> {
        if !(terms.lambda1 >= 0.0 && terms.lambda2 >= 0.0) {
            return Err(TrainError::Config("policy lambdas must be >= 0".into()));
        }
        let p = &self.policy;
        let rows = batch.s.rows();
        let behavior = p.target_action(batch.s, &draws.a_n_prime, &draws.z_prime)?;

        let mut g = Graph::new();
        let online = p.online.bind(&mut g, true);
        let anchor = p.target.bind(&mut g, false);
        let psi = critic.bind_psi(&mut g, false);
        let s = g.constant(batch.s.clone());
        let z = g.constant(batch.skills.clone());
        let a_n = g.constant(draws.a_n.clone());
        let level_n = g.constant(p.level_column(rows, p.schedule.len()));
        let lq = q_loss(&mut g, &online, &psi, s, a_n, level_n, z)?;
        let l1 = consistency_loss(&mut g, &online, &anchor, &p.schedule, s, batch.actions, &draws.bc1, Condition::Skill(z))?;
        let l2 = consistency_loss(&mut g, &online, &anchor, &p.schedule, s, &behavior, &draws.bc2, Condition::Unconditional)?;
        let vq = g.value(lq).item();
        let v1 = g.value(l1).item();
        let v2 = g.value(l2).item();
        let wq = g.scale(lq, if terms.q { 1.0 } else { 0.0 });
        let w1 = g.scale(l1, terms.lambda1);
        let w2 = g.scale(l2, terms.lambda2);
        let t = g.add(wq, w1)?;
        let total = g.add(t, w2)?;
        let values = PolicyLossValues {
            q: vq,
            bc1: v1,
            bc2: v2,
            total: g.value(total).item(),
        };
        if !values.total.is_finite() {
            return Err(TrainError::NonFinite {
                what: "policy loss".into(),
                detail: format!("{values:?}"),
            });
        }
        let grads = g.backward(total)?;
        Ok((values, online.grads(&grads)))
    }

    /// One Adam step on the online denoiser. The target is left alone.
    pub fn update(&mut self, batch: &PolicyBatch, critic: &SuccessorModel, draws: &PolicyDraws) -> Result<PolicyLossValues, TrainError> {
        let (values, grads) = self.loss_and_grads(batch, critic, draws, self.terms())?;
        if grads.iter().any(|t| !t.is_finite()) {
            return Err(TrainError::NonFinite {
                what: "policy gradient".into(),
                detail: format!("{values:?}"),
            });
        }
        self.adam.step(self.policy.online.params_mut(), &grads)?;
        Ok(values)
    }
}
