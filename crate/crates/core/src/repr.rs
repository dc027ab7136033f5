//! Pixel encoder with forward and inverse dynamics heads, trained on clean
//! and saliency-masked observations.

use serde::{Deserialize, Serialize};

use crate::env::ACTION_DIM;
use crate::nn::{Activation, BoundMlp, Mlp, MlpSpec};
use crate::rng::RngStream;
use crate::tensor::{Adam, AdamConfig, Checkpoint, Graph, Tensor, TensorError, Var};
use crate::TrainError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReprConfig {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
}

impl Default for ReprConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            encoder_hidden: vec![256, 256],
            head_hidden: vec![128, 128],
        }
    }
}

/// Forward model `D(s, a)` and inverse model `I(s, s')` as seen by the
/// losses. Lets tests plug in closed-form heads.
pub trait DynamicsHeads {
    fn predict_next(&self, g: &mut Graph<f64>, s: Var, a: Var) -> Result<Var, TensorError>;
    fn predict_action(&self, g: &mut Graph<f64>, s: Var, s_next: Var) -> Result<Var, TensorError>;
}

/// The four dynamics losses and their weighted total, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct RepLossVars {
    pub d1: Var,
    pub i1: Var,
    pub d2: Var,
    pub i2: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RepLossValues {
    pub d1: f64,
    pub i1: f64,
    pub d2: f64,
    pub i2: f64,
    pub total: f64,
}

impl RepLossVars {
    pub fn values(&self, g: &Graph<f64>) -> RepLossValues {
        let v = |x: Var| g.value(x).item();
        RepLossValues {
            d1: v(self.d1),
            i1: v(self.i1),
            d2: v(self.d2),
            i2: v(self.i2),
            total: v(self.total),
        }
    }
}

/// Build `L_rep = L_D1 + L_I1 + beta (L_D2 + L_I2)` from latents of `o`,
/// `o_alpha` and `o'`.
///
/// The forward losses regress onto a detached `s'`; the inverse losses take
/// `s'` with its gradient, so the encoder is trained through both inputs.
pub fn rep_losses(
    g: &mut Graph<f64>,
    heads: &impl DynamicsHeads,
    s: Var,
    s_alpha: Var,
    s_next: Var,
    actions: Var,
    beta: f64,
) -> Result<RepLossVars, TrainError> {
    if !(beta >= 0.0) {
        return Err(TrainError::Config(format!("beta must be >= 0, got {beta}")));
    }
    let target = g.detach(s_next);
    let pred = heads.predict_next(g, s, actions)?;
    let d1 = g.mean_sq_dist(pred, target)?;
    let a_hat = heads.predict_action(g, s, s_next)?;
    let i1 = g.mean_sq_dist(a_hat, actions)?;
    let pred_alpha = heads.predict_next(g, s_alpha, actions)?;
    let d2 = g.mean_sq_dist(pred_alpha, target)?;
    let a_hat_alpha = heads.predict_action(g, s_alpha, s_next)?;
    let i2 = g.mean_sq_dist(a_hat_alpha, actions)?;
    let clean = g.add(d1, i1)?;
    let masked = g.add(d2, i2)?;
    let weighted = g.scale(masked, beta);
    let total = g.add(clean, weighted)?;
    Ok(RepLossVars { d1, i1, d2, i2, total })
}

/// Encoder `f`, forward model `D` and inverse model `I`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReprModel {
    pub encoder: Mlp<f64>,
    pub forward: Mlp<f64>,
    pub inverse: Mlp<f64>,
}

/// A [`ReprModel`] recorded on a graph.
pub struct BoundRepr<'a> {
    pub model: &'a ReprModel,
    pub encoder: BoundMlp,
    pub forward: BoundMlp,
    pub inverse: BoundMlp,
}

impl DynamicsHeads for BoundRepr<'_> {
    fn predict_next(&self, g: &mut Graph<f64>, s: Var, a: Var) -> Result<Var, TensorError> {
        let x = g.concat(&[s, a])?;
        self.model.forward.forward(g, &self.forward, x)
    }

    fn predict_action(&self, g: &mut Graph<f64>, s: Var, s_next: Var) -> Result<Var, TensorError> {
        let x = g.concat(&[s, s_next])?;
        self.model.inverse.forward(g, &self.inverse, x)
    }
}

impl BoundRepr<'_> {
    pub fn encode(&self, g: &mut Graph<f64>, obs: Var) -> Result<Var, TensorError> {
        self.model.encoder.forward(g, &self.encoder, obs)
    }
}

impl ReprModel {
    /// Encoder: tanh hidden layers and an affine layer norm on the latent.
    /// Heads: ReLU MLPs; the inverse head ends in tanh.
    pub fn new(obs_dim: usize, cfg: &ReprConfig, rng: &mut RngStream) -> Self {
        let m = cfg.latent_dim;
        let encoder = Mlp::new(
            MlpSpec::new(obs_dim, &cfg.encoder_hidden, m, Activation::Tanh).output_layernorm(),
            &mut rng.split_named("encoder"),
        );
        let forward = Mlp::new(
            MlpSpec::new(m + ACTION_DIM, &cfg.head_hidden, m, Activation::Relu),
            &mut rng.split_named("forward"),
        );
        let inverse = Mlp::new(
            MlpSpec::new(2 * m, &cfg.head_hidden, ACTION_DIM, Activation::Relu).output_tanh(),
            &mut rng.split_named("inverse"),
        );
        Self { encoder, forward, inverse }
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.spec().output
    }

    pub fn bind(&self, g: &mut Graph<f64>, trainable: bool) -> BoundRepr<'_> {
        BoundRepr {
            model: self,
            encoder: self.encoder.bind(g, trainable),
            forward: self.forward.bind(g, trainable),
            inverse: self.inverse.bind(g, trainable),
        }
    }

    /// Latents for a batch of observations, outside any training graph.
    pub fn encode(&self, obs: &Tensor<f64>) -> Result<Tensor<f64>, TensorError> {
        self.encoder.eval(obs)
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<f64>> {
        self.encoder
            .params()
            .iter()
            .chain(self.forward.params())
            .chain(self.inverse.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f64>> {
        self.encoder
            .params_mut()
            .iter_mut()
            .chain(self.forward.params_mut().iter_mut())
            .chain(self.inverse.params_mut().iter_mut())
    }

    pub fn encoder_checksum(&self) -> u64 {
        self.encoder.checksum()
    }

    pub fn checksum(&self) -> u64 {
        crate::nn::checksum(self.params())
    }

    pub fn export(&self, ck: &mut Checkpoint<f64>) {
        self.encoder.export("encoder", ck);
        self.forward.export("forward_model", ck);
        self.inverse.export("inverse_model", ck);
    }

    pub fn import(&mut self, ck: &Checkpoint<f64>) -> Result<(), String> {
        self.encoder.import("encoder", ck)?;
        self.forward.import("forward_model", ck)?;
        self.inverse.import("inverse_model", ck)
    }
}

/// Observations and actions for one representation step.
pub struct RepBatch<'a> {
    pub obs: &'a Tensor<f64>,
    pub obs_masked: &'a Tensor<f64>,
    pub next_obs: &'a Tensor<f64>,
    pub actions: &'a Tensor<f64>,
}

/// Representation model plus its optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct RepLearner {
    pub model: ReprModel,
    pub adam: Adam<f64>,
    pub beta: f64,
}

impl RepLearner {
    pub fn new(model: ReprModel, adam: AdamConfig, beta: f64) -> Self {
        let adam = Adam::new(adam, model.params());
        Self { model, adam, beta }
    }

    /// Loss values and parameter gradients, without updating anything.
    pub fn loss_and_grads(&self, batch: &RepBatch) -> Result<(RepLossValues, Vec<Tensor<f64>>), TrainError> {
        let mut g = Graph::new();
        let b = self.model.bind(&mut g, true);
        // One encoder pass over [o; o_alpha; o'].
        let rows = batch.obs.rows();
        let mut stacked = Vec::with_capacity(3 * batch.obs.len());
        for t in [batch.obs, batch.obs_masked, batch.next_obs] {
            stacked.extend_from_slice(t.data());
        }
        let all = g.constant(Tensor::new(vec![3 * rows, batch.obs.cols()], stacked)?);
        let a = g.constant(batch.actions.clone());
        let latents = b.encode(&mut g, all)?;
        let s = g.row_slice(latents, 0, rows)?;
        let sa = g.row_slice(latents, rows, rows)?;
        let sn = g.row_slice(latents, 2 * rows, rows)?;
        let losses = rep_losses(&mut g, &b, s, sa, sn, a, self.beta)?;
        let values = losses.values(&g);
        if !values.total.is_finite() {
            return Err(TrainError::NonFinite {
                what: "L_rep".into(),
                detail: format!("{values:?}"),
            });
        }
        let grads = g.backward(losses.total)?;
        let mut all = b.encoder.grads(&grads, &self.model.encoder);
        all.extend(b.forward.grads(&grads, &self.model.forward));
        all.extend(b.inverse.grads(&grads, &self.model.inverse));
        Ok((values, all))
    }

    /// One Adam step on `L_rep`.
    pub fn update(&mut self, batch: &RepBatch) -> Result<RepLossValues, TrainError> {
        let (values, grads) = self.loss_and_grads(batch)?;
        if grads.iter().any(|t| !t.is_finite()) {
            return Err(TrainError::NonFinite {
                what: "L_rep gradient".into(),
                detail: format!("{values:?}"),
            });
        }
        self.adam.step(self.model.params_mut(), &grads)?;
        Ok(values)
    }
}
