//! Top-k input-gradient saliency masks.

use std::io::{self, Write};

use crate::env::CHANNELS;
use crate::repr::ReprModel;
use crate::successor::{SuccessorCritic, SuccessorModel};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::TrainError;

/// A scalar action value whose gradient with respect to the observation
/// drives the mask. Implementations must record parameters as constants.
pub trait SaliencyQ {
    /// `[B, P]` observations to a `[B, 1]` column of values.
    fn q(&self, g: &mut Graph<f64>, obs: Var, actions: Var, skills: Var) -> Result<Var, TensorError>;
}

/// `Q = psi(f(o), a, z)^T z` with the online encoder and successor network.
pub struct SrcpQ<'a> {
    pub repr: &'a ReprModel,
    pub successor: &'a SuccessorModel,
}

impl SaliencyQ for SrcpQ<'_> {
    fn q(&self, g: &mut Graph<f64>, obs: Var, actions: Var, skills: Var) -> Result<Var, TensorError> {
        let enc = self.repr.encoder.bind(g, false);
        let s = self.repr.encoder.forward(g, &enc, obs)?;
        let psi = self.successor.bind_psi(g, false);
        let out = psi.psi(g, s, actions, skills)?;
        g.row_dot(out, skills)
    }
}

/// Where a mask came from.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSource {
    pub observation: usize,
    pub skill: Vec<f64>,
    pub action: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMask {
    /// One 0/1 entry per observation value, same layout as observations.
    pub mask: Vec<f64>,
    pub k_frac: f64,
    pub source: Option<MaskSource>,
}

impl SaliencyMask {
    pub fn retained(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.0).count()
    }

    pub fn retained_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i] > 0.0).collect()
    }
}

/// Number of retained entries for `k_frac` of `p` values.
pub fn retained_count(k_frac: f64, p: usize) -> Result<usize, TrainError> {
    if !(k_frac > 0.0 && k_frac <= 1.0) {
        return Err(TrainError::Config(format!("k_frac must lie in (0, 1], got {k_frac}")));
    }
    Ok(((k_frac * p as f64).ceil() as usize).clamp(1, p))
}

/// `|dQ/do|` for every row of the batch. Rows do not interact, so one
/// backward pass through the summed values gives every per-row gradient.
pub fn input_gradients(
    model: &impl SaliencyQ,
    obs: &Tensor<f64>,
    actions: &Tensor<f64>,
    skills: &Tensor<f64>,
) -> Result<Tensor<f64>, TrainError> {
    let mut g = Graph::new();
    let o = g.leaf(obs.clone());
    let a = g.constant(actions.clone());
    let z = g.constant(skills.clone());
    let q = model.q(&mut g, o, a, z)?;
    let total = g.sum(q);
    let grads = g.backward(total)?;
    Ok(grads.get(o).map(f64::abs))
}

/// Indicator of the `ceil(k_frac * P)` largest scores, ties to the lowest
/// flat index.
pub fn top_k_mask(scores: &[f64], k_frac: f64) -> Result<Vec<f64>, TrainError> {
    let k = retained_count(k_frac, scores.len())?;
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(TrainError::NonFinite {
            what: "saliency gradient".into(),
            detail: format!("pixel index {i} has score {}", scores[i]),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // The comparator is a total order, so selection is deterministic.
    let by_score = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, by_score);
    }
    let mut mask = vec![0.0; scores.len()];
    for &i in &order[..k] {
        mask[i] = 1.0;
    }
    Ok(mask)
}

/// Mask for a single observation.
pub fn compute_saliency(
    model: &impl SaliencyQ,
    observation: &[f64],
    action: [f64; 2],
    skill: &[f64],
    k_frac: f64,
) -> Result<SaliencyMask, TrainError> {
    let p = observation.len();
    let obs = Tensor::new(vec![1, p], observation.to_vec())?;
    let a = Tensor::new(vec![1, 2], action.to_vec())?;
    let z = Tensor::new(vec![1, skill.len()], skill.to_vec())?;
    let scores = input_gradients(model, &obs, &a, &z)?;
    Ok(SaliencyMask {
        mask: top_k_mask(scores.data(), k_frac)?,
        k_frac,
        source: Some(MaskSource {
            observation: 0,
            skill: skill.to_vec(),
            action,
        }),
    })
}

/// Per-row masks for a batch, in row order.
pub fn compute_saliency_batch(
    model: &impl SaliencyQ,
    obs: &Tensor<f64>,
    actions: &Tensor<f64>,
    skills: &Tensor<f64>,
    k_frac: f64,
) -> Result<Vec<SaliencyMask>, TrainError> {
    let scores = input_gradients(model, obs, actions, skills)?;
    (0..obs.rows())
        .map(|i| {
            Ok(SaliencyMask {
                mask: top_k_mask(scores.row(i), k_frac)?,
                k_frac,
                source: Some(MaskSource {
                    observation: i,
                    skill: skills.row(i).to_vec(),
                    action: [actions.row(i)[0], actions.row(i)[1]],
                }),
            })
        })
        .collect()
}

/// Elementwise product `o * mask`.
pub fn apply_mask(observation: &[f64], mask: &SaliencyMask) -> Result<Vec<f64>, TrainError> {
    if observation.len() != mask.mask.len() {
        return Err(TrainError::Tensor(TensorError::ShapeMismatch {
            op: "apply_mask",
            lhs: vec![observation.len()],
            rhs: vec![mask.mask.len()],
        }));
    }
    Ok(observation.iter().zip(&mask.mask).map(|(o, m)| o * m).collect())
}

/// Masked copy of a batch, one mask per row.
pub fn apply_masks(obs: &Tensor<f64>, masks: &[SaliencyMask]) -> Result<Tensor<f64>, TrainError> {
    if masks.len() != obs.rows() {
        return Err(TrainError::Tensor(TensorError::ShapeMismatch {
            op: "apply_masks",
            lhs: vec![masks.len()],
            rhs: vec![obs.rows()],
        }));
    }
    let mut data = Vec::with_capacity(obs.len());
    for (i, m) in masks.iter().enumerate() {
        data.extend(apply_mask(obs.row(i), m)?);
    }
    Ok(Tensor::new(obs.shape().to_vec(), data)?)
}

/// Fraction of retained entries that fall on the agent's footprint.
pub fn attention_mass(mask: &SaliencyMask, footprint: &[usize]) -> f64 {
    let retained = mask.retained();
    if retained == 0 {
        return 0.0;
    }
    let hits = footprint.iter().filter(|&&i| mask.mask.get(i).copied().unwrap_or(0.0) > 0.0).count();
    hits as f64 / retained as f64
}

/// Per-channel retained counts.
pub fn channel_counts(mask: &SaliencyMask) -> [usize; CHANNELS] {
    let mut out = [0; CHANNELS];
    for (i, &m) in mask.mask.iter().enumerate() {
        if m > 0.0 {
            out[i % CHANNELS] += 1;
        }
    }
    out
}

/// Binary PPM of a mask: a retained entry lights its channel.
pub fn write_mask_ppm<W: Write>(out: &mut W, mask: &SaliencyMask, grid: usize, scale: usize) -> io::Result<()> {
    crate::env::write_ppm(out, &mask.mask, grid, scale)
}
