//! Saliency mask contract on DotWorld observations.

use srcp::env::{DotWorld, EnvConfig};
use srcp::repr::{ReprConfig, ReprModel};
use srcp::rng::RngStream;
use srcp::saliency::{apply_mask, compute_saliency, compute_saliency_batch, SaliencyQ, SrcpQ};
use srcp::successor::{sample_skills, SuccessorConfig, SuccessorModel};
use srcp::tensor::{Graph, Tensor, TensorError, Var};

struct Scaled<Q>(Q, f64);

impl<Q: SaliencyQ> SaliencyQ for Scaled<Q> {
    fn q(&self, g: &mut Graph<f64>, obs: Var, actions: Var, skills: Var) -> Result<Var, TensorError> {
        let q = self.0.q(g, obs, actions, skills)?;
        Ok(g.scale(q, self.1))
    }
}

struct Linear(Tensor<f64>);

impl SaliencyQ for Linear {
    fn q(&self, g: &mut Graph<f64>, obs: Var, _: Var, _: Var) -> Result<Var, TensorError> {
        let w = g.constant(self.0.clone());
        g.matmul(obs, w)
    }
}

fn small_models(seed: u64, obs_dim: usize) -> (ReprModel, SuccessorModel) {
    let rng = RngStream::new(seed);
    let rc = ReprConfig {
        latent_dim: 8,
        encoder_hidden: vec![32],
        head_hidden: vec![16],
    };
    let sc = SuccessorConfig {
        feature_dim: 4,
        phi_hidden: vec![16],
        psi_hidden: vec![32],
        ..SuccessorConfig::default()
    };
    let repr = ReprModel::new(obs_dim, &rc, &mut rng.split_named("repr"));
    let succ = SuccessorModel::new(8, &sc, &mut rng.split_named("succ"));
    (repr, succ)
}

fn observations(n: usize, seed: u64) -> Tensor<f64> {
    let cfg = EnvConfig::default();
    let mut data = Vec::new();
    for i in 0..n {
        let mut env = DotWorld::reset(&cfg, seed + i as u64);
        for _ in 0..i % 5 {
            env.step([0.5, -0.3]);
        }
        data.extend(env.observation());
    }
    Tensor::new(vec![n, cfg.obs_dim()], data).unwrap()
}

fn expected_count(k_frac: f64, p: usize) -> usize {
    ((k_frac * p as f64).ceil() as usize).max(1)
}

pub fn mask_cardinality_is_exact() {
    let obs = observations(6, 100);
    let p = obs.cols();
    let (repr, succ) = small_models(1, p);
    let q = SrcpQ {
        repr: &repr,
        successor: &succ,
    };
    let mut rng = RngStream::new(2);
    let actions = Tensor::new(vec![6, 2], (0..12).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap();
    let skills = sample_skills(6, 4, &mut rng);
    for k_frac in [0.001, 0.05, 0.15, 0.3333, 0.5, 0.99, 1.0] {
        for m in compute_saliency_batch(&q, &obs, &actions, &skills, k_frac).unwrap() {
            assert_eq!(m.retained(), expected_count(k_frac, p), "k_frac {k_frac}");
            assert!(m.mask.iter().all(|&v| v == 0.0 || v == 1.0));
            let masked = apply_mask(obs.row(0), &m).unwrap();
            for (i, v) in masked.iter().enumerate() {
                if m.mask[i] == 0.0 {
                    assert_eq!(*v, 0.0);
                } else {
                    assert_eq!(*v, obs.row(0)[i]);
                }
            }
            assert_eq!(apply_mask(&masked, &m).unwrap(), masked);
        }
    }
    assert!(compute_saliency_batch(&q, &obs, &actions, &skills, 0.0).is_err());
}

pub fn masks_are_invariant_to_positive_output_scaling() {
    let obs = observations(4, 200);
    let p = obs.cols();
    for model in 0..50 {
        let (repr, succ) = small_models(1000 + model, p);
        let mut rng = RngStream::new(model);
        let actions = Tensor::new(vec![4, 2], (0..8).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap();
        let skills = sample_skills(4, 4, &mut rng);
        let base = SrcpQ {
            repr: &repr,
            successor: &succ,
        };
        let reference = compute_saliency_batch(&base, &obs, &actions, &skills, 0.15).unwrap();
        for c in [0.125, 8.0, 3.7, 1e4] {
            let scaled = Scaled(
                SrcpQ {
                    repr: &repr,
                    successor: &succ,
                },
                c,
            );
            let masks = compute_saliency_batch(&scaled, &obs, &actions, &skills, 0.15).unwrap();
            for (a, b) in masks.iter().zip(&reference) {
                assert_eq!(a.mask, b.mask, "model {model}, scale {c}");
            }
        }
    }
}

pub fn linear_q_mask_selects_largest_weights() {
    let p = EnvConfig::default().obs_dim();
    let mut rng = RngStream::new(8);
    for trial in 0..20 {
        let w: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
        let k_frac = [0.15, 0.05, 0.5][trial % 3];
        let k = expected_count(k_frac, p);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| w[b].abs().partial_cmp(&w[a].abs()).unwrap().then(a.cmp(&b)));
        let mut expected = order[..k].to_vec();
        expected.sort();
        let model = Linear(Tensor::new(vec![p, 1], w).unwrap());
        let obs = vec![0.5; p];
        let m = compute_saliency(&model, &obs, [0.0, 0.0], &[1.0], k_frac).unwrap();
        assert_eq!(m.retained_indices(), expected);
    }
}

pub fn full_fraction_keeps_everything_and_leaves_parameters_alone() {
    let obs = observations(2, 300);
    let (repr, succ) = small_models(5, obs.cols());
    let before = (repr.encoder_checksum(), succ.checksum());
    let q = SrcpQ {
        repr: &repr,
        successor: &succ,
    };
    let skills = sample_skills(2, 4, &mut RngStream::new(1));
    let masks = compute_saliency_batch(&q, &obs, &Tensor::zeros(&[2, 2]), &skills, 1.0).unwrap();
    assert!(masks.iter().all(|m| m.mask.iter().all(|&v| v == 1.0)));
    assert_eq!(before, (repr.encoder_checksum(), succ.checksum()));
}
