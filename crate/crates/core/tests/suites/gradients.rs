//! Tape gradients against central finite differences.

use std::time::Instant;

use rand::RngCore;

use srcp::nn::{Activation, Mlp, MlpSpec};
use srcp::policy::{ConsistencyPolicy, PolicyBatch, PolicyConfig, PolicyDraws, PolicyLearner, PolicyTerms};
use srcp::repr::{rep_losses, DynamicsHeads, ReprConfig, ReprModel};
use srcp::rng::RngStream;
use srcp::successor::{hilp_loss, hilp_value, sample_skills, successor_loss, HilpTarget, SuccessorConfig, SuccessorModel};
use srcp::tensor::{finite_diff_check, relative_error, AdamConfig, Graph, OpKind, Tensor, TensorError, Var};

const INSTANCES: usize = 100;
const TOL: f64 = 1e-4;
const H: f64 = 1e-6;

fn randn(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Values bounded away from zero, for kinked primitives.
fn away_from_zero(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform_in(0.1, 1.5);
            if rng.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("x{i}")).collect()
}

/// Scalarize with a fixed random weighting so every output entry matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(randn(&shape, &mut RngStream::new(seed)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check(label: &str, params: &mut [Tensor<f64>], loss: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>) {
    let report = finite_diff_check(&names(params.len()), params, loss, H, TOL).unwrap();
    assert!(report.pass, "{label}: {report:?}");
}

pub fn registered_primitives_match_finite_differences() {
    let start = Instant::now();
    let kinds = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::LayerNorm,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SquaredNorm,
        OpKind::Concat,
        OpKind::Square,
        OpKind::Sqrt,
        OpKind::RowSum,
    ];
    let mut rng = RngStream::new(11);
    for kind in kinds {
        for inst in 0..INSTANCES {
            let r = 1 + rng.index(4);
            let c = 2 + rng.index(4);
            let k = 1 + rng.index(4);
            let broadcast = rng.uniform() < 0.3;
            let mut params = match kind {
                OpKind::MatMul => vec![randn(&[r, k], &mut rng), randn(&[k, c], &mut rng)],
                OpKind::Add | OpKind::Sub | OpKind::Mul => {
                    let rhs_rows = if broadcast { 1 } else { r };
                    vec![randn(&[r, c], &mut rng), randn(&[rhs_rows, c], &mut rng)]
                }
                OpKind::Concat => vec![randn(&[r, c], &mut rng), randn(&[r, k], &mut rng)],
                OpKind::Relu => vec![away_from_zero(&[r, c], &mut rng)],
                OpKind::Sqrt => {
                    let t = randn(&[r, c], &mut rng);
                    vec![t.map(|v| 0.2 + v.abs())]
                }
                _ => vec![randn(&[r, c], &mut rng)],
            };
            let seed = rng.next_u64();
            check(&format!("{kind:?} #{inst}"), &mut params, |g, v| {
                let y = g.apply(kind, v)?;
                weighted_sum(g, y, seed)
            });
        }
    }
    assert!(start.elapsed().as_secs() < 120);
}

pub fn helper_ops_match_finite_differences() {
    let mut rng = RngStream::new(12);
    for inst in 0..INSTANCES {
        let r = 1 + rng.index(4);
        let c = 2 + rng.index(4);
        let k = 1 + rng.index(4);
        let seed = rng.next_u64();
        let mut params = vec![randn(&[r, k], &mut rng), randn(&[k, c], &mut rng), randn(&[1, c], &mut rng)];
        check(&format!("affine #{inst}"), &mut params, |g, v| {
            let y = g.affine(v[0], v[1], v[2])?;
            weighted_sum(g, y, seed)
        });
        let mut params = vec![randn(&[r, c], &mut rng), randn(&[r, c], &mut rng)];
        check(&format!("mean_sq_dist #{inst}"), &mut params, |g, v| g.mean_sq_dist(v[0], v[1]));
        check(&format!("row_dot #{inst}"), &mut params, |g, v| {
            let y = g.row_dot(v[0], v[1])?;
            weighted_sum(g, y, seed)
        });
        let mut params = vec![randn(&[r, c], &mut rng)];
        let (lo, hi) = (-0.5, 0.7);
        params[0] = params[0].map(|x| if (x - lo).abs() < 0.05 || (x - hi).abs() < 0.05 { x + 0.1 } else { x });
        check(&format!("clamp/scale/offset/neg #{inst}"), &mut params, |g, v| {
            let a = g.clamp(v[0], lo, hi);
            let b = g.scale(a, 1.7);
            let c = g.offset(b, -0.3);
            let d = g.neg(c);
            weighted_sum(g, d, seed)
        });
        let start = rng.index(c - 1);
        let len = 1 + rng.index(c - start);
        check(&format!("slice #{inst}"), &mut params, |g, v| {
            let y = g.slice(v[0], start, len)?;
            weighted_sum(g, y, seed)
        });
        let rs = rng.index(r);
        let rl = 1 + rng.index(r - rs);
        check(&format!("row_slice #{inst}"), &mut params, |g, v| {
            let y = g.row_slice(v[0], rs, rl)?;
            weighted_sum(g, y, seed)
        });
    }
}

struct LeafHeads<'a> {
    forward: &'a Mlp<f64>,
    inverse: &'a Mlp<f64>,
    fv: Vec<Var>,
    iv: Vec<Var>,
}

impl DynamicsHeads for LeafHeads<'_> {
    fn predict_next(&self, g: &mut Graph<f64>, s: Var, a: Var) -> Result<Var, TensorError> {
        let x = g.concat(&[s, a])?;
        self.forward.forward_with(g, &self.fv, x)
    }

    fn predict_action(&self, g: &mut Graph<f64>, s: Var, s_next: Var) -> Result<Var, TensorError> {
        let x = g.concat(&[s, s_next])?;
        self.inverse.forward_with(g, &self.iv, x)
    }
}

fn small_repr(seed: u64) -> ReprModel {
    let cfg = ReprConfig {
        latent_dim: 4,
        encoder_hidden: vec![5],
        head_hidden: vec![5],
    };
    ReprModel::new(6, &cfg, &mut RngStream::new(seed))
}

/// The forward target is a stop-gradient, so it is encoded with constant
/// copies of the encoder parameters; the inverse head sees the same value.
pub fn representation_loss_components_match_finite_differences() {
    let mut rng = RngStream::new(13);
    for inst in 0..INSTANCES {
        let model = small_repr(rng.next_u64());
        let b = 2 + rng.index(4);
        let obs = randn(&[b, 6], &mut rng);
        let masked = obs.map(|x| if x > 0.3 { x } else { 0.0 });
        let next = randn(&[b, 6], &mut rng);
        let actions = randn(&[b, 2], &mut rng).map(f64::tanh);
        let beta = rng.uniform_in(0.0, 1.0);
        let n_enc = model.encoder.params().len();
        let n_fwd = model.forward.params().len();
        let frozen_encoder = model.encoder.clone();
        let mut params: Vec<Tensor<f64>> = model.params().cloned().collect();
        for component in 0..5 {
            check(&format!("rep component {component} #{inst}"), &mut params, |g, v| {
                let (ev, rest) = v.split_at(n_enc);
                let (fv, iv) = rest.split_at(n_fwd);
                let heads = LeafHeads {
                    forward: &model.forward,
                    inverse: &model.inverse,
                    fv: fv.to_vec(),
                    iv: iv.to_vec(),
                };
                let o = g.constant(obs.clone());
                let om = g.constant(masked.clone());
                let s = model.encoder.forward_with(g, ev, o)?;
                let sa = model.encoder.forward_with(g, ev, om)?;
                let sn = g.constant(frozen_encoder.eval(&next)?);
                let a = g.constant(actions.clone());
                let l = rep_losses(g, &heads, s, sa, sn, a, beta).map_err(|e| TensorError::UnsupportedOp(e.to_string()))?;
                Ok([l.d1, l.i1, l.d2, l.i2, l.total][component])
            });
        }
    }
}

pub fn hilp_loss_matches_finite_differences() {
    let mut rng = RngStream::new(14);
    for inst in 0..INSTANCES {
        let spec = MlpSpec::new(4, &[5], 3, Activation::Relu).layernorm_tanh_first();
        let phi1 = Mlp::<f64>::new(spec.clone(), &mut rng.split(2 * inst as u64));
        let phi2 = Mlp::<f64>::new(spec, &mut rng.split(2 * inst as u64 + 1));
        let b = 2 + rng.index(5);
        let s = randn(&[b, 4], &mut rng);
        let goal = randn(&[b, 4], &mut rng);
        let v_next = [randn(&[b, 1], &mut rng).map(|x| -x.abs()), randn(&[b, 1], &mut rng).map(|x| -x.abs())];
        let reached: Vec<f64> = (0..b).map(|_| if rng.uniform() < 0.3 { 1.0 } else { 0.0 }).collect();
        let target = if inst % 2 == 0 { HilpTarget::StepPenalty } else { HilpTarget::Literal };
        let n1 = phi1.params().len();
        let mut params: Vec<Tensor<f64>> = phi1.params().iter().chain(phi2.params()).cloned().collect();
        check(&format!("hilp #{inst}"), &mut params, |g, v| {
            let (v1, v2) = v.split_at(n1);
            let si = g.constant(s.clone());
            let gi = g.constant(goal.clone());
            let mut values = [si; 2];
            for (k, (net, vars)) in [(&phi1, v1), (&phi2, v2)].into_iter().enumerate() {
                let ps = net.forward_with(g, vars, si)?;
                let pg = net.forward_with(g, vars, gi)?;
                values[k] = hilp_value(g, ps, pg)?;
            }
            hilp_loss(g, values, &v_next, &reached, 0.99, target)
        });
    }
}

pub fn successor_loss_matches_finite_differences() {
    let mut rng = RngStream::new(15);
    for inst in 0..INSTANCES {
        let d = 3;
        let psi = Mlp::<f64>::new(MlpSpec::new(4 + 2 + d, &[6], d, Activation::Relu), &mut rng.split(inst as u64));
        let b = 2 + rng.index(5);
        let s = randn(&[b, 4], &mut rng);
        let a = randn(&[b, 2], &mut rng);
        let z = sample_skills(b, d, &mut rng);
        let phi_next = randn(&[b, d], &mut rng);
        let psi_bar = randn(&[b, d], &mut rng);
        let mut params = psi.params().to_vec();
        check(&format!("successor #{inst}"), &mut params, |g, v| {
            let x = [g.constant(s.clone()), g.constant(a.clone()), g.constant(z.clone())];
            let x = g.concat(&x)?;
            let out = psi.forward_with(g, v, x)?;
            successor_loss(g, out, &phi_next, &psi_bar, 0.99)
        });
    }
}

/// Policy terms through the production learner. The anchor (target
/// denoiser) and the critic own separate parameters, so perturbing the
/// online denoiser leaves them untouched.
pub fn policy_losses_match_finite_differences() {
    let mut rng = RngStream::new(16);
    let cfg = PolicyConfig {
        hidden: vec![6],
        noise_levels: 4,
        ..PolicyConfig::default()
    };
    let succ_cfg = SuccessorConfig {
        feature_dim: 3,
        phi_hidden: vec![5],
        psi_hidden: vec![6],
        ..SuccessorConfig::default()
    };
    let term_sets = [
        ("L_Q", PolicyTerms { q: true, lambda1: 0.0, lambda2: 0.0 }),
        ("L_bc1", PolicyTerms { q: false, lambda1: 1.0, lambda2: 0.0 }),
        ("L_bc2", PolicyTerms { q: false, lambda1: 0.0, lambda2: 1.0 }),
    ];
    for inst in 0..INSTANCES {
        let mut policy = ConsistencyPolicy::new(4, 3, &cfg, &mut rng.split_named("policy")).unwrap();
        // Separate the target from the online copy so the anchor is informative.
        for p in policy.target.params_mut() {
            *p = p.map(|x| x + 0.05 * x.signum());
        }
        let critic = SuccessorModel::new(4, &succ_cfg, &mut rng.split_named("critic"));
        let mut learner = PolicyLearner::new(policy, cfg.clone(), AdamConfig::default());
        let b = 2 + rng.index(4);
        let s = randn(&[b, 4], &mut rng);
        let actions = randn(&[b, 2], &mut rng).map(f64::tanh);
        let skills = sample_skills(b, 3, &mut rng);
        let draws = PolicyDraws::sample(b, 3, &learner.policy.schedule, &mut rng).unwrap();
        for (label, terms) in term_sets {
            let batch = PolicyBatch {
                s: &s,
                actions: &actions,
                skills: &skills,
            };
            let (_, analytic) = learner.loss_and_grads(&batch, &critic, &draws, terms).unwrap();
            let mut worst = 0.0f64;
            for pi in 0..analytic.len() {
                for j in 0..analytic[pi].len() {
                    let orig = learner.policy.online.params_mut().nth(pi).unwrap().data()[j];
                    let mut eval = |x: f64| {
                        learner.policy.online.params_mut().nth(pi).unwrap().data_mut()[j] = x;
                        learner.loss_and_grads(&batch, &critic, &draws, terms).unwrap().0.total
                    };
                    let numeric = (eval(orig + H) - eval(orig - H)) / (2.0 * H);
                    learner.policy.online.params_mut().nth(pi).unwrap().data_mut()[j] = orig;
                    worst = worst.max(relative_error(analytic[pi].data()[j], numeric));
                }
            }
            assert!(worst < TOL, "{label} #{inst}: max relative error {worst:e}");
        }
    }
}
