//! Zero-shot evaluation, linear probing, attention reports and ablations.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::dataset::OfflineDataset;
use crate::env::{agent_footprint, task_reward, DotWorld, EnvConfig, TaskId};
use crate::linalg::{ridge, Matrix};
use crate::rng::RngStream;
use crate::saliency::{attention_mass, compute_saliency_batch, write_mask_ppm, SrcpQ};
use crate::successor::{infer_skill, l2_normalize, sample_skills};
use crate::tensor::Tensor;
use crate::trainer::{Agent, TrainConfig};
use crate::TrainError;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub n_label: usize,
    pub n_episodes: usize,
    pub seed: u64,
    pub omega: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_label: 10_000,
            n_episodes: 5,
            seed: 0,
            omega: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: String,
    /// Skill used for the rollouts (unit length unless all rewards were 0).
    pub skill: Vec<f64>,
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `k` distinct indices from `0..n` (all of them, shuffled, if `k >= n`).
pub fn sample_without_replacement(n: usize, k: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for i in 0..k {
        let j = i + rng.index(n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Encode observation rows in chunks to bound memory.
pub fn encode_obs(agent: &Agent, ds: &OfflineDataset, indices: &[usize], next: bool) -> Result<Tensor<f64>, TrainError> {
    let m = agent.config.latent_dim;
    let mut data = Vec::with_capacity(indices.len() * m);
    for chunk in indices.chunks(1024) {
        let obs = ds.gather_obs(chunk, next);
        data.extend_from_slice(agent.repr.encode(&obs)?.data());
    }
    Ok(Tensor::new(vec![indices.len(), m], data)?)
}

/// Raw least-squares skill for a task from `n_label` labeled transitions:
/// rewards are scored on the next state and regressed on `phi(f(o'))`.
pub fn infer_task_skill(agent: &Agent, ds: &OfflineDataset, task: TaskId, n_label: usize, seed: u64) -> Result<Vec<f64>, TrainError> {
    if n_label == 0 {
        return Err(TrainError::Config("n_label must be >= 1".into()));
    }
    let mut rng = RngStream::new(seed).split_named("labels");
    let idx = sample_without_replacement(ds.len(), n_label, &mut rng);
    let slice = ds.label_rewards(&idx, task)?;
    let s_next = encode_obs(agent, ds, &idx, true)?;
    let phi = agent.successor.basic_features(&s_next)?;
    infer_skill(&phi, &slice.rewards, agent.config.network.ridge_eps)
}

/// Undiscounted returns of the guided policy under a fixed skill. Episode
/// `e` starts from the environment seed derived from `(seed, e)`, so two
/// calls with the same seed see the same start states and distractors.
pub fn rollout_returns(
    agent: &Agent,
    env: &EnvConfig,
    task: TaskId,
    skill: &[f64],
    omega: f64,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<f64>, TrainError> {
    let root = RngStream::new(seed).split_named("episodes");
    let mut worlds: Vec<DotWorld> = (0..n_episodes).map(|e| DotWorld::reset(env, root.split(e as u64).key())).collect();
    let p = env.obs_dim();
    let d = skill.len();
    let z = Tensor::new(vec![n_episodes, d], skill.iter().copied().cycle().take(n_episodes * d).collect())?;
    let mut returns = vec![0.0; n_episodes];
    for _ in 0..env.episode_length {
        let mut obs = Vec::with_capacity(n_episodes * p);
        for w in &worlds {
            obs.extend(w.observation());
        }
        let actions = agent.act(&Tensor::new(vec![n_episodes, p], obs)?, &z, omega)?;
        for (e, w) in worlds.iter_mut().enumerate() {
            let a = actions.row(e);
            w.step([a[0], a[1]]);
            returns[e] += task_reward(task, &w.state(), env);
        }
    }
    Ok(returns)
}

/// Observations of one guided episode (first episode of `seed`),
/// including the initial frame.
pub fn record_episode(agent: &Agent, env: &EnvConfig, skill: &[f64], omega: f64, seed: u64) -> Result<Vec<Vec<f64>>, TrainError> {
    let root = RngStream::new(seed).split_named("episodes");
    let mut world = DotWorld::reset(env, root.split(0).key());
    let z = Tensor::new(vec![1, skill.len()], skill.to_vec())?;
    let mut frames = vec![world.observation()];
    for _ in 0..env.episode_length {
        let obs = Tensor::new(vec![1, env.obs_dim()], world.observation())?;
        let a = agent.act(&obs, &z, omega)?;
        frames.push(world.step([a.data()[0], a.data()[1]]));
    }
    Ok(frames)
}

/// Label, infer the skill, normalize it and roll out the guided policy.
pub fn evaluate_zero_shot(agent: &Agent, ds: &OfflineDataset, task: TaskId, opts: &EvalOptions) -> Result<EvalReport, TrainError> {
    if opts.n_episodes == 0 {
        return Err(TrainError::Config("n_episodes must be >= 1".into()));
    }
    let raw = infer_task_skill(agent, ds, task, opts.n_label, opts.seed)?;
    let skill = l2_normalize(&raw);
    evaluate_skill(agent, &ds.meta().env, task, &skill, opts)
}

/// Roll out a given skill and summarize.
pub fn evaluate_skill(agent: &Agent, env: &EnvConfig, task: TaskId, skill: &[f64], opts: &EvalOptions) -> Result<EvalReport, TrainError> {
    let returns = rollout_returns(agent, env, task, skill, opts.omega, opts.n_episodes, opts.seed)?;
    let (mean, std) = mean_std(&returns);
    Ok(EvalReport {
        task: task.name().into(),
        skill: skill.to_vec(),
        returns,
        mean,
        std,
    })
}

/// Mean returns of `n` random unit skills on the same episodes.
pub fn random_skill_returns(agent: &Agent, env: &EnvConfig, task: TaskId, n: usize, opts: &EvalOptions) -> Result<Vec<f64>, TrainError> {
    let skills = sample_skills(n, agent.config.feature_dim, &mut RngStream::new(opts.seed).split_named("random-skills"));
    (0..n)
        .map(|i| Ok(evaluate_skill(agent, env, task, skills.row(i), opts)?.mean))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOptions {
    pub max_samples: usize,
    pub holdout_frac: f64,
    pub ridge_eps: f64,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            max_samples: 10_000,
            holdout_frac: 0.2,
            ridge_eps: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub train_mse: f64,
    pub holdout_mse: f64,
    pub n_train: usize,
    pub n_holdout: usize,
}

/// Ridge fit with an intercept from `features` to `targets` on the first
/// `n_train` rows; MSE averaged over rows and target dimensions.
pub fn probe_features(features: &Matrix<f64>, targets: &Matrix<f64>, n_train: usize, eps: f64) -> Result<ProbeReport, TrainError> {
    let n = features.n_rows;
    if n_train == 0 || n_train >= n {
        return Err(TrainError::Config(format!("probe split {n_train} of {n} leaves an empty side")));
    }
    let p = features.n_cols + 1;
    let with_bias = |r: usize| {
        let mut row = features.row(r).to_vec();
        row.push(1.0);
        row
    };
    let x_train = Matrix::from_rows(&(0..n_train).map(with_bias).collect::<Vec<_>>());
    let y_train = Matrix::from_rows(&(0..n_train).map(|r| targets.row(r).to_vec()).collect::<Vec<_>>());
    let w = ridge(&x_train, &y_train, eps)?;
    let q = targets.n_cols;
    let mse = |rows: std::ops::Range<usize>| {
        let count = rows.len();
        let mut total = 0.0;
        for r in rows {
            let x = with_bias(r);
            for j in 0..q {
                let pred: f64 = (0..p).map(|i| x[i] * w.get(i, j)).sum();
                total += (pred - targets.get(r, j)).powi(2);
            }
        }
        total / (count * q) as f64
    };
    Ok(ProbeReport {
        train_mse: mse(0..n_train),
        holdout_mse: mse(n_train..n),
        n_train,
        n_holdout: n - n_train,
    })
}

/// Shuffled sample indices and the train-side count for a probe.
pub fn probe_split(ds: &OfflineDataset, opts: &ProbeOptions) -> Result<(Vec<usize>, usize), TrainError> {
    if !(opts.holdout_frac > 0.0 && opts.holdout_frac < 1.0) {
        return Err(TrainError::Config("holdout_frac must lie in (0, 1)".into()));
    }
    let idx = sample_without_replacement(ds.len(), opts.max_samples, &mut RngStream::new(opts.seed).split_named("probe"));
    let n_train = ((1.0 - opts.holdout_frac) * idx.len() as f64).round() as usize;
    Ok((idx, n_train))
}

/// Ground truth for the probe: the physical state after each transition,
/// which the pair `(o, o')` determines.
pub fn probe_targets(ds: &OfflineDataset, indices: &[usize]) -> Matrix<f64> {
    Matrix::from_rows(&indices.iter().map(|&i| ds.next_state(i).to_array().to_vec()).collect::<Vec<_>>())
}

/// Frozen-encoder linear probe on `[f(o), f(o')]`.
pub fn probe_linear(agent: &Agent, ds: &OfflineDataset, opts: &ProbeOptions) -> Result<ProbeReport, TrainError> {
    let (idx, n_train) = probe_split(ds, opts)?;
    let s = encode_obs(agent, ds, &idx, false)?;
    let s_next = encode_obs(agent, ds, &idx, true)?;
    let rows: Vec<Vec<f64>> = (0..idx.len()).map(|r| [s.row(r), s_next.row(r)].concat()).collect();
    probe_features(&Matrix::from_rows(&rows), &probe_targets(ds, &idx), n_train, opts.ridge_eps)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionReport {
    pub mean: f64,
    pub per_sample: Vec<f64>,
    pub k_frac: f64,
}

/// Mean agent-footprint share of retained saliency entries over
/// `n_samples` dataset observations, each with its dataset action and a
/// random unit skill. Optionally dumps observation and mask PPMs.
pub fn attention_report(
    agent: &Agent,
    ds: &OfflineDataset,
    n_samples: usize,
    seed: u64,
    dump_dir: Option<&Path>,
) -> Result<AttentionReport, TrainError> {
    if n_samples == 0 {
        return Err(TrainError::Config("n_samples must be >= 1".into()));
    }
    let mut rng = RngStream::new(seed).split_named("attention");
    let idx = sample_without_replacement(ds.len(), n_samples, &mut rng);
    let skills = sample_skills(idx.len(), agent.config.feature_dim, &mut rng);
    let q = SrcpQ {
        repr: &agent.repr,
        successor: &agent.successor,
    };
    let k_frac = agent.config.k_frac;
    let grid = ds.meta().env.grid_size;
    if let Some(dir) = dump_dir {
        fs::create_dir_all(dir)?;
    }
    let mut per_sample = Vec::with_capacity(idx.len());
    for (c, chunk) in idx.chunks(64).enumerate() {
        let batch = ds.gather(chunk);
        let z = Tensor::new(
            vec![chunk.len(), skills.cols()],
            (0..chunk.len()).flat_map(|r| skills.row(c * 64 + r).to_vec()).collect(),
        )?;
        let masks = compute_saliency_batch(&q, &batch.obs, &batch.actions, &z, k_frac)?;
        for (r, (m, &i)) in masks.iter().zip(chunk).enumerate() {
            per_sample.push(attention_mass(m, &agent_footprint(ds.state(i).pos, grid)));
            if let Some(dir) = dump_dir {
                let mut f = fs::File::create(dir.join(format!("sample{:04}_obs.ppm", c * 64 + r)))?;
                crate::env::write_ppm(&mut f, batch.obs.row(r), grid, 8)?;
                let mut f = fs::File::create(dir.join(format!("sample{:04}_mask.ppm", c * 64 + r)))?;
                write_mask_ppm(&mut f, m, grid, 8)?;
            }
        }
    }
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(AttentionReport { mean, per_sample, k_frac })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    /// Guidance weight at evaluation; one trained model per seed.
    Omega,
    /// Masked-loss weight; one trained model per value and seed.
    Beta,
}

impl std::str::FromStr for AblationAxis {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "omega" => Ok(Self::Omega),
            "beta" => Ok(Self::Beta),
            _ => Err(TrainError::Config(format!("unknown ablation axis `{s}` (expected omega or beta)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: f64,
    pub task: String,
    pub seeds: String,
    pub mean: f64,
    pub std: f64,
}

/// Zero-shot returns per value, one cell per value aggregated over seeds.
/// `train` produces an agent for a config; callers may cache.
pub fn ablate(
    base: &TrainConfig,
    ds: &OfflineDataset,
    axis: AblationAxis,
    values: &[f64],
    seeds: &[u64],
    task: TaskId,
    eval: &EvalOptions,
    train: &mut dyn FnMut(&TrainConfig) -> Result<Agent, TrainError>,
) -> Result<Vec<AblationRow>, TrainError> {
    if values.is_empty() || seeds.is_empty() {
        return Err(TrainError::Config("ablation needs at least one value and one seed".into()));
    }
    let mut per_value = vec![Vec::new(); values.len()];
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let shared = match axis {
            AblationAxis::Omega => Some(train(&cfg)?),
            AblationAxis::Beta => None,
        };
        for (k, &v) in values.iter().enumerate() {
            let mut opts = eval.clone();
            opts.seed = seed;
            let ret = match axis {
                AblationAxis::Omega => {
                    opts.omega = v;
                    evaluate_zero_shot(shared.as_ref().unwrap(), ds, task, &opts)?.mean
                }
                AblationAxis::Beta => {
                    let mut c = cfg.clone();
                    c.beta = v;
                    evaluate_zero_shot(&train(&c)?, ds, task, &opts)?.mean
                }
            };
            per_value[k].push(ret);
        }
    }
    let seeds_txt = seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";");
    Ok(values
        .iter()
        .zip(per_value)
        .map(|(&value, rets)| {
            let (mean, std) = mean_std(&rets);
            AblationRow {
                axis,
                value,
                task: task.name().into(),
                seeds: seeds_txt.clone(),
                mean,
                std,
            }
        })
        .collect())
}

pub fn write_ablation_csv(path: impl AsRef<Path>, rows: &[AblationRow]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::Io(e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| TrainError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_without_replacement_is_distinct() {
        let mut r = RngStream::new(1);
        let mut v = sample_without_replacement(50, 20, &mut r);
        v.sort();
        v.dedup();
        assert_eq!(v.len(), 20);
        assert_eq!(sample_without_replacement(5, 9, &mut r).len(), 5);
    }

    #[test]
    fn probe_on_exact_features_is_exact() {
        let mut r = RngStream::new(4);
        let rows: Vec<Vec<f64>> = (0..200).map(|_| (0..4).map(|_| r.normal()).collect()).collect();
        let x = Matrix::from_rows(&rows);
        let rep = probe_features(&x, &x, 150, 1e-12).unwrap();
        assert!(rep.holdout_mse < 1e-10, "{rep:?}");
    }
}
