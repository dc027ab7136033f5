//! Pretraining loop, configuration, checkpoints and metrics.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::OfflineDataset;
use crate::env::{agent_footprint, EnvConfig, TaskId};
use crate::nn::Activation;
use crate::policy::{ActMode, ConsistencyPolicy, PolicyBatch, PolicyConfig, PolicyDraws, PolicyLearner, PolicyLossValues};
use crate::repr::{RepBatch, RepLearner, RepLossValues, ReprConfig, ReprModel};
use crate::rng::RngStream;
use crate::saliency::{apply_masks, attention_mass, compute_saliency_batch, SrcpQ};
use crate::successor::{sample_skills, HilpTarget, SuccessorBatch, SuccessorConfig, SuccessorLearner, SuccessorModel};
use crate::tensor::{read_checkpoint, write_checkpoint, AdamConfig, Checkpoint, Tensor};
use crate::TrainError;

/// Layer sizes and other architectural knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub phi_hidden: Vec<usize>,
    pub psi_hidden: Vec<usize>,
    pub policy_hidden: Vec<usize>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub explore_std: f64,
    pub explore_clip: f64,
    pub goal_threshold: f64,
    pub hilp_target: HilpTarget,
    pub trajectory_goal_prob: f64,
    pub ridge_eps: f64,
    pub feature_norm: bool,
    pub feature_norm_rate: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let r = ReprConfig::default();
        let s = SuccessorConfig::default();
        let p = PolicyConfig::default();
        Self {
            encoder_hidden: r.encoder_hidden,
            head_hidden: r.head_hidden,
            phi_hidden: s.phi_hidden,
            psi_hidden: s.psi_hidden,
            policy_hidden: p.hidden,
            sigma_min: p.sigma_min,
            sigma_max: p.sigma_max,
            explore_std: p.explore_std,
            explore_clip: p.explore_clip,
            goal_threshold: s.goal_threshold,
            hilp_target: s.hilp_target,
            trajectory_goal_prob: s.trajectory_goal_prob,
            ridge_eps: s.ridge_eps,
            feature_norm: s.feature_norm,
            feature_norm_rate: s.feature_norm_rate,
        }
    }
}

/// Every hyperparameter of a pretraining run. Loaded from TOML; unknown
/// keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub gamma: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub policy_update_freq: usize,
    pub omega: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub k_frac: f64,
    pub noise_levels: usize,
    pub steps: usize,
    pub inner_updates: usize,
    /// Accepted for completeness; the training loop never reads it.
    pub skill_update_period: usize,
    pub log_interval: usize,
    /// 0 disables periodic checkpoints (the final one is always written).
    pub checkpoint_interval: usize,
    /// 0 disables in-training evaluation.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub eval_labels: usize,
    pub env: EnvConfig,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            gamma: 0.99,
            batch_size: 64,
            lr: 1e-4,
            tau: 0.01,
            policy_update_freq: 2,
            omega: 3.0,
            beta: 0.5,
            lambda1: 0.2,
            lambda2: 0.2,
            feature_dim: 8,
            latent_dim: 32,
            k_frac: 0.15,
            noise_levels: 8,
            steps: 20_000,
            inner_updates: 1,
            skill_update_period: 0,
            log_interval: 100,
            checkpoint_interval: 5_000,
            eval_interval: 0,
            eval_episodes: 2,
            eval_labels: 1_000,
            env: EnvConfig::default(),
            network: NetworkConfig::default(),
        }
    }
}

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::Config(msg.into())
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let unit_open = |v: f64| v > 0.0 && v < 1.0;
        if !unit_open(self.gamma) {
            return Err(bad(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(bad(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if self.policy_update_freq == 0 {
            return Err(bad("policy_update_freq must be >= 1"));
        }
        if !self.omega.is_finite() {
            return Err(bad("omega must be finite"));
        }
        for (name, v) in [("beta", self.beta), ("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.feature_dim == 0 || self.latent_dim == 0 {
            return Err(bad("feature_dim and latent_dim must be >= 1"));
        }
        if !(self.k_frac > 0.0 && self.k_frac <= 1.0) {
            return Err(bad(format!("k_frac must lie in (0, 1], got {}", self.k_frac)));
        }
        if self.noise_levels < 2 {
            return Err(bad("noise_levels must be >= 2"));
        }
        if self.steps == 0 || self.inner_updates == 0 || self.log_interval == 0 {
            return Err(bad("steps, inner_updates and log_interval must be >= 1"));
        }
        let n = &self.network;
        for (name, h) in [
            ("encoder_hidden", &n.encoder_hidden),
            ("head_hidden", &n.head_hidden),
            ("phi_hidden", &n.phi_hidden),
            ("psi_hidden", &n.psi_hidden),
            ("policy_hidden", &n.policy_hidden),
        ] {
            if h.iter().any(|&w| w == 0) {
                return Err(bad(format!("{name} has a zero-width layer")));
            }
        }
        if !(n.sigma_min > 0.0 && n.sigma_max > n.sigma_min) {
            return Err(bad("noise scales need 0 < sigma_min < sigma_max"));
        }
        if !(n.explore_std >= 0.0 && n.explore_clip >= 0.0) {
            return Err(bad("exploration noise settings must be >= 0"));
        }
        if !(n.goal_threshold > 0.0) {
            return Err(bad("goal_threshold must be > 0"));
        }
        if !(0.0..=1.0).contains(&n.trajectory_goal_prob) {
            return Err(bad("trajectory_goal_prob must lie in [0, 1]"));
        }
        if !(n.ridge_eps > 0.0) {
            return Err(bad("ridge_eps must be > 0"));
        }
        if !(n.feature_norm_rate > 0.0 && n.feature_norm_rate <= 1.0) {
            return Err(bad("feature_norm_rate must lie in (0, 1]"));
        }
        self.env.validate().map_err(|e| bad(e.to_string()))?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn repr_config(&self) -> ReprConfig {
        ReprConfig {
            latent_dim: self.latent_dim,
            encoder_hidden: self.network.encoder_hidden.clone(),
            head_hidden: self.network.head_hidden.clone(),
        }
    }

    pub fn successor_config(&self) -> SuccessorConfig {
        let n = &self.network;
        SuccessorConfig {
            feature_dim: self.feature_dim,
            phi_hidden: n.phi_hidden.clone(),
            psi_hidden: n.psi_hidden.clone(),
            goal_threshold: n.goal_threshold,
            hilp_target: n.hilp_target,
            trajectory_goal_prob: n.trajectory_goal_prob,
            ridge_eps: n.ridge_eps,
            feature_norm: n.feature_norm,
            feature_norm_rate: n.feature_norm_rate,
            ..SuccessorConfig::default()
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let n = &self.network;
        PolicyConfig {
            hidden: n.policy_hidden.clone(),
            noise_levels: self.noise_levels,
            sigma_min: n.sigma_min,
            sigma_max: n.sigma_max,
            omega: self.omega,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            explore_std: n.explore_std,
            explore_clip: n.explore_clip,
            layernorm_first: true,
            activation: Activation::Relu,
        }
    }
}

const CONFIG_KEY: &str = "meta.config_toml";

/// Every trained network of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub config: TrainConfig,
    pub repr: ReprModel,
    pub successor: SuccessorModel,
    pub policy: ConsistencyPolicy,
}

impl Agent {
    /// Freshly initialized networks, all drawn from `config.seed`.
    pub fn new(config: &TrainConfig, obs_dim: usize) -> Result<Self, TrainError> {
        config.validate()?;
        let root = RngStream::new(config.seed).split_named("init");
        let repr = ReprModel::new(obs_dim, &config.repr_config(), &mut root.split_named("repr"));
        let successor = SuccessorModel::new(config.latent_dim, &config.successor_config(), &mut root.split_named("successor"));
        let policy = ConsistencyPolicy::new(
            config.latent_dim,
            config.feature_dim,
            &config.policy_config(),
            &mut root.split_named("policy"),
        )?;
        Ok(Self {
            config: config.clone(),
            repr,
            successor,
            policy,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.repr.encoder.spec().input
    }

    /// Deterministic guided actions for a batch of observations.
    pub fn act(&self, obs: &Tensor<f64>, z: &Tensor<f64>, omega: f64) -> Result<Tensor<f64>, TrainError> {
        let s = self.repr.encode(obs)?;
        self.policy.act(&s, z, omega, ActMode::Eval, None, &self.config.policy_config())
    }

    pub fn checksums(&self) -> ModuleChecksums {
        ModuleChecksums {
            repr: self.repr.checksum(),
            successor: self.successor.checksum(),
            policy: self.policy.checksum(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint<f64> {
        let mut ck = Checkpoint::new();
        self.repr.export(&mut ck);
        self.successor.export(&mut ck);
        self.policy.export(&mut ck);
        let bytes: Vec<f64> = self.config.to_toml().bytes().map(f64::from).collect();
        ck.insert(CONFIG_KEY.into(), Tensor::new(vec![bytes.len()], bytes).unwrap());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint<f64>) -> Result<Self, TrainError> {
        let raw = ck
            .get(CONFIG_KEY)
            .ok_or_else(|| TrainError::Checkpoint(format!("missing `{CONFIG_KEY}`")))?;
        let bytes: Vec<u8> = raw.data().iter().map(|&v| v as u8).collect();
        let text = String::from_utf8(bytes).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let config = TrainConfig::from_toml_str(&text)?;
        let obs_dim = ck
            .get("encoder.l0.weight")
            .map(|t| t.shape()[0])
            .ok_or_else(|| TrainError::Checkpoint("missing `encoder.w0`".into()))?;
        let mut agent = Self::new(&config, obs_dim)?;
        agent.repr.import(ck).map_err(TrainError::Checkpoint)?;
        agent.successor.import(ck).map_err(TrainError::Checkpoint)?;
        agent.policy.import(ck).map_err(TrainError::Checkpoint)?;
        Ok(agent)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_checkpoint(&mut out, &self.to_checkpoint()).expect("in-memory write");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut rest = bytes;
        let ck = read_checkpoint(&mut rest).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if !rest.is_empty() {
            return Err(TrainError::Checkpoint(format!("{} trailing bytes after the checkpoint", rest.len())));
        }
        Self::from_checkpoint(&ck)
    }

    /// Written to a temporary sibling and renamed, so a crash never leaves
    /// a half-written checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let bytes = fs::read(path.as_ref())?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ModuleChecksums {
    pub repr: u64,
    pub successor: u64,
    pub policy: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Saliency,
    Rep,
    Successor,
    Policy,
    Ema,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TraceEvent {
    pub step: usize,
    pub inner: usize,
    pub phase: Phase,
}

/// Losses from one inner update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub rep: RepLossValues,
    pub hilp: f64,
    pub psi: f64,
    pub reached_fraction: f64,
    pub policy: Option<PolicyLossValues>,
    pub attention_mass: f64,
}

/// One CSV row: losses averaged over the logging window.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub rep_d1: f64,
    pub rep_i1: f64,
    pub rep_d2: f64,
    pub rep_i2: f64,
    pub rep_total: f64,
    pub l_nu: f64,
    pub l_psi: f64,
    pub l_q: f64,
    pub l_bc1: f64,
    pub l_bc2: f64,
    pub reached_fraction: f64,
    pub attention_mass: f64,
    pub eval_reach_tl: Option<f64>,
    pub eval_reach_tr: Option<f64>,
    pub eval_reach_bl: Option<f64>,
    pub eval_reach_br: Option<f64>,
    pub eval_run_right: Option<f64>,
    pub wall_clock_s: f64,
}

impl MetricsRow {
    pub fn losses(&self) -> [f64; 11] {
        [
            self.rep_d1,
            self.rep_i1,
            self.rep_d2,
            self.rep_i2,
            self.rep_total,
            self.l_nu,
            self.l_psi,
            self.l_q,
            self.l_bc1,
            self.l_bc2,
            self.reached_fraction,
        ]
    }
}

#[derive(Default)]
struct Window {
    n: usize,
    n_policy: usize,
    row: MetricsRow,
}

impl Window {
    fn push(&mut self, l: &StepLosses) {
        let r = &mut self.row;
        r.rep_d1 += l.rep.d1;
        r.rep_i1 += l.rep.i1;
        r.rep_d2 += l.rep.d2;
        r.rep_i2 += l.rep.i2;
        r.rep_total += l.rep.total;
        r.l_nu += l.hilp;
        r.l_psi += l.psi;
        r.reached_fraction += l.reached_fraction;
        r.attention_mass += l.attention_mass;
        self.n += 1;
        if let Some(p) = l.policy {
            r.l_q += p.q;
            r.l_bc1 += p.bc1;
            r.l_bc2 += p.bc2;
            self.n_policy += 1;
        }
    }

    fn finish(self, step: usize, wall: f64) -> MetricsRow {
        let n = self.n.max(1) as f64;
        let np = self.n_policy.max(1) as f64;
        let r = self.row;
        MetricsRow {
            step,
            rep_d1: r.rep_d1 / n,
            rep_i1: r.rep_i1 / n,
            rep_d2: r.rep_d2 / n,
            rep_i2: r.rep_i2 / n,
            rep_total: r.rep_total / n,
            l_nu: r.l_nu / n,
            l_psi: r.l_psi / n,
            l_q: r.l_q / np,
            l_bc1: r.l_bc1 / np,
            l_bc2: r.l_bc2 / np,
            reached_fraction: r.reached_fraction / n,
            attention_mass: r.attention_mass / n,
            wall_clock_s: wall,
            ..MetricsRow::default()
        }
    }
}

/// The three learners plus the loop state.
pub struct Trainer {
    pub config: TrainConfig,
    pub rep: RepLearner,
    pub successor: SuccessorLearner,
    pub policy: PolicyLearner,
    rng: RngStream,
    iteration: usize,
    trace: Option<Vec<TraceEvent>>,
}

impl Trainer {
    pub fn new(config: &TrainConfig, obs_dim: usize) -> Result<Self, TrainError> {
        let agent = Agent::new(config, obs_dim)?;
        let adam = config.adam();
        Ok(Self {
            config: config.clone(),
            rep: RepLearner::new(agent.repr, adam, config.beta),
            successor: SuccessorLearner::new(agent.successor, config.successor_config(), adam, config.gamma),
            policy: PolicyLearner::new(agent.policy, config.policy_config(), adam),
            rng: RngStream::new(config.seed).split_named("train"),
            iteration: 0,
            trace: None,
        })
    }

    pub fn record_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> &[TraceEvent] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn agent(&self) -> Agent {
        Agent {
            config: self.config.clone(),
            repr: self.rep.model.clone(),
            successor: self.successor.model.clone(),
            policy: self.policy.policy.clone(),
        }
    }

    pub fn checksums(&self) -> ModuleChecksums {
        ModuleChecksums {
            repr: self.rep.model.checksum(),
            successor: self.successor.model.checksum(),
            policy: self.policy.policy.checksum(),
        }
    }

    fn mark(&mut self, inner: usize, phase: Phase) {
        let step = self.iteration;
        if let Some(t) = self.trace.as_mut() {
            t.push(TraceEvent { step, inner, phase });
        }
    }

    /// One outer iteration: `inner_updates` passes of saliency, encoder,
    /// successor, policy (every `policy_update_freq`-th iteration) and EMA.
    /// With `check` set, asserts that every phase changes only its own
    /// parameter group.
    pub fn step(&mut self, ds: &OfflineDataset, check: bool) -> Result<Vec<StepLosses>, TrainError> {
        let mut out = Vec::with_capacity(self.config.inner_updates);
        for inner in 0..self.config.inner_updates {
            out.push(self.inner_step(ds, inner, check)?);
        }
        self.iteration += 1;
        Ok(out)
    }

    fn guard(&self, check: bool, before: ModuleChecksums, phase: Phase) -> Result<ModuleChecksums, TrainError> {
        let after = self.checksums();
        if check {
            let leaked = match phase {
                Phase::Saliency => after != before,
                Phase::Rep => after.successor != before.successor || after.policy != before.policy,
                Phase::Successor => after.repr != before.repr || after.policy != before.policy,
                Phase::Policy => after.repr != before.repr || after.successor != before.successor,
                Phase::Ema => after.repr != before.repr,
            };
            if leaked {
                return Err(TrainError::Config(format!("{phase:?} update touched another module's parameters")));
            }
        }
        Ok(after)
    }

    fn inner_step(&mut self, ds: &OfflineDataset, inner: usize, check: bool) -> Result<StepLosses, TrainError> {
        let cfg = self.config.clone();
        let view = ds.learner_view();
        let b = cfg.batch_size;
        let r = self.rng.split(self.iteration as u64).split(inner as u64);
        let batch = view.sample(b, &mut r.split_named("batch"))?;
        let main = &batch.main;
        let skills = sample_skills(b, cfg.feature_dim, &mut r.split_named("skills"));
        let mut sums = if check { self.checksums() } else { ModuleChecksums { repr: 0, successor: 0, policy: 0 } };

        let q = SrcpQ {
            repr: &self.rep.model,
            successor: &self.successor.model,
        };
        let masks = compute_saliency_batch(&q, &main.obs, &main.actions, &skills, cfg.k_frac)?;
        let obs_masked = apply_masks(&main.obs, &masks)?;
        let attention = masks
            .iter()
            .zip(&main.indices)
            .map(|(m, &i)| attention_mass(m, &agent_footprint(ds.state(i).pos, cfg.env.grid_size)))
            .sum::<f64>()
            / b as f64;
        self.mark(inner, Phase::Saliency);
        if check {
            sums = self.guard(true, sums, Phase::Saliency)?;
        }

        let rep = self.rep.update(&RepBatch {
            obs: &main.obs,
            obs_masked: &obs_masked,
            next_obs: &main.next_obs,
            actions: &main.actions,
        })?;
        self.mark(inner, Phase::Rep);
        if check {
            sums = self.guard(true, sums, Phase::Rep)?;
        }

        let mut gr = r.split_named("goals");
        let p = view.obs_dim();
        // o, o' and goal observations go through the updated encoder as one batch.
        let mut stacked = Vec::with_capacity(3 * b * p);
        stacked.extend_from_slice(main.obs.data());
        stacked.extend_from_slice(main.next_obs.data());
        for (row, &i) in main.indices.iter().enumerate() {
            if gr.uniform() < cfg.network.trajectory_goal_prob {
                let j = view.future_index(i, cfg.gamma, &mut gr);
                stacked.extend_from_slice(view.gather_obs(&[j], false).data());
            } else {
                stacked.extend_from_slice(batch.target.obs.row(row));
            }
        }
        let latents = self.rep.model.encode(&Tensor::new(vec![3 * b, p], stacked)?)?;
        let m = cfg.latent_dim;
        let part = |k: usize| Tensor::new(vec![b, m], latents.data()[k * b * m..(k + 1) * b * m].to_vec());
        let (s, s_next, goal) = (part(0)?, part(1)?, part(2)?);
        let next_actions = self.policy.policy.act(
            &s_next,
            &skills,
            cfg.omega,
            ActMode::Train,
            Some(&mut r.split_named("act")),
            &self.policy.cfg,
        )?;
        let succ = self.successor.update(&SuccessorBatch {
            s: &s,
            s_next: &s_next,
            goal: &goal,
            actions: &main.actions,
            next_actions: &next_actions,
            skills: &skills,
        })?;
        self.mark(inner, Phase::Successor);
        if check {
            sums = self.guard(true, sums, Phase::Successor)?;
        }

        let mut policy = None;
        if self.iteration % cfg.policy_update_freq == 0 {
            let draws = PolicyDraws::sample(b, cfg.feature_dim, &self.policy.policy.schedule, &mut r.split_named("policy"))?;
            let values = self.policy.update(
                &PolicyBatch {
                    s: &s,
                    actions: &main.actions,
                    skills: &skills,
                },
                &self.successor.model,
                &draws,
            )?;
            policy = Some(values);
            self.mark(inner, Phase::Policy);
            if check {
                sums = self.guard(true, sums, Phase::Policy)?;
            }
        }

        self.successor.model.update_targets(cfg.tau)?;
        self.policy.policy.update_target(cfg.tau)?;
        self.mark(inner, Phase::Ema);
        if check {
            self.guard(true, sums, Phase::Ema)?;
        }

        Ok(StepLosses {
            rep,
            hilp: succ.hilp,
            psi: succ.psi,
            reached_fraction: succ.reached_fraction,
            policy,
            attention_mass: attention,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    /// Directory for `checkpoint.srcp`, `metrics.csv` and `config.toml`.
    pub out_dir: Option<PathBuf>,
    pub record_trace: bool,
    pub verbose: bool,
}

pub struct PretrainOutcome {
    pub agent: Agent,
    pub metrics: Vec<MetricsRow>,
    pub trace: Vec<TraceEvent>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.srcp";

/// Run the full pretraining loop on a dataset.
pub fn pretrain(config: &TrainConfig, dataset: &OfflineDataset, opts: &PretrainOptions) -> Result<PretrainOutcome, TrainError> {
    config.validate()?;
    if dataset.meta().env_hash != config.env.hash() {
        return Err(bad(format!(
            "dataset environment hash {:016x} does not match the config's {:016x}",
            dataset.meta().env_hash,
            config.env.hash()
        )));
    }
    if config.batch_size > dataset.len() {
        return Err(bad(format!(
            "batch_size {} exceeds the dataset size {}",
            config.batch_size,
            dataset.len()
        )));
    }
    let mut writer = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.toml"), config.to_toml())?;
            Some(csv::Writer::from_path(dir.join(METRICS_FILE)).map_err(|e| TrainError::Io(e.into()))?)
        }
        None => None,
    };
    let mut trainer = Trainer::new(config, dataset.obs_dim())?;
    if opts.record_trace {
        trainer.record_trace();
    }
    let start = Instant::now();
    let mut metrics = Vec::new();
    let mut window = Window::default();
    for it in 0..config.steps {
        let at_log = (it + 1) % config.log_interval == 0 || it + 1 == config.steps;
        let losses = trainer.step(dataset, at_log)?;
        for l in &losses {
            window.push(l);
        }
        if at_log {
            let mut row = std::mem::take(&mut window).finish(it + 1, start.elapsed().as_secs_f64());
            if let Some(bad) = row.losses().iter().find(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite {
                    what: "logged loss".into(),
                    detail: format!("{bad} at step {}", it + 1),
                });
            }
            if config.eval_interval > 0 && (it + 1) % config.eval_interval == 0 {
                let agent = trainer.agent();
                let opts = crate::evaluate::EvalOptions {
                    n_label: config.eval_labels,
                    n_episodes: config.eval_episodes,
                    seed: config.seed,
                    omega: config.omega,
                };
                let ret = |task| crate::evaluate::evaluate_zero_shot(&agent, dataset, task, &opts).map(|r| Some(r.mean));
                row.eval_reach_tl = ret(TaskId::ReachTopLeft)?;
                row.eval_reach_tr = ret(TaskId::ReachTopRight)?;
                row.eval_reach_bl = ret(TaskId::ReachBottomLeft)?;
                row.eval_reach_br = ret(TaskId::ReachBottomRight)?;
                row.eval_run_right = ret(TaskId::RunRight)?;
            }
            if opts.verbose {
                eprintln!(
                    "step {:>6}  rep {:.4}  nu {:.4}  psi {:.4}  q {:.4}  bc1 {:.4}  bc2 {:.4}  attn {:.3}  {:.1}s",
                    row.step, row.rep_total, row.l_nu, row.l_psi, row.l_q, row.l_bc1, row.l_bc2, row.attention_mass, row.wall_clock_s
                );
            }
            if let Some(w) = writer.as_mut() {
                w.serialize(&row).map_err(|e| TrainError::Io(e.into()))?;
                w.flush()?;
            }
            metrics.push(row);
        }
        if let Some(dir) = &opts.out_dir {
            if config.checkpoint_interval > 0 && (it + 1) % config.checkpoint_interval == 0 {
                trainer.agent().save(dir.join(CHECKPOINT_FILE))?;
            }
        }
    }
    let agent = trainer.agent();
    if let Some(dir) = &opts.out_dir {
        agent.save(dir.join(CHECKPOINT_FILE))?;
    }
    Ok(PretrainOutcome {
        agent,
        metrics,
        trace: trainer.trace().to_vec(),
    })
}
