//! Reward-free offline datasets of DotWorld transitions.
//!
//! Ground-truth states are stored next to the pixels for reward labeling and
//! probing, but the learner only ever sees a [`LearnerView`], which exposes
//! observations and actions and nothing else:
//!
//! ```compile_fail
//! # use srcp::dataset::{generate_dataset, Generator};
//! # use srcp::env::EnvConfig;
//! let ds = generate_dataset(&EnvConfig::default(), Generator::UniformRandom, 100, 0).unwrap();
//! let view = ds.learner_view();
//! let _ = view.states(); // no such method
//! ```

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{task_reward, DotWorld, EnvConfig, PhysState, TaskId, ACTION_DIM};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"SRDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt dataset at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error("dataset version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("dataset checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("dataset is empty")]
    Empty,
    #[error("invalid request: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// Independent uniform actions every step.
    UniformRandom,
    /// Temporally correlated Ornstein-Uhlenbeck actions.
    OuNoise,
    /// Noisy controller chasing random waypoints.
    GoalSweep,
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::UniformRandom => "uniform-random",
            Generator::OuNoise => "ou-noise",
            Generator::GoalSweep => "goal-sweep",
        }
    }

    fn code(self) -> u8 {
        match self {
            Generator::UniformRandom => 0,
            Generator::OuNoise => 1,
            Generator::GoalSweep => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Generator::UniformRandom),
            1 => Some(Generator::OuNoise),
            2 => Some(Generator::GoalSweep),
            _ => None,
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Generator {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Generator::UniformRandom, Generator::OuNoise, Generator::GoalSweep]
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| DatasetError::Invalid(format!("unknown generator `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub env: EnvConfig,
    pub env_hash: u64,
    pub generator: Generator,
    pub seed: u64,
    pub count: usize,
    /// Fraction of the `G x G` position bins visited.
    pub coverage: f64,
}

/// Transitions stored column-wise. Observations are kept as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    meta: DatasetMeta,
    obs_dim: usize,
    obs: Vec<f32>,
    next_obs: Vec<f32>,
    actions: Vec<[f64; 2]>,
    states: Vec<PhysState>,
    next_states: Vec<PhysState>,
    episode_starts: Vec<usize>,
}

/// Learner-side batch: pixels and actions only.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub obs: Tensor<f64>,
    pub actions: Tensor<f64>,
    pub next_obs: Tensor<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// A training batch plus an independent batch of target state-action pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledBatch {
    pub main: Batch,
    pub target: Batch,
}

/// Reward-labeled transitions (pixels, actions, rewards).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSlice {
    pub task: TaskId,
    pub indices: Vec<usize>,
    pub obs: Tensor<f64>,
    pub actions: Tensor<f64>,
    pub next_obs: Tensor<f64>,
    pub rewards: Vec<f64>,
}

/// Everything the pretraining code may read from a dataset.
#[derive(Clone, Copy, Debug)]
pub struct LearnerView<'a> {
    ds: &'a OfflineDataset,
}

impl<'a> LearnerView<'a> {
    pub fn len(&self) -> usize {
        self.ds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ds.len() == 0
    }

    pub fn obs_dim(&self) -> usize {
        self.ds.obs_dim
    }

    pub fn env_hash(&self) -> u64 {
        self.ds.meta.env_hash
    }

    pub fn sample(&self, batch_size: usize, rng: &mut RngStream) -> Result<SampledBatch, DatasetError> {
        self.ds.sample_batch(batch_size, rng)
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        self.ds.gather(indices)
    }

    /// Observation batch for arbitrary indices; `next` selects `o'`.
    pub fn gather_obs(&self, indices: &[usize], next: bool) -> Tensor<f64> {
        self.ds.gather_obs(indices, next)
    }

    /// Index of a transition `k >= 0` steps later in the same episode,
    /// with `k` geometric in `gamma` and truncated at the episode end.
    pub fn future_index(&self, i: usize, gamma: f64, rng: &mut RngStream) -> usize {
        self.ds.future_index(i, gamma, rng)
    }
}

fn f32_obs(obs: &[f64]) -> impl Iterator<Item = f32> + '_ {
    obs.iter().map(|&v| v as f32)
}

fn position_bin(s: &PhysState, g: usize) -> usize {
    let b = |v: f64| ((v * g as f64).floor() as usize).min(g - 1);
    b(s.pos[1]) * g + b(s.pos[0])
}

/// Per-generator behavior policy.
struct Behavior {
    kind: Generator,
    rng: RngStream,
    prev: [f64; 2],
    waypoint: [f64; 2],
    since_switch: usize,
}

impl Behavior {
    const OU_THETA: f64 = 0.15;
    const OU_SIGMA: f64 = 0.3;
    const SWEEP_NOISE: f64 = 0.3;
    const SWEEP_PATIENCE: usize = 30;

    fn new(kind: Generator, rng: RngStream) -> Self {
        let mut b = Self {
            kind,
            rng,
            prev: [0.0; 2],
            waypoint: [0.5; 2],
            since_switch: 0,
        };
        b.new_waypoint();
        b
    }

    fn new_waypoint(&mut self) {
        // slightly beyond the walls so edges and corners get visited
        self.waypoint = [self.rng.uniform_in(-0.1, 1.1), self.rng.uniform_in(-0.1, 1.1)];
        self.since_switch = 0;
    }

    fn act(&mut self, s: &PhysState) -> [f64; 2] {
        let a = match self.kind {
            Generator::UniformRandom => [self.rng.uniform_in(-1.0, 1.0), self.rng.uniform_in(-1.0, 1.0)],
            Generator::OuNoise => {
                let mut a = [0.0; 2];
                for (i, ai) in a.iter_mut().enumerate() {
                    *ai = self.prev[i] - Self::OU_THETA * self.prev[i] + Self::OU_SIGMA * self.rng.normal();
                }
                a
            }
            Generator::GoalSweep => {
                let target = [self.waypoint[0].clamp(0.0, 1.0), self.waypoint[1].clamp(0.0, 1.0)];
                let dist = ((target[0] - s.pos[0]).powi(2) + (target[1] - s.pos[1]).powi(2)).sqrt();
                self.since_switch += 1;
                if dist < 0.05 || self.since_switch > Self::SWEEP_PATIENCE {
                    self.new_waypoint();
                }
                let mut a = [0.0; 2];
                for (i, ai) in a.iter_mut().enumerate() {
                    let err = self.waypoint[i] - s.pos[i];
                    *ai = 4.0 * err - 20.0 * s.vel[i] + Self::SWEEP_NOISE * self.rng.normal();
                }
                a
            }
        };
        let a = [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)];
        self.prev = a;
        a
    }
}

/// Roll out `ceil(n / H)` episodes with the chosen behavior and keep the
/// first `n` transitions. Every episode draws from its own split stream.
pub fn generate_dataset(
    env: &EnvConfig,
    generator: Generator,
    n_transitions: usize,
    seed: u64,
) -> Result<OfflineDataset, DatasetError> {
    env.validate().map_err(|e| DatasetError::Invalid(e.to_string()))?;
    if n_transitions < env.episode_length {
        return Err(DatasetError::Invalid(format!(
            "n_transitions {n_transitions} < episode length {}",
            env.episode_length
        )));
    }
    let root = RngStream::new(seed).split_named(generator.name());
    let p = env.obs_dim();
    let mut ds = OfflineDataset {
        meta: DatasetMeta {
            env: env.clone(),
            env_hash: env.hash(),
            generator,
            seed,
            count: 0,
            coverage: 0.0,
        },
        obs_dim: p,
        obs: Vec::with_capacity(n_transitions * p),
        next_obs: Vec::with_capacity(n_transitions * p),
        actions: Vec::with_capacity(n_transitions),
        states: Vec::with_capacity(n_transitions),
        next_states: Vec::with_capacity(n_transitions),
        episode_starts: Vec::new(),
    };
    let mut episode = 0u64;
    while ds.actions.len() < n_transitions {
        let ep_rng = root.split(episode);
        let mut world = DotWorld::reset(env, ep_rng.split_named("reset").key());
        let mut behavior = Behavior::new(generator, ep_rng.split_named("behavior"));
        ds.episode_starts.push(ds.actions.len());
        let mut o = world.observation();
        while !world.done() && ds.actions.len() < n_transitions {
            let s = world.state();
            let a = behavior.act(&s);
            let o2 = world.step(a);
            ds.obs.extend(f32_obs(&o));
            ds.next_obs.extend(f32_obs(&o2));
            ds.actions.push(a);
            ds.states.push(s);
            ds.next_states.push(world.state());
            o = o2;
        }
        episode += 1;
    }
    ds.meta.count = ds.actions.len();
    ds.meta.coverage = ds.coverage();
    Ok(ds)
}

impl OfflineDataset {
    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn episode_starts(&self) -> &[usize] {
        &self.episode_starts
    }

    pub fn learner_view(&self) -> LearnerView<'_> {
        LearnerView { ds: self }
    }

    pub fn observation(&self, i: usize) -> &[f32] {
        &self.obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn next_observation(&self, i: usize) -> &[f32] {
        &self.next_obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn action(&self, i: usize) -> [f64; 2] {
        self.actions[i]
    }

    /// Ground-truth state before transition `i`. Evaluation and probing only.
    pub fn state(&self, i: usize) -> PhysState {
        self.states[i]
    }

    pub fn next_state(&self, i: usize) -> PhysState {
        self.next_states[i]
    }

    /// Fraction of position bins visited by any stored state.
    pub fn coverage(&self) -> f64 {
        let g = self.meta.env.grid_size;
        let mut seen = vec![false; g * g];
        for s in self.states.iter().chain(&self.next_states) {
            seen[position_bin(s, g)] = true;
        }
        seen.iter().filter(|&&b| b).count() as f64 / (g * g) as f64
    }

    fn episode_end(&self, i: usize) -> usize {
        let k = self.episode_starts.partition_point(|&s| s <= i);
        self.episode_starts.get(k).copied().unwrap_or(self.len())
    }

    pub fn future_index(&self, i: usize, gamma: f64, rng: &mut RngStream) -> usize {
        let end = self.episode_end(i);
        let mut j = i;
        while j + 1 < end && rng.uniform() < gamma {
            j += 1;
        }
        j
    }

    pub fn gather_obs(&self, indices: &[usize], next: bool) -> Tensor<f64> {
        let src = if next { &self.next_obs } else { &self.obs };
        let p = self.obs_dim;
        let mut data = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            data.extend(src[i * p..(i + 1) * p].iter().map(|&v| v as f64));
        }
        Tensor::new(vec![indices.len(), p], data).unwrap()
    }

    fn gather_actions(&self, indices: &[usize]) -> Tensor<f64> {
        let data = indices.iter().flat_map(|&i| self.actions[i]).collect();
        Tensor::new(vec![indices.len(), ACTION_DIM], data).unwrap()
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        Batch {
            indices: indices.to_vec(),
            obs: self.gather_obs(indices, false),
            actions: self.gather_actions(indices),
            next_obs: self.gather_obs(indices, true),
        }
    }

    /// Uniform indices with replacement.
    pub fn sample_indices(&self, batch_size: usize, rng: &mut RngStream) -> Result<Vec<usize>, DatasetError> {
        if self.is_empty() {
            return Err(DatasetError::Empty);
        }
        if batch_size > self.len() {
            return Err(DatasetError::Invalid(format!(
                "batch size {batch_size} exceeds dataset size {}",
                self.len()
            )));
        }
        Ok((0..batch_size).map(|_| rng.index(self.len())).collect())
    }

    /// Every index exactly once, in order.
    pub fn enumerate_all(&self) -> Result<Batch, DatasetError> {
        if self.is_empty() {
            return Err(DatasetError::Empty);
        }
        let idx: Vec<usize> = (0..self.len()).collect();
        Ok(self.gather(&idx))
    }

    /// Two independent uniform batches: the main batch and target pairs.
    pub fn sample_batch(&self, batch_size: usize, rng: &mut RngStream) -> Result<SampledBatch, DatasetError> {
        let main = self.sample_indices(batch_size, rng)?;
        let target = self.sample_indices(batch_size, rng)?;
        Ok(SampledBatch {
            main: self.gather(&main),
            target: self.gather(&target),
        })
    }

    /// Reward for transition `i`, scored on the state the action leads to.
    pub fn reward(&self, i: usize, task: TaskId) -> f64 {
        task_reward(task, &self.next_states[i], &self.meta.env)
    }

    /// Label the given transitions; the dataset itself is not modified.
    pub fn label_rewards(&self, indices: &[usize], task: TaskId) -> Result<LabeledSlice, DatasetError> {
        if indices.is_empty() {
            return Err(DatasetError::Invalid("cannot label an empty slice".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(DatasetError::Invalid(format!("index {bad} out of range")));
        }
        Ok(LabeledSlice {
            task,
            indices: indices.to_vec(),
            obs: self.gather_obs(indices, false),
            actions: self.gather_actions(indices),
            next_obs: self.gather_obs(indices, true),
            rewards: indices.iter().map(|&i| self.reward(i, task)).collect(),
        })
    }

    /// Serialize to the binary layout:
    ///
    /// ```text
    /// "SRDS" | u32 version | u32 meta length | meta JSON
    /// u64 count | u32 obs_dim | u32 episodes | u64 episode starts
    /// f32 obs[count*obs_dim] | f32 next_obs[..] | f64 actions[count*2]
    /// f64 states[count*4] | f64 next_states[count*4] | u32 crc32 of everything before
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.obs.len() * 8 + self.len() * 80);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        let meta = MetaRecord::from(&self.meta);
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.obs_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.episode_starts.len() as u32).to_le_bytes());
        for &s in &self.episode_starts {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for v in self.obs.iter().chain(&self.next_obs) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for a in &self.actions {
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for s in self.states.iter().chain(&self.next_states) {
            for v in s.to_array() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        if bytes.len() < 12 {
            return Err(DatasetError::Corrupt {
                offset: bytes.len(),
                reason: "file shorter than header".into(),
            });
        }
        if &bytes[..4] != DATASET_MAGIC {
            return Err(DatasetError::Corrupt {
                offset: 0,
                reason: format!("bad magic {:?}", &bytes[..4]),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(DatasetError::VersionMismatch {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(DatasetError::Checksum { stored, computed });
        }
        let mut r = Cursor { buf: body, pos: 8 };
        let meta_len = r.u32()? as usize;
        let meta_bytes = r.take(meta_len)?;
        let meta: MetaRecord = serde_json::from_slice(meta_bytes).map_err(|e| DatasetError::Corrupt {
            offset: 12,
            reason: format!("metadata: {e}"),
        })?;
        let meta = meta.into_meta(12)?;
        let count = r.u64()? as usize;
        let obs_dim = r.u32()? as usize;
        if count != meta.count || obs_dim != meta.env.obs_dim() {
            return Err(DatasetError::Corrupt {
                offset: r.pos,
                reason: "payload sizes disagree with metadata".into(),
            });
        }
        let n_episodes = r.u32()? as usize;
        let mut episode_starts = Vec::with_capacity(n_episodes);
        for _ in 0..n_episodes {
            episode_starts.push(r.u64()? as usize);
        }
        let n_obs = count.checked_mul(obs_dim).ok_or(DatasetError::Corrupt {
            offset: r.pos,
            reason: "size overflow".into(),
        })?;
        let obs = r.f32s(n_obs)?;
        let next_obs = r.f32s(n_obs)?;
        let flat_actions = r.f64s(count * 2)?;
        let flat_states = r.f64s(count * 8)?;
        if r.pos != body.len() {
            return Err(DatasetError::Corrupt {
                offset: r.pos,
                reason: "trailing bytes before checksum".into(),
            });
        }
        let actions = flat_actions.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let mut states: Vec<PhysState> = flat_states
            .chunks_exact(4)
            .map(|c| PhysState::from_array([c[0], c[1], c[2], c[3]]))
            .collect();
        let next_states = states.split_off(count);
        Ok(Self {
            meta,
            obs_dim,
            obs,
            next_obs,
            actions,
            states,
            next_states,
            episode_starts,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct MetaRecord {
    env: EnvConfig,
    env_hash: u64,
    generator: u8,
    seed: u64,
    count: u64,
    coverage: f64,
}

impl From<&DatasetMeta> for MetaRecord {
    fn from(m: &DatasetMeta) -> Self {
        Self {
            env: m.env.clone(),
            env_hash: m.env_hash,
            generator: m.generator.code(),
            seed: m.seed,
            count: m.count as u64,
            coverage: m.coverage,
        }
    }
}

impl MetaRecord {
    fn into_meta(self, offset: usize) -> Result<DatasetMeta, DatasetError> {
        let generator = Generator::from_code(self.generator).ok_or(DatasetError::Corrupt {
            offset,
            reason: format!("unknown generator code {}", self.generator),
        })?;
        if self.env.hash() != self.env_hash {
            return Err(DatasetError::Corrupt {
                offset,
                reason: "env hash does not match env config".into(),
            });
        }
        Ok(DatasetMeta {
            env: self.env,
            env_hash: self.env_hash,
            generator,
            seed: self.seed,
            count: self.count as usize,
            coverage: self.coverage,
        })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(DatasetError::Corrupt {
                offset: self.pos,
                reason: format!("need {n} bytes, {} left", self.buf.len() - self.pos),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, DatasetError> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, DatasetError> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
