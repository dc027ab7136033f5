//! DotWorld: a point mass in the unit square rendered as a small RGB-like
//! image with three channels.
//!
//! * channel 0: the agent, bilinearly splatted over at most 2x2 pixels
//! * channel 1: fixed beacons on the four reach corners
//! * channel 2: a distractor pattern that never influences the dynamics
//!
//! Observations are flattened row-major `(row, col, channel)`. Row 0 is the
//! top of the arena (`y = 1`), column 0 the left edge (`x = 0`).

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;

pub const CHANNELS: usize = 3;
pub const AGENT_CHANNEL: usize = 0;
pub const GOAL_CHANNEL: usize = 1;
pub const DISTRACTOR_CHANNEL: usize = 2;
pub const ACTION_DIM: usize = 2;
/// Distance at which reach rewards fall to zero.
pub const REACH_RADIUS: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("invalid env config: {0}")]
    InvalidConfig(String),
    #[error("unknown distractor mode `{0}`")]
    UnknownDistractor(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistractorMode {
    /// One random pattern per episode.
    StaticPattern,
    /// A fresh pattern every step.
    Flicker,
}

impl FromStr for DistractorMode {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "static-pattern" | "static" => Ok(Self::StaticPattern),
            "flicker" => Ok(Self::Flicker),
            other => Err(EnvError::UnknownDistractor(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub grid_size: usize,
    pub distractor: DistractorMode,
    pub episode_length: usize,
    /// Speed cap, in arena widths per step.
    pub v_max: f64,
    pub dt: f64,
    /// Fraction of distractor pixels lit.
    pub distractor_density: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            grid_size: 12,
            distractor: DistractorMode::Flicker,
            episode_length: 100,
            v_max: 0.15,
            dt: 1.0,
            distractor_density: 0.2,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.grid_size < 4 {
            return Err(EnvError::InvalidConfig(format!("grid_size {} < 4", self.grid_size)));
        }
        if self.episode_length < 1 {
            return Err(EnvError::InvalidConfig("episode_length must be >= 1".into()));
        }
        if !(self.v_max > 0.0 && self.dt > 0.0) {
            return Err(EnvError::InvalidConfig("v_max and dt must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_density) {
            return Err(EnvError::InvalidConfig("distractor_density must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Flattened observation length `G * G * 3`.
    pub fn obs_dim(&self) -> usize {
        self.grid_size * self.grid_size * CHANNELS
    }

    /// Stable 64-bit fingerprint stored in dataset metadata.
    pub fn hash(&self) -> u64 {
        let text = format!(
            "{}|{:?}|{}|{:016x}|{:016x}|{:016x}",
            self.grid_size,
            self.distractor,
            self.episode_length,
            self.v_max.to_bits(),
            self.dt.to_bits(),
            self.distractor_density.to_bits()
        );
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01B3);
        }
        h
    }
}

/// Ground-truth physical state. Never fed to the learner.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct PhysState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
}

impl PhysState {
    pub fn to_array(self) -> [f64; 4] {
        [self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            pos: [a[0], a[1]],
            vel: [a[2], a[3]],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskId {
    #[serde(rename = "reach-TL")]
    ReachTopLeft,
    #[serde(rename = "reach-TR")]
    ReachTopRight,
    #[serde(rename = "reach-BL")]
    ReachBottomLeft,
    #[serde(rename = "reach-BR")]
    ReachBottomRight,
    #[serde(rename = "run-right")]
    RunRight,
}

impl TaskId {
    pub const ALL: [TaskId; 5] = [
        TaskId::ReachTopLeft,
        TaskId::ReachTopRight,
        TaskId::ReachBottomLeft,
        TaskId::ReachBottomRight,
        TaskId::RunRight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::ReachTopLeft => "reach-TL",
            TaskId::ReachTopRight => "reach-TR",
            TaskId::ReachBottomLeft => "reach-BL",
            TaskId::ReachBottomRight => "reach-BR",
            TaskId::RunRight => "run-right",
        }
    }

    /// Target corner for reach tasks.
    pub fn corner(self) -> Option<[f64; 2]> {
        match self {
            TaskId::ReachTopLeft => Some([0.0, 1.0]),
            TaskId::ReachTopRight => Some([1.0, 1.0]),
            TaskId::ReachBottomLeft => Some([0.0, 0.0]),
            TaskId::ReachBottomRight => Some([1.0, 0.0]),
            TaskId::RunRight => None,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| EnvError::UnknownTask(s.to_string()))
    }
}

/// Reward in `[0, 1]`.
pub fn task_reward(task: TaskId, state: &PhysState, config: &EnvConfig) -> f64 {
    match task.corner() {
        Some(c) => {
            let d = ((state.pos[0] - c[0]).powi(2) + (state.pos[1] - c[1]).powi(2)).sqrt();
            (1.0 - d / REACH_RADIUS).max(0.0)
        }
        None => (state.vel[0].max(0.0) / config.v_max).min(1.0),
    }
}

/// Deterministic point-mass update. Returns the next state and whether the
/// action had to be clamped into `[-1, 1]^2`.
pub fn dynamics(state: &PhysState, action: [f64; 2], config: &EnvConfig) -> (PhysState, bool) {
    let mut clamped = false;
    let mut next = *state;
    for i in 0..2 {
        let a = if action[i].is_nan() { 0.0 } else { action[i] };
        let ac = a.clamp(-1.0, 1.0);
        clamped |= ac != action[i];
        let v = 0.8 * state.vel[i] + 0.2 * ac * config.v_max;
        next.vel[i] = v.clamp(-config.v_max, config.v_max);
        next.pos[i] = (state.pos[i] + next.vel[i] * config.dt).clamp(0.0, 1.0);
    }
    (next, clamped)
}

/// Bilinear splat weights: up to four `(row, col, weight)` entries with
/// positive weight, summing to one.
pub fn agent_splat(pos: [f64; 2], grid: usize) -> Vec<(usize, usize, f64)> {
    let span = (grid - 1) as f64;
    let u = pos[0].clamp(0.0, 1.0) * span;
    let v = (1.0 - pos[1].clamp(0.0, 1.0)) * span;
    let c0 = (u.floor() as usize).min(grid - 2);
    let r0 = (v.floor() as usize).min(grid - 2);
    let fu = u - c0 as f64;
    let fv = v - r0 as f64;
    let mut out = Vec::with_capacity(4);
    for (r, wr) in [(r0, 1.0 - fv), (r0 + 1, fv)] {
        for (c, wc) in [(c0, 1.0 - fu), (c0 + 1, fu)] {
            let w = wr * wc;
            if w > 0.0 {
                out.push((r, c, w));
            }
        }
    }
    out
}

/// Flat indices (into an observation) of the agent channel's nonzero pixels.
pub fn agent_footprint(pos: [f64; 2], grid: usize) -> Vec<usize> {
    agent_splat(pos, grid)
        .into_iter()
        .map(|(r, c, _)| (r * grid + c) * CHANNELS + AGENT_CHANNEL)
        .collect()
}

/// Draw one distractor pattern (`G * G` values in `[0, 1]`).
pub fn draw_distractor(config: &EnvConfig, stream: &mut RngStream) -> Vec<f64> {
    let n = config.grid_size * config.grid_size;
    (0..n)
        .map(|_| {
            let lit = stream.uniform() < config.distractor_density;
            let level = stream.uniform_in(0.5, 1.0);
            if lit {
                level
            } else {
                0.0
            }
        })
        .collect()
}

/// Render an observation from a state and a distractor pattern.
pub fn render(config: &EnvConfig, state: &PhysState, distractor: &[f64]) -> Vec<f64> {
    let g = config.grid_size;
    let mut obs = vec![0.0; config.obs_dim()];
    for (r, c, w) in agent_splat(state.pos, g) {
        obs[(r * g + c) * CHANNELS + AGENT_CHANNEL] += w;
    }
    for (r, c) in [(0, 0), (0, g - 1), (g - 1, 0), (g - 1, g - 1)] {
        obs[(r * g + c) * CHANNELS + GOAL_CHANNEL] = 1.0;
    }
    for (i, &d) in distractor.iter().enumerate().take(g * g) {
        obs[i * CHANNELS + DISTRACTOR_CHANNEL] = d.clamp(0.0, 1.0);
    }
    obs
}

/// One DotWorld episode.
#[derive(Clone, Debug)]
pub struct DotWorld {
    config: EnvConfig,
    state: PhysState,
    distractor_stream: RngStream,
    pattern: Vec<f64>,
    t: usize,
    clamp_warnings: usize,
}

impl DotWorld {
    /// Start an episode: uniform position, zero velocity. The distractor
    /// stream is split from the seed independently of the agent stream.
    pub fn reset(config: &EnvConfig, seed: u64) -> Self {
        let root = RngStream::new(seed);
        let mut agent = root.split_named("agent");
        let mut distractor_stream = root.split_named("distractor");
        let state = PhysState {
            pos: [agent.uniform(), agent.uniform()],
            vel: [0.0, 0.0],
        };
        Self::from_state(config, state, &mut distractor_stream)
    }

    /// Start from an explicit state with a caller-provided distractor stream.
    pub fn from_state(config: &EnvConfig, state: PhysState, distractor: &mut RngStream) -> Self {
        let stream = distractor.split(0);
        let mut world = Self {
            config: config.clone(),
            state,
            distractor_stream: stream,
            pattern: Vec::new(),
            t: 0,
            clamp_warnings: 0,
        };
        world.pattern = draw_distractor(&world.config, &mut world.distractor_stream);
        world
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> PhysState {
        self.state
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn done(&self) -> bool {
        self.t >= self.config.episode_length
    }

    /// Count of actions that had to be clamped into the action box.
    pub fn clamp_warnings(&self) -> usize {
        self.clamp_warnings
    }

    pub fn observation(&self) -> Vec<f64> {
        render(&self.config, &self.state, &self.pattern)
    }

    /// Advance one step and return the new observation.
    pub fn step(&mut self, action: [f64; 2]) -> Vec<f64> {
        let (next, clamped) = dynamics(&self.state, action, &self.config);
        if clamped {
            self.clamp_warnings += 1;
        }
        self.state = next;
        self.t += 1;
        if self.config.distractor == DistractorMode::Flicker {
            self.pattern = draw_distractor(&self.config, &mut self.distractor_stream);
        }
        self.observation()
    }
}

/// Write an observation as a binary PPM (P6), upscaled by `scale`.
/// Agent maps to red, beacons to green, distractor to blue.
pub fn write_ppm<W: Write>(out: &mut W, obs: &[f64], grid: usize, scale: usize) -> io::Result<()> {
    let side = grid * scale;
    write!(out, "P6\n{side} {side}\n255\n")?;
    let mut row_buf = Vec::with_capacity(side * 3);
    for r in 0..side {
        row_buf.clear();
        for c in 0..side {
            let base = ((r / scale) * grid + c / scale) * CHANNELS;
            for ch in 0..CHANNELS {
                let v = obs.get(base + ch).copied().unwrap_or(0.0).clamp(0.0, 1.0);
                row_buf.push((v * 255.0).round() as u8);
            }
        }
        out.write_all(&row_buf)?;
    }
    Ok(())
}
