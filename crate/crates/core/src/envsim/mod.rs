//! Deterministic desk-scale environments.
//!
//! Every environment exposes the same interaction shape: a stack of the two
//! most recent grayscale frames as the state, four discrete actions, and an
//! episodic game score that is used for evaluation only.

mod lineworld;
mod minibowl;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use lineworld::{LineWorld, LineWorldConfig, LineWorldView};
pub use minibowl::{MiniBowl, MiniBowlConfig, Phase};

/// Number of stacked frames in an [`Observation`].
pub const FRAME_STACK: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    NoAction = 0,
    Up = 1,
    Down = 2,
    Bowl = 3,
}

impl Action {
    pub const COUNT: usize = 4;
    pub const ALL: [Action; 4] = [Action::NoAction, Action::Up, Action::Down, Action::Bowl];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Action::NoAction => "no_action",
            Action::Up => "up",
            Action::Down => "down",
            Action::Bowl => "bowl",
        };
        f.write_str(name)
    }
}

/// A single grayscale frame, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Frame {
    pub fn blank(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::shape(
                format!("{} pixels ({height}x{width})", height * width),
                format!("{} pixels", pixels.len()),
            ));
        }
        let pixels = pixels.into_iter().map(clamp_unit).collect();
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// Sets a pixel, silently ignoring coordinates outside the frame.
    pub fn put(&mut self, row: isize, col: isize, value: f64) {
        if row >= 0 && col >= 0 && (row as usize) < self.height && (col as usize) < self.width {
            self.pixels[row as usize * self.width + col as usize] = clamp_unit(value);
        }
    }

    pub fn fill_rect(
        &mut self,
        rows: std::ops::RangeInclusive<isize>,
        cols: std::ops::RangeInclusive<isize>,
        value: f64,
    ) {
        for r in rows {
            for c in cols.clone() {
                self.put(r, c, value);
            }
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// 8-bit quantization used on the wire.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (clamp_unit(v) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_gray8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let pixels = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::from_pixels(height, width, pixels)
    }
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Agent state: the previous and the current frame, channel-major
/// `[2, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    height: usize,
    width: usize,
    data: Arc<[f64]>,
}

impl Observation {
    pub fn stack(previous: &Frame, current: &Frame) -> Result<Self> {
        if previous.height != current.height || previous.width != current.width {
            return Err(Error::shape(
                format!("{}x{}", current.height, current.width),
                format!("{}x{}", previous.height, previous.width),
            ));
        }
        let mut data = Vec::with_capacity(FRAME_STACK * current.pixels.len());
        data.extend(previous.pixels.iter().copied().map(clamp_unit));
        data.extend(current.pixels.iter().copied().map(clamp_unit));
        Ok(Self {
            height: current.height,
            width: current.width,
            data: data.into(),
        })
    }

    /// Builds an observation from raw channel-major data of length
    /// `2 * height * width`.
    pub fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let expected = FRAME_STACK * height * width;
        if data.len() != expected {
            return Err(Error::shape(expected, data.len()));
        }
        let data: Vec<f64> = data.into_iter().map(clamp_unit).collect();
        Ok(Self {
            height,
            width,
            data: data.into(),
        })
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (FRAME_STACK, self.height, self.width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The most recent frame.
    pub fn current(&self) -> Frame {
        let n = self.height * self.width;
        Frame {
            height: self.height,
            width: self.width,
            pixels: self.data[n..].to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub observation: Observation,
    pub score_delta: f64,
    pub episode_done: bool,
    pub info: BTreeMap<String, f64>,
}

/// Common interface of the simulated environments. Instances are
/// single-owner; nothing here is meant to be stepped concurrently.
pub trait Environment {
    fn reset(&mut self, seed: u64) -> Observation;
    fn step(&mut self, action: Action) -> Result<StepResult>;
    fn observation(&self) -> Observation;
    /// Ground-truth best action from the current state.
    fn optimal_action(&self) -> Action;
    /// `(channels, height, width)` of observations.
    fn observation_shape(&self) -> (usize, usize, usize);
    fn num_actions(&self) -> usize {
        Action::COUNT
    }
    fn is_done(&self) -> bool;
    fn episode_score(&self) -> f64;
    fn max_episode_score(&self) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvConfig {
    #[serde(rename = "minibowl")]
    MiniBowl(MiniBowlConfig),
    #[serde(rename = "lineworld")]
    LineWorld(LineWorldConfig),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::MiniBowl(MiniBowlConfig::default())
    }
}

impl EnvConfig {
    pub fn build(&self) -> Result<Env> {
        Ok(match self {
            EnvConfig::MiniBowl(c) => Env::MiniBowl(MiniBowl::new(c.clone())?),
            EnvConfig::LineWorld(c) => Env::LineWorld(LineWorld::new(c.clone())?),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::MiniBowl(_) => "minibowl",
            EnvConfig::LineWorld(_) => "lineworld",
        }
    }
}

/// Closed set of environments selectable from configuration.
#[derive(Debug, Clone)]
pub enum Env {
    MiniBowl(MiniBowl),
    LineWorld(LineWorld),
}

macro_rules! dispatch {
    ($self:ident, $env:ident => $body:expr) => {
        match $self {
            Env::MiniBowl($env) => $body,
            Env::LineWorld($env) => $body,
        }
    };
}

impl Environment for Env {
    fn reset(&mut self, seed: u64) -> Observation {
        dispatch!(self, e => e.reset(seed))
    }
    fn step(&mut self, action: Action) -> Result<StepResult> {
        dispatch!(self, e => e.step(action))
    }
    fn observation(&self) -> Observation {
        dispatch!(self, e => e.observation())
    }
    fn optimal_action(&self) -> Action {
        dispatch!(self, e => e.optimal_action())
    }
    fn observation_shape(&self) -> (usize, usize, usize) {
        dispatch!(self, e => e.observation_shape())
    }
    fn is_done(&self) -> bool {
        dispatch!(self, e => e.is_done())
    }
    fn episode_score(&self) -> f64 {
        dispatch!(self, e => e.episode_score())
    }
    fn max_episode_score(&self) -> f64 {
        dispatch!(self, e => e.max_episode_score())
    }
}
