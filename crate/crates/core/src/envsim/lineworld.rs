//! LineWorld: a 1-D corridor used for the linear-model sanity path.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Action, Environment, Frame, Observation, StepResult, FRAME_STACK};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "view", rename_all = "lowercase")]
pub enum LineWorldView {
    /// One-hot position strip of shape `1 x n`.
    Features,
    /// Rendered `size x size` frame.
    Frame { size: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LineWorldConfig {
    pub length: usize,
    pub goal: usize,
    pub observation: LineWorldView,
}

impl Default for LineWorldConfig {
    fn default() -> Self {
        Self {
            length: 9,
            goal: 4,
            observation: LineWorldView::Features,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LineWorld {
    cfg: LineWorldConfig,
    position: usize,
    done: bool,
    score: f64,
    previous: Frame,
    current: Frame,
}

impl LineWorld {
    pub fn new(cfg: LineWorldConfig) -> Result<Self> {
        if cfg.length < 2 || cfg.goal >= cfg.length {
            return Err(Error::InvalidConfig(
                "lineworld: need length >= 2 and goal < length".into(),
            ));
        }
        if let LineWorldView::Frame { size } = cfg.observation {
            if size < cfg.length.min(4) {
                return Err(Error::InvalidConfig("lineworld: frame too small".into()));
            }
        }
        let blank = Frame::blank(1, 1);
        let mut env = Self {
            cfg,
            position: 0,
            done: false,
            score: 0.0,
            previous: blank.clone(),
            current: blank,
        };
        env.reset(0);
        Ok(env)
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn set_position(&mut self, position: usize) {
        self.position = position.min(self.cfg.length - 1);
        self.done = false;
        self.current = self.render();
        self.previous = self.current.clone();
    }

    fn render(&self) -> Frame {
        let n = self.cfg.length;
        match self.cfg.observation {
            LineWorldView::Features => {
                let mut f = Frame::blank(1, n);
                f.pixels[self.position] = 1.0;
                f
            }
            LineWorldView::Frame { size } => {
                let mut f = Frame::blank(size, size);
                let col = |p: usize| ((p * size) / n) as isize;
                let mid = (size / 2) as isize;
                f.fill_rect(
                    mid + 2..=mid + 2,
                    col(self.cfg.goal)..=col(self.cfg.goal),
                    0.6,
                );
                let c = col(self.position);
                f.fill_rect(mid - 1..=mid, c..=c + 1, 1.0);
                f
            }
        }
    }
}

impl Environment for LineWorld {
    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.position = rng.random_range(0..self.cfg.length);
        self.done = false;
        self.score = 0.0;
        self.current = self.render();
        self.previous = self.current.clone();
        self.observation()
    }

    fn step(&mut self, action: Action) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let mut delta = 0.0;
        match action {
            Action::NoAction => {}
            Action::Up => self.position = self.position.saturating_sub(1),
            Action::Down => self.position = (self.position + 1).min(self.cfg.length - 1),
            Action::Bowl => {
                delta = (self.cfg.length - self.position.abs_diff(self.cfg.goal)) as f64;
                self.score += delta;
                self.done = true;
            }
        }
        let next = self.render();
        self.previous = std::mem::replace(&mut self.current, next);
        let mut info = BTreeMap::new();
        info.insert("position".into(), self.position as f64);
        Ok(StepResult {
            observation: self.observation(),
            score_delta: delta,
            episode_done: self.done,
            info,
        })
    }

    fn observation(&self) -> Observation {
        Observation::stack(&self.previous, &self.current).expect("frames share a shape")
    }

    fn optimal_action(&self) -> Action {
        if self.done {
            return Action::NoAction;
        }
        match self.position.cmp(&self.cfg.goal) {
            std::cmp::Ordering::Less => Action::Down,
            std::cmp::Ordering::Greater => Action::Up,
            std::cmp::Ordering::Equal => Action::Bowl,
        }
    }

    fn observation_shape(&self) -> (usize, usize, usize) {
        match self.cfg.observation {
            LineWorldView::Features => (FRAME_STACK, 1, self.cfg.length),
            LineWorldView::Frame { size } => (FRAME_STACK, size, size),
        }
    }

    fn is_done(&self) -> bool {
        self.done
    }

    fn episode_score(&self) -> f64 {
        self.score
    }

    fn max_episode_score(&self) -> f64 {
        self.cfg.length as f64
    }
}
