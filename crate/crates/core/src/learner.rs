//! The interactive learner: greedy action selection over `H`, experience
//! stamping, credit-weighted updates on each feedback, and periodic replay
//! from the feedback buffer. The window-loss TAMER update is provided as
//! the baseline.

use std::collections::VecDeque;
use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::credit::{DelayDistribution, Stamp};
use crate::envsim::{Action, Observation};
use crate::error::{Error, Result};
use crate::model::{Gradient, RewardModel, WeightedSample};

/// Weights at or below this are treated as zero when crediting. Steps are
/// stamped from their index, so an experience ending exactly at a support
/// boundary can pick up a rounding residue of order 1e-16 that would
/// otherwise enter the buffer.
pub const NEGLIGIBLE_WEIGHT: f64 = 1e-12;

/// Tail mass ignored when sizing the window for unbounded delay models.
pub const SUPPORT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub state: Observation,
    pub action: Action,
    pub stamp: Stamp,
    pub step_index: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackSource {
    Human,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    #[serde(rename = "h")]
    pub value: f64,
    pub t_feedback: f64,
    pub source: FeedbackSource,
}

/// What the learner keeps of an experience: its stamp, action, and the
/// model's frozen features of the state.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub step_index: u64,
    pub action: Action,
    pub stamp: Stamp,
    pub features: Arc<[f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub sample: Arc<Sample>,
    pub h: f64,
    pub weight: f64,
}

/// Every (experience, feedback) pair with nonzero weight, grouped by the
/// feedback it came from. Never evicts.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    entries: Vec<BufferEntry>,
    groups: Vec<Range<usize>>,
}

impl ReplayBuffer {
    /// Appends one feedback's pairs and returns its group id. Entries with
    /// weight <= 0 are refused.
    pub fn push_group(&mut self, entries: Vec<BufferEntry>) -> Result<usize> {
        if entries.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if let Some(e) = entries
            .iter()
            .find(|e| !(e.weight > 0.0 && e.weight <= 1.0) || !e.h.is_finite())
        {
            return Err(Error::InvalidConfig(format!(
                "buffer entries need weight in (0, 1] and finite h, got w={} h={}",
                e.weight, e.h
            )));
        }
        let start = self.entries.len();
        self.entries.extend(entries);
        self.groups.push(start..self.entries.len());
        Ok(self.groups.len() - 1)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn group(&self, id: usize) -> &[BufferEntry] {
        &self.entries[self.groups[id].clone()]
    }

    /// `count` group ids drawn uniformly with replacement; all pairs of
    /// every drawn group, in draw order.
    pub fn sample_minibatch<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<&BufferEntry> {
        if self.groups.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::new();
        for _ in 0..count {
            let id = rng.random_range(0..self.groups.len());
            out.extend(self.group(id));
        }
        out
    }
}

/// Recent experiences, oldest first, covering `horizon` seconds.
#[derive(Debug, Clone)]
pub struct ExperienceWindow {
    horizon: f64,
    items: VecDeque<Arc<Sample>>,
}

impl ExperienceWindow {
    pub fn new(horizon: f64) -> Self {
        Self {
            horizon,
            items: VecDeque::new(),
        }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<Sample>> {
        self.items.iter()
    }

    /// Appends `sample` and drops items starting more than `horizon` before
    /// its end.
    pub fn push(&mut self, sample: Arc<Sample>) -> Result<()> {
        let Stamp { t_start, t_end } = sample.stamp;
        if !(t_end > t_start) {
            return Err(Error::InvalidStamp { t_start, t_end });
        }
        if let Some(last) = self.items.back() {
            if sample.step_index <= last.step_index || t_start < last.stamp.t_end {
                return Err(Error::NonMonotoneStamp {
                    step: sample.step_index,
                    t_start,
                    previous_end: last.stamp.t_end,
                });
            }
        }
        let cutoff = t_end - self.horizon - 1e-9;
        self.items.push_back(sample);
        while self.items.front().is_some_and(|x| x.stamp.t_start < cutoff) {
            self.items.pop_front();
        }
        Ok(())
    }

    /// Window items credited by feedback at `t_feedback`, with weights.
    pub fn credited(&self, delay: &DelayDistribution, t_feedback: f64) -> Vec<(Arc<Sample>, f64)> {
        self.items
            .iter()
            .filter_map(|x| {
                let w = delay.weight(x.stamp, t_feedback);
                (w > NEGLIGIBLE_WEIGHT).then(|| (Arc::clone(x), w))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    #[default]
    SeededRandom,
    LowestIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Per-pair weighted loss, immediate update plus buffer replay.
    #[default]
    DeepTamer,
    /// Window loss, one update per feedback, no buffer. Linear models only.
    Tamer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub algorithm: Algorithm,
    pub eta: f64,
    pub buffer_interval_steps: u64,
    pub minibatch_feedback_count: usize,
    pub delay_dist: DelayDistribution,
    /// Seconds of history kept for crediting. Defaults to the delay
    /// model's `d_max` plus one 20 Hz step.
    pub experience_horizon: Option<f64>,
    pub tie_break: TieBreak,
    pub rng_seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::DeepTamer,
            eta: 1e-3,
            buffer_interval_steps: 10,
            minibatch_feedback_count: 16,
            delay_dist: DelayDistribution::UNIFORM_DEFAULT,
            experience_horizon: None,
            tie_break: TieBreak::SeededRandom,
            rng_seed: 0,
        }
    }
}

impl LearnerConfig {
    pub const LINEAR_ETA: f64 = 0.05;

    pub fn d_max(&self) -> f64 {
        self.delay_dist.support_window(SUPPORT_EPSILON).1
    }

    pub fn horizon(&self) -> f64 {
        self.experience_horizon.unwrap_or(self.d_max() + 0.05)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        if self.buffer_interval_steps == 0 {
            return Err(Error::InvalidConfig(
                "buffer_interval_steps must be >= 1".into(),
            ));
        }
        if self.minibatch_feedback_count == 0 {
            return Err(Error::InvalidConfig(
                "minibatch_feedback_count must be >= 1".into(),
            ));
        }
        if !(self.horizon() >= self.d_max()) {
            return Err(Error::InvalidConfig(format!(
                "experience_horizon {} is shorter than the delay model's d_max {}",
                self.horizon(),
                self.d_max()
            )));
        }
        Ok(())
    }
}

/// Index of a maximal entry of `values`.
pub fn select_action<R: Rng>(values: &[f64], tie_break: TieBreak, rng: &mut R) -> usize {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut ties = values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == best)
        .map(|(i, _)| i);
    match tie_break {
        TieBreak::LowestIndex => ties.next().unwrap_or(0),
        TieBreak::SeededRandom => {
            let ties: Vec<usize> = ties.collect();
            match ties.len() {
                0 => 0,
                1 => ties[0],
                n => ties[rng.random_range(0..n)],
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateKind {
    Immediate,
    Periodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub kind: UpdateKind,
    pub step: u64,
    pub batch_size: usize,
    pub loss_before: f64,
    pub loss_after: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackOutcome {
    pub credited_pair_count: usize,
    /// Buffer group, when the pairs were stored.
    pub group_id: Option<usize>,
    pub update: Option<UpdateReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LearnerStats {
    pub feedback_count: u64,
    pub empty_feedback_count: u64,
    pub immediate_updates: u64,
    pub periodic_updates: u64,
}

impl LearnerStats {
    pub fn update_count(&self) -> u64 {
        self.immediate_updates + self.periodic_updates
    }
}

#[derive(Debug, Clone)]
pub struct Learner {
    config: LearnerConfig,
    model: RewardModel,
    window: ExperienceWindow,
    buffer: ReplayBuffer,
    tie_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    last_feedback: Option<f64>,
    stats: LearnerStats,
}

impl Learner {
    pub fn new(config: LearnerConfig, model: RewardModel) -> Result<Self> {
        config.validate()?;
        if config.algorithm == Algorithm::Tamer && !matches!(model, RewardModel::Linear(_)) {
            return Err(Error::InvalidConfig(
                "the tamer update needs a linear model".into(),
            ));
        }
        Ok(Self {
            window: ExperienceWindow::new(config.horizon()),
            tie_rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            replay_rng: ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0x9e37_79b9_7f4a_7c15),
            config,
            model,
            buffer: ReplayBuffer::default(),
            last_feedback: None,
            stats: LearnerStats::default(),
        })
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn model(&self) -> &RewardModel {
        &self.model
    }

    pub fn into_model(self) -> RewardModel {
        self.model
    }

    pub fn window(&self) -> &ExperienceWindow {
        &self.window
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn stats(&self) -> LearnerStats {
        self.stats
    }

    /// Greedy action for `state` and the model outputs it was chosen from.
    pub fn act(&mut self, state: &Observation) -> Result<(Action, Vec<f64>)> {
        let q = self.model.forward(state)?;
        let a = select_action(&q, self.config.tie_break, &mut self.tie_rng);
        Ok((
            Action::from_index(a).expect("model outputs one value per action"),
            q,
        ))
    }

    fn sample(&self, x: &Experience) -> Result<Arc<Sample>> {
        Ok(Arc::new(Sample {
            step_index: x.step_index,
            action: x.action,
            stamp: x.stamp,
            features: self.model.features(&x.state)?.into(),
        }))
    }

    pub fn ingest(&mut self, x: &Experience) -> Result<()> {
        let s = self.sample(x)?;
        self.window.push(s)
    }

    fn check_feedback(&mut self, y: &Feedback) -> Result<()> {
        if !y.value.is_finite() {
            return Err(Error::NonFinite("feedback value"));
        }
        if !y.t_feedback.is_finite() {
            return Err(Error::NonFinite("feedback time"));
        }
        if let Some(prev) = self.last_feedback {
            if y.t_feedback < prev {
                return Err(Error::NonMonotoneFeedback {
                    t_feedback: y.t_feedback,
                    previous: prev,
                });
            }
        }
        self.last_feedback = Some(y.t_feedback);
        Ok(())
    }

    /// Credits `y` against the window and updates the model once. `step` is
    /// only used for reporting.
    pub fn on_feedback(&mut self, y: &Feedback, step: u64) -> Result<FeedbackOutcome> {
        self.check_feedback(y)?;
        self.stats.feedback_count += 1;
        let credited = self.window.credited(&self.config.delay_dist, y.t_feedback);
        if credited.is_empty() {
            self.stats.empty_feedback_count += 1;
            return Ok(FeedbackOutcome {
                credited_pair_count: 0,
                group_id: None,
                update: None,
            });
        }
        let n = credited.len();
        if self.config.algorithm == Algorithm::Tamer {
            let (before, after) =
                tamer_update(&mut self.model, &credited, y.value, self.config.eta)?;
            self.stats.immediate_updates += 1;
            return Ok(FeedbackOutcome {
                credited_pair_count: n,
                group_id: None,
                update: Some(UpdateReport {
                    kind: UpdateKind::Immediate,
                    step,
                    batch_size: n,
                    loss_before: before,
                    loss_after: after,
                }),
            });
        }
        let entries: Vec<BufferEntry> = credited
            .into_iter()
            .map(|(sample, weight)| BufferEntry {
                sample,
                h: y.value,
                weight,
            })
            .collect();
        let id = self.buffer.push_group(entries)?;
        let batch: Vec<&BufferEntry> = self.buffer.group(id).iter().collect();
        let (before, after) = sgd_on_entries(&mut self.model, &batch, self.config.eta)?;
        self.stats.immediate_updates += 1;
        Ok(FeedbackOutcome {
            credited_pair_count: n,
            group_id: Some(id),
            update: Some(UpdateReport {
                kind: UpdateKind::Immediate,
                step,
                batch_size: n,
                loss_before: before,
                loss_after: after,
            }),
        })
    }

    /// Replay step, taken when `step % b == 0` and the buffer is nonempty.
    pub fn periodic_update(&mut self, step: u64) -> Result<Option<UpdateReport>> {
        if self.config.algorithm == Algorithm::Tamer
            || step % self.config.buffer_interval_steps != 0
            || self.buffer.is_empty()
        {
            return Ok(None);
        }
        let batch = self
            .buffer
            .sample_minibatch(self.config.minibatch_feedback_count, &mut self.replay_rng);
        let (before, after) = sgd_on_entries(&mut self.model, &batch, self.config.eta)?;
        self.stats.periodic_updates += 1;
        Ok(Some(UpdateReport {
            kind: UpdateKind::Periodic,
            step,
            batch_size: batch.len(),
            loss_before: before,
            loss_after: after,
        }))
    }

    /// Stores a feedback group credited against `experiences` without
    /// updating the model, e.g. to warm-start from an earlier session.
    pub fn preload(&mut self, experiences: &[Experience], y: &Feedback) -> Result<usize> {
        if !y.value.is_finite() {
            return Err(Error::NonFinite("feedback value"));
        }
        let mut entries = Vec::new();
        for x in experiences {
            let w = self.config.delay_dist.weight(x.stamp, y.t_feedback);
            if w > NEGLIGIBLE_WEIGHT {
                entries.push(BufferEntry {
                    sample: self.sample(x)?,
                    h: y.value,
                    weight: w,
                });
            }
        }
        self.buffer.push_group(entries)
    }
}

fn as_samples<'a>(batch: &[&'a BufferEntry]) -> Vec<WeightedSample<'a>> {
    batch
        .iter()
        .map(|e| WeightedSample {
            features: &e.sample.features,
            action: e.sample.action.index(),
            target: e.h,
            weight: e.weight,
        })
        .collect()
}

/// One averaged SGD step on the per-pair weighted loss. Returns the batch
/// loss before and after.
fn sgd_on_entries(model: &mut RewardModel, batch: &[&BufferEntry], eta: f64) -> Result<(f64, f64)> {
    let samples = as_samples(batch);
    let before = model.batch_loss(&samples);
    let g = model.grad(&samples)?;
    model.sgd_step(&g, eta)?;
    Ok((before, model.batch_loss(&samples)))
}

fn window_loss(model: &RewardModel, items: &[(Arc<Sample>, f64)], h: f64) -> f64 {
    let pred: f64 = items
        .iter()
        .map(|(s, w)| w * model.predict(&s.features)[s.action.index()])
        .sum();
    0.5 * (h - pred) * (h - pred)
}

/// Gradient step on `1/2 (h - sum_j w_j H(s_j, a_j))^2` for a linear model.
/// Returns the window loss before and after.
pub fn tamer_update(
    model: &mut RewardModel,
    items: &[(Arc<Sample>, f64)],
    h: f64,
    eta: f64,
) -> Result<(f64, f64)> {
    if !h.is_finite() {
        return Err(Error::NonFinite("feedback value"));
    }
    let before = window_loss(model, items, h);
    let err = h - items
        .iter()
        .map(|(s, w)| w * model.predict(&s.features)[s.action.index()])
        .sum::<f64>();
    let RewardModel::Linear(lin) = model else {
        return Err(Error::InvalidConfig(
            "the tamer update needs a linear model".into(),
        ));
    };
    let d = lin.feature_dim();
    let mut delta = vec![0.0; lin.weights().len()];
    for (s, w) in items {
        if s.features.len() != d {
            return Err(Error::shape(d, s.features.len()));
        }
        let a = s.action.index();
        for (dv, x) in delta[a * d..(a + 1) * d].iter_mut().zip(s.features.iter()) {
            *dv += eta * err * w * x;
        }
    }
    // Reuse the SGD path: params -= 1 * (-delta).
    let g = Gradient::new(delta.into_iter().map(|v| -v).collect());
    model.sgd_step(&g, 1.0)?;
    Ok((before, window_loss(model, items, h)))
}
