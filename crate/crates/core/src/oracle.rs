//! Scripted trainers. [`Oracle`] judges each step against the
//! environment's optimal action and answers after a random delay;
//! [`ScriptedTrainer`] replays a recorded schedule.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::credit::DelayDistribution;
use crate::envsim::Action;
use crate::error::{Error, Result};
use crate::learner::{Experience, Feedback, FeedbackSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub feedback_prob_per_step: f64,
    pub delay_dist: DelayDistribution,
    pub h_good: f64,
    pub h_bad: f64,
    pub rng_seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            feedback_prob_per_step: 0.04,
            delay_dist: DelayDistribution::UNIFORM_DEFAULT,
            h_good: 1.0,
            h_bad: -1.0,
            rng_seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.feedback_prob_per_step) {
            return Err(Error::InvalidConfig(format!(
                "feedback_prob_per_step must lie in [0, 1], got {}",
                self.feedback_prob_per_step
            )));
        }
        if !(self.h_good.is_finite() && self.h_bad.is_finite()) {
            return Err(Error::NonFinite("oracle feedback values"));
        }
        Ok(())
    }
}

/// One emitted feedback together with the step it judged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub t_end: f64,
    pub h: f64,
    pub t_feedback: f64,
}

impl TraceRecord {
    pub fn feedback(&self) -> Feedback {
        Feedback {
            value: self.h,
            t_feedback: self.t_feedback,
            source: FeedbackSource::Oracle,
        }
    }
}

/// Pending feedback ordered by due time, ties by emission order.
#[derive(Debug, Clone, Default)]
struct Schedule {
    items: Vec<TraceRecord>,
}

impl Schedule {
    fn insert(&mut self, r: TraceRecord) {
        let at = self.items.partition_point(|x| x.t_feedback <= r.t_feedback);
        self.items.insert(at, r);
    }

    fn due(&mut self, now: f64) -> Vec<TraceRecord> {
        let n = self.items.partition_point(|x| x.t_feedback <= now);
        self.items.drain(..n).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Oracle {
    config: OracleConfig,
    rng: ChaCha8Rng,
    pending: Schedule,
    trace: Vec<TraceRecord>,
}

impl Oracle {
    pub fn new(config: OracleConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            config,
            pending: Schedule::default(),
            trace: Vec::new(),
        })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    /// Judges `x` against `optimal` and possibly schedules feedback.
    pub fn observe(&mut self, x: &Experience, optimal: Action) -> Option<TraceRecord> {
        let h = if x.action == optimal {
            self.config.h_good
        } else {
            self.config.h_bad
        };
        self.observe_value(x.step_index, x.stamp.t_end, h)
    }

    /// Like [`observe`](Self::observe) with the judgement supplied directly,
    /// for hidden reward functions other than "matches the optimal action".
    pub fn observe_value(&mut self, step: u64, t_end: f64, h: f64) -> Option<TraceRecord> {
        // Always consume one draw so emission decisions do not depend on h.
        let u: f64 = self.rng.random();
        if u >= self.config.feedback_prob_per_step {
            return None;
        }
        let p: f64 = self.rng.random();
        let delay = self.config.delay_dist.quantile(p);
        let r = TraceRecord {
            step,
            t_end,
            h,
            t_feedback: t_end + delay,
        };
        self.pending.insert(r);
        self.trace.push(r);
        Some(r)
    }

    /// Every scheduled feedback with `t_feedback <= now`, in time order,
    /// each returned once.
    pub fn poll(&mut self, now: f64) -> Vec<Feedback> {
        self.pending
            .due(now)
            .iter()
            .map(TraceRecord::feedback)
            .collect()
    }

    pub fn pending(&self) -> usize {
        self.pending.items.len()
    }

    /// Everything emitted so far, in emission order.
    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }
}

/// Replays a fixed feedback schedule.
#[derive(Debug, Clone, Default)]
pub struct ScriptedTrainer {
    pending: Schedule,
}

impl ScriptedTrainer {
    pub fn new(records: impl IntoIterator<Item = TraceRecord>) -> Result<Self> {
        let mut pending = Schedule::default();
        for r in records {
            if !(r.h.is_finite() && r.t_feedback.is_finite()) {
                return Err(Error::NonFinite("trace record"));
            }
            pending.insert(r);
        }
        Ok(Self { pending })
    }

    pub fn poll(&mut self, now: f64) -> Vec<Feedback> {
        self.pending
            .due(now)
            .iter()
            .map(TraceRecord::feedback)
            .collect()
    }

    pub fn remaining(&self) -> usize {
        self.pending.items.len()
    }
}

pub fn write_trace<W: Write>(records: &[TraceRecord], mut sink: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut sink, r)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

pub fn read_trace<R: BufRead>(source: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|e| Error::Log(format!("trace line {}: {e}", i + 1)))?;
        out.push(r);
    }
    Ok(out)
}
