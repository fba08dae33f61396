//! JSONL session log.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::envsim::Action;
use crate::error::{Error, Result};
use crate::learner::{FeedbackSource, UpdateKind};

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Header {
        schema_version: u32,
        env: String,
        algorithm: String,
        model: String,
        step_rate: f64,
        duration: f64,
        seed: u64,
    },
    Step {
        step: u64,
        t: f64,
        action: Action,
        q_values: Vec<f64>,
        score_delta: f64,
        episode: u64,
        episode_score: f64,
    },
    Feedback {
        t_feedback: f64,
        h: f64,
        source: FeedbackSource,
        /// Zero marks feedback that credited nothing and caused no update.
        credited_pair_count: usize,
        group_id: Option<usize>,
    },
    Update {
        t: f64,
        kind: UpdateKind,
        step: u64,
        batch_size: usize,
        loss_before: f64,
        loss_after: f64,
    },
    Episode {
        t: f64,
        episode: u64,
        score: f64,
    },
}

impl LogRecord {
    /// Time the record refers to, if any.
    pub fn time(&self) -> Option<f64> {
        match *self {
            LogRecord::Header { .. } => None,
            LogRecord::Step { t, .. }
            | LogRecord::Update { t, .. }
            | LogRecord::Episode { t, .. } => Some(t),
            LogRecord::Feedback { t_feedback, .. } => Some(t_feedback),
        }
    }
}

/// Buffered JSONL writer.
pub struct LogWriter {
    sink: Box<dyn Write + Send>,
    lines: u64,
}

impl std::fmt::Debug for LogWriter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogWriter")
            .field("lines", &self.lines)
            .finish()
    }
}

impl LogWriter {
    pub fn new<W: Write + Send + 'static>(sink: W) -> Self {
        Self {
            sink: Box::new(std::io::BufWriter::new(sink)),
            lines: 0,
        }
    }

    pub fn write(&mut self, record: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.sink, record)?;
        self.sink.write_all(b"\n")?;
        self.lines += 1;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.sink.flush()?;
        Ok(())
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }
}

pub fn read_log<R: BufRead>(source: R) -> Result<Vec<LogRecord>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord =
            serde_json::from_str(&line).map_err(|e| Error::Log(format!("line {}: {e}", i + 1)))?;
        if let LogRecord::Header { schema_version, .. } = rec {
            if schema_version != LOG_SCHEMA_VERSION {
                return Err(Error::Log(format!(
                    "unsupported log schema version {schema_version}"
                )));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

/// `(t_seconds, mean_episode_score)` after each completed episode, the mean
/// taken over the last `window` episodes.
pub fn score_series(records: &[LogRecord], window: usize) -> Vec<(f64, f64)> {
    let window = window.max(1);
    let scores: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| match *r {
            LogRecord::Episode { t, score, .. } => Some((t, score)),
            _ => None,
        })
        .collect();
    (0..scores.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let slice = &scores[lo..=i];
            (
                scores[i].0,
                slice.iter().map(|s| s.1).sum::<f64>() / slice.len() as f64,
            )
        })
        .collect()
}

pub fn write_score_csv<W: Write>(series: &[(f64, f64)], mut sink: W) -> Result<()> {
    writeln!(sink, "t_seconds,mean_episode_score")?;
    for (t, s) in series {
        writeln!(sink, "{t},{s}")?;
    }
    sink.flush()?;
    Ok(())
}
