//! Delay distributions and the importance weights derived from them.
//!
//! A trainer's feedback at time `t_f` is assumed to refer to behavior that
//! happened some random delay earlier. The weight of an experience that
//! occupied `[t_s, t_e]` is the probability mass the delay model assigns to
//! the interval `[t_f - t_e, t_f - t_s]`.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};

/// Model of the delay between a behavior and the feedback that evaluates it.
///
/// Parameters are validated when the value is built, so every function on an
/// existing distribution is total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDelay", into = "RawDelay")]
pub enum DelayDistribution {
    /// Continuous uniform on `[lo, hi]` seconds.
    Uniform { lo: f64, hi: f64 },
    /// Gamma with dimensionless `shape` and `scale` in seconds.
    Gamma { shape: f64, scale: f64 },
}

/// Wire form of [`DelayDistribution`]. Gamma may be given with `rate`
/// instead of `scale`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum RawDelay {
    Uniform {
        lo: f64,
        hi: f64,
    },
    Gamma {
        shape: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rate: Option<f64>,
    },
}

impl TryFrom<RawDelay> for DelayDistribution {
    type Error = Error;

    fn try_from(raw: RawDelay) -> Result<Self> {
        match raw {
            RawDelay::Uniform { lo, hi } => Self::uniform(lo, hi),
            RawDelay::Gamma { shape, scale, rate } => match (scale, rate) {
                (Some(scale), None) => Self::gamma(shape, scale),
                (None, Some(rate)) if rate > 0.0 => Self::gamma(shape, 1.0 / rate),
                (None, Some(rate)) => Err(Error::InvalidDistribution(format!(
                    "gamma rate must be positive, got {rate}"
                ))),
                _ => Err(Error::InvalidDistribution(
                    "gamma needs exactly one of `scale` or `rate`".into(),
                )),
            },
        }
    }
}

impl From<DelayDistribution> for RawDelay {
    fn from(d: DelayDistribution) -> Self {
        match d {
            DelayDistribution::Uniform { lo, hi } => RawDelay::Uniform { lo, hi },
            DelayDistribution::Gamma { shape, scale } => RawDelay::Gamma {
                shape,
                scale: Some(scale),
                rate: None,
            },
        }
    }
}

impl Default for DelayDistribution {
    fn default() -> Self {
        Self::UNIFORM_DEFAULT
    }
}

impl DelayDistribution {
    /// Uniform over `[0.2, 4.0]` s.
    pub const UNIFORM_DEFAULT: Self = Self::Uniform { lo: 0.2, hi: 4.0 };
    /// Uniform over `[0.28, 4.0]` s.
    pub const UNIFORM_WIDE_LO: Self = Self::Uniform { lo: 0.28, hi: 4.0 };
    /// Gamma with shape 2.0 and scale 0.28 s (mean 0.56 s).
    pub const GAMMA_REACTION: Self = Self::Gamma {
        shape: 2.0,
        scale: 0.28,
    };

    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo < hi) {
            return Err(Error::InvalidDistribution(format!(
                "uniform needs 0 <= lo < hi, got lo={lo}, hi={hi}"
            )));
        }
        Ok(Self::Uniform { lo, hi })
    }

    pub fn gamma(shape: f64, scale: f64) -> Result<Self> {
        if !(shape.is_finite() && scale.is_finite() && shape > 0.0 && scale > 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "gamma needs shape > 0 and scale > 0, got shape={shape}, scale={scale}"
            )));
        }
        Ok(Self::Gamma { shape, scale })
    }

    /// Looks up one of the named presets: `uniform`, `uniform-0.28`, `gamma`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "uniform" | "uniform-0.2" => Some(Self::UNIFORM_DEFAULT),
            "uniform-0.28" => Some(Self::UNIFORM_WIDE_LO),
            "gamma" => Some(Self::GAMMA_REACTION),
            _ => None,
        }
    }

    /// Probability density at `t` seconds.
    pub fn pdf(&self, t: f64) -> f64 {
        match *self {
            Self::Uniform { lo, hi } => {
                if (lo..=hi).contains(&t) {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
            Self::Gamma { shape, scale } => {
                if t < 0.0 || (t == 0.0 && shape > 1.0) {
                    return 0.0;
                }
                if t == 0.0 {
                    return if shape == 1.0 {
                        1.0 / scale
                    } else {
                        f64::INFINITY
                    };
                }
                let x = t / scale;
                ((shape - 1.0) * x.ln() - x - ln_gamma(shape)).exp() / scale
            }
        }
    }

    /// Cumulative probability that the delay is at most `t` seconds.
    pub fn cdf(&self, t: f64) -> f64 {
        match *self {
            Self::Uniform { lo, hi } => {
                if t <= lo {
                    0.0
                } else if t >= hi {
                    1.0
                } else {
                    (t - lo) / (hi - lo)
                }
            }
            Self::Gamma { shape, scale } => {
                if t <= 0.0 {
                    0.0
                } else if t.is_infinite() {
                    1.0
                } else {
                    gamma_lr(shape, t / scale)
                }
            }
        }
    }

    /// Smallest delay `t` with `cdf(t) >= p`, for `p` in `[0, 1)`.
    pub fn quantile(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        match *self {
            Self::Uniform { lo, hi } => lo + p * (hi - lo),
            Self::Gamma { shape, scale } => {
                if p <= 0.0 {
                    return 0.0;
                }
                let mut hi = scale * (shape + 1.0);
                while self.cdf(hi) < p {
                    hi *= 2.0;
                    if !hi.is_finite() {
                        return f64::INFINITY;
                    }
                }
                let mut lo = 0.0;
                // Bisection to ulp resolution; cdf is strictly increasing on (0, inf).
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if self.cdf(mid) >= p {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                hi
            }
        }
    }

    /// Mean delay in seconds.
    pub fn mean(&self) -> f64 {
        match *self {
            Self::Uniform { lo, hi } => 0.5 * (lo + hi),
            Self::Gamma { shape, scale } => shape * scale,
        }
    }

    /// Importance weight of an experience stamped `stamp` for feedback
    /// observed at `t_feedback`.
    pub fn weight(&self, stamp: Stamp, t_feedback: f64) -> f64 {
        if t_feedback < stamp.t_start {
            return 0.0;
        }
        let upper = self.cdf(t_feedback - stamp.t_start);
        let lower = self.cdf(t_feedback - stamp.t_end);
        (upper - lower).clamp(0.0, 1.0)
    }

    /// Delay range `(d_min, d_max)` outside of which experiences carry
    /// negligible weight. Uniform returns its exact support; gamma returns
    /// `(0, quantile(1 - epsilon))`.
    pub fn support_window(&self, epsilon: f64) -> (f64, f64) {
        match *self {
            Self::Uniform { lo, hi } => (lo, hi),
            Self::Gamma { .. } => (0.0, self.quantile(1.0 - epsilon.clamp(0.0, 0.5))),
        }
    }
}

/// The wall-clock interval an experience occupied, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub t_start: f64,
    pub t_end: f64,
}

impl Stamp {
    pub fn new(t_start: f64, t_end: f64) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite() && t_start <= t_end) {
            return Err(Error::InvalidStamp { t_start, t_end });
        }
        Ok(Self { t_start, t_end })
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn shifted(&self, by: f64) -> Self {
        Self {
            t_start: self.t_start + by,
            t_end: self.t_end + by,
        }
    }
}
