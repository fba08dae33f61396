//! MiniBowl: a small bowling lane with the interaction structure of Atari
//! Bowling.
//!
//! Each ball has an AIM phase (Up/Down move the avatar, Bowl releases) and a
//! ROLL phase (the ball advances one column per step; the first Up/Down sets
//! a spin that drifts the ball one row every `spin_period` steps). Pins are
//! scored when the ball reaches the pin column, which happens long after the
//! decisive actions and is what makes credit assignment hard.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Action, Environment, Frame, Observation, StepResult, FRAME_STACK};
use crate::error::{Error, Result};

const LANE: f64 = 51.0 / 255.0;
const PIN: f64 = 153.0 / 255.0;
const BALL: f64 = 1.0;
const AVATAR: f64 = 1.0;
const SPIN_MARK: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiniBowlConfig {
    /// Height and width of the square frame.
    pub frame_size: usize,
    pub lane_top: usize,
    pub lane_bottom: usize,
    pub pin_center_row: usize,
    /// Avatar row at the start of every ball.
    pub start_row: usize,
    pub avatar_col: usize,
    /// Column at which a rolling ball is scored.
    pub pin_col: usize,
    /// Steps between rows of drift once spin is set.
    pub spin_period: u32,
    pub balls_per_episode: u32,
    pub pins_per_ball: u32,
    /// Pins lost per row of distance from `pin_center_row`.
    pub pins_lost_per_row: u32,
}

impl Default for MiniBowlConfig {
    fn default() -> Self {
        Self::for_frame_size(32)
    }
}

impl MiniBowlConfig {
    /// Lane geometry scaled to a square frame of side `n`.
    pub fn for_frame_size(n: usize) -> Self {
        let center = n / 2;
        Self {
            frame_size: n,
            lane_top: n / 8,
            lane_bottom: n - 1 - n / 8,
            pin_center_row: center,
            start_row: center,
            avatar_col: 2,
            pin_col: n.saturating_sub(4),
            spin_period: 3,
            balls_per_episode: 5,
            pins_per_ball: 10,
            pins_lost_per_row: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("minibowl: {m}")));
        if self.frame_size < 8 {
            return bad("frame_size must be at least 8");
        }
        if !(self.lane_top <= self.lane_bottom && self.lane_bottom < self.frame_size) {
            return bad("lane rows must satisfy lane_top <= lane_bottom < frame_size");
        }
        let lane = self.lane_top..=self.lane_bottom;
        if !lane.contains(&self.pin_center_row) || !lane.contains(&self.start_row) {
            return bad("pin_center_row and start_row must lie inside the lane");
        }
        if self.avatar_col < 1
            || self.avatar_col + 2 > self.pin_col
            || self.pin_col >= self.frame_size
        {
            return bad(
                "columns must satisfy 1 <= avatar_col < avatar_col + 1 < pin_col < frame_size",
            );
        }
        if self.spin_period == 0 || self.balls_per_episode == 0 {
            return bad("spin_period and balls_per_episode must be positive");
        }
        Ok(())
    }

    pub fn max_episode_score(&self) -> u32 {
        self.balls_per_episode * self.pins_per_ball
    }

    pub fn pins_for_row(&self, row: usize) -> u32 {
        let off = row.abs_diff(self.pin_center_row) as u32;
        self.pins_per_ball
            .saturating_sub(self.pins_lost_per_row.saturating_mul(off))
    }

    fn clamp_row(&self, row: isize) -> usize {
        row.clamp(self.lane_top as isize, self.lane_bottom as isize) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Aim,
    Roll {
        col: usize,
        row: usize,
        /// -1 drifts up, +1 drifts down, 0 no spin yet.
        spin: i8,
        since_drift: u32,
    },
    Done,
}

enum RollStep {
    Rolling(Phase),
    Resolved { row: usize },
}

/// Deterministic ROLL transition shared by the simulator and the search.
fn roll_step(cfg: &MiniBowlConfig, phase: Phase, action: Action) -> RollStep {
    let Phase::Roll {
        col,
        mut row,
        mut spin,
        mut since_drift,
    } = phase
    else {
        unreachable!("roll_step outside ROLL");
    };
    if spin == 0 {
        match action {
            Action::Up => spin = -1,
            Action::Down => spin = 1,
            _ => {}
        }
    }
    let col = col + 1;
    if spin != 0 {
        since_drift += 1;
        if since_drift == cfg.spin_period {
            row = cfg.clamp_row(row as isize + spin as isize);
            since_drift = 0;
        }
    }
    if col >= cfg.pin_col {
        RollStep::Resolved { row }
    } else {
        RollStep::Rolling(Phase::Roll {
            col,
            row,
            spin,
            since_drift,
        })
    }
}

/// Result of following a plan to the end of the current ball. Plans are
/// ranked by most pins, then fewest spins, then fewest steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Outcome {
    pins: u32,
    spins: u32,
    steps: u32,
}

impl Outcome {
    fn better_than(&self, other: &Outcome) -> bool {
        (
            self.pins,
            std::cmp::Reverse(self.spins),
            std::cmp::Reverse(self.steps),
        ) > (
            other.pins,
            std::cmp::Reverse(other.spins),
            std::cmp::Reverse(other.steps),
        )
    }

    fn after(self, spin_added: bool) -> Outcome {
        Outcome {
            pins: self.pins,
            spins: self.spins + u32::from(spin_added),
            steps: self.steps + 1,
        }
    }
}

/// Exhaustive search over the ball-level state space. Balls are
/// independent (the avatar returns to `start_row`), so the best plan for
/// the current ball is also best for the episode.
#[derive(Debug)]
struct PolicyTable {
    cfg: MiniBowlConfig,
    aim: Vec<(Outcome, Action)>,
    roll: Vec<(Outcome, Action)>,
}

impl PolicyTable {
    fn roll_index(cfg: &MiniBowlConfig, col: usize, row: usize, spin: i8, since: u32) -> usize {
        let period = cfg.spin_period as usize;
        (((col * cfg.frame_size) + row) * 3 + (spin + 1) as usize) * period + since as usize
    }

    fn build(cfg: &MiniBowlConfig) -> Self {
        let period = cfg.spin_period as usize;
        let size = cfg.frame_size * cfg.frame_size * 3 * period;
        let placeholder = (
            Outcome {
                pins: 0,
                spins: u32::MAX,
                steps: u32::MAX,
            },
            Action::NoAction,
        );
        let mut roll = vec![placeholder; size];
        // Columns strictly increase during a roll, so sweep from the pins back.
        for col in (cfg.avatar_col + 1..cfg.pin_col).rev() {
            for row in cfg.lane_top..=cfg.lane_bottom {
                for spin in -1i8..=1 {
                    for since in 0..cfg.spin_period {
                        if spin == 0 && since != 0 {
                            continue;
                        }
                        let phase = Phase::Roll {
                            col,
                            row,
                            spin,
                            since_drift: since,
                        };
                        let mut best: Option<(Outcome, Action)> = None;
                        for action in Action::ALL {
                            let spin_added =
                                spin == 0 && matches!(action, Action::Up | Action::Down);
                            let outcome = match roll_step(cfg, phase, action) {
                                RollStep::Resolved { row } => Outcome {
                                    pins: cfg.pins_for_row(row),
                                    spins: u32::from(spin_added),
                                    steps: 1,
                                },
                                RollStep::Rolling(Phase::Roll {
                                    col,
                                    row,
                                    spin,
                                    since_drift,
                                }) => roll[Self::roll_index(cfg, col, row, spin, since_drift)]
                                    .0
                                    .after(spin_added),
                                RollStep::Rolling(_) => unreachable!(),
                            };
                            if best.is_none_or(|(b, _)| outcome.better_than(&b)) {
                                best = Some((outcome, action));
                            }
                        }
                        roll[Self::roll_index(cfg, col, row, spin, since)] = best.unwrap();
                    }
                }
            }
        }

        // AIM rows form a cyclic graph; iterate to a fixed point.
        let release = |row: usize| {
            roll[Self::roll_index(cfg, cfg.avatar_col + 1, row, 0, 0)]
                .0
                .after(false)
        };
        let mut aim: Vec<(Outcome, Action)> = vec![placeholder; cfg.frame_size];
        for row in cfg.lane_top..=cfg.lane_bottom {
            aim[row] = (release(row), Action::Bowl);
        }
        loop {
            let mut changed = false;
            for row in cfg.lane_top..=cfg.lane_bottom {
                let mut best: Option<(Outcome, Action)> = None;
                for action in Action::ALL {
                    let outcome = match action {
                        Action::Bowl => release(row),
                        Action::NoAction => aim[row].0.after(false),
                        Action::Up => aim[cfg.clamp_row(row as isize - 1)].0.after(false),
                        Action::Down => aim[cfg.clamp_row(row as isize + 1)].0.after(false),
                    };
                    if best.is_none_or(|(b, _)| outcome.better_than(&b)) {
                        best = Some((outcome, action));
                    }
                }
                let best = best.unwrap();
                if best != aim[row] {
                    aim[row] = best;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        Self {
            cfg: cfg.clone(),
            aim,
            roll,
        }
    }

    fn action(&self, phase: Phase, avatar_row: usize) -> Action {
        match phase {
            Phase::Aim => self.aim[avatar_row].1,
            Phase::Roll {
                col,
                row,
                spin,
                since_drift,
            } => self.roll[Self::roll_index(&self.cfg, col, row, spin, since_drift)].1,
            Phase::Done => Action::NoAction,
        }
    }

    fn best_pins(&self, phase: Phase, avatar_row: usize) -> u32 {
        match phase {
            Phase::Aim => self.aim[avatar_row].0.pins,
            Phase::Roll {
                col,
                row,
                spin,
                since_drift,
            } => {
                self.roll[Self::roll_index(&self.cfg, col, row, spin, since_drift)]
                    .0
                    .pins
            }
            Phase::Done => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MiniBowl {
    cfg: MiniBowlConfig,
    policy: Arc<PolicyTable>,
    avatar_row: usize,
    phase: Phase,
    balls_done: u32,
    score: u32,
    previous: Frame,
    current: Frame,
}

impl MiniBowl {
    pub fn new(cfg: MiniBowlConfig) -> Result<Self> {
        cfg.validate()?;
        let policy = Arc::new(PolicyTable::build(&cfg));
        let blank = Frame::blank(cfg.frame_size, cfg.frame_size);
        let mut env = Self {
            avatar_row: cfg.start_row,
            cfg,
            policy,
            phase: Phase::Aim,
            balls_done: 0,
            score: 0,
            previous: blank.clone(),
            current: blank,
        };
        env.reset(0);
        Ok(env)
    }

    pub fn config(&self) -> &MiniBowlConfig {
        &self.cfg
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn avatar_row(&self) -> usize {
        self.avatar_row
    }

    pub fn balls_done(&self) -> u32 {
        self.balls_done
    }

    /// Best score still attainable for the ball in play.
    pub fn attainable_ball_pins(&self) -> u32 {
        self.policy.best_pins(self.phase, self.avatar_row)
    }

    /// Places the environment in an arbitrary (reachable) ball state.
    /// Intended for tests and analysis.
    pub fn set_state(&mut self, avatar_row: usize, phase: Phase) {
        self.avatar_row = self.cfg.clamp_row(avatar_row as isize);
        self.phase = phase;
        self.current = self.render();
        self.previous = self.current.clone();
    }

    fn render(&self) -> Frame {
        let c = &self.cfg;
        let n = c.frame_size;
        let mut f = Frame::blank(n, n);
        let i = |v: usize| v as isize;
        f.fill_rect(
            i(c.lane_top)..=i(c.lane_bottom),
            i(c.avatar_col)..=i(c.pin_col),
            LANE,
        );
        let pc = i(c.pin_center_row);
        f.fill_rect(pc - 2..=pc + 2, i(c.pin_col) + 1..=i(c.pin_col) + 2, PIN);
        let ar = i(self.avatar_row);
        f.fill_rect(
            ar - 1..=ar + 1,
            i(c.avatar_col) - 1..=i(c.avatar_col),
            AVATAR,
        );
        if let Phase::Roll { col, row, spin, .. } = self.phase {
            f.fill_rect(i(row) - 1..=i(row) + 1, i(col) - 2..=i(col), BALL);
            match spin {
                -1 => f.fill_rect(0..=1, 1..=2, SPIN_MARK),
                1 => f.fill_rect(0..=1, 4..=5, SPIN_MARK),
                _ => {}
            }
        }
        f
    }

    fn observation_now(&self) -> Observation {
        Observation::stack(&self.previous, &self.current).expect("frames share a shape")
    }

    fn info(&self) -> BTreeMap<String, f64> {
        let mut info = BTreeMap::new();
        info.insert("avatar_row".into(), self.avatar_row as f64);
        info.insert("balls_done".into(), f64::from(self.balls_done));
        let (phase, col, row, spin) = match self.phase {
            Phase::Aim => (0.0, -1.0, -1.0, 0.0),
            Phase::Roll { col, row, spin, .. } => (1.0, col as f64, row as f64, f64::from(spin)),
            Phase::Done => (2.0, -1.0, -1.0, 0.0),
        };
        info.insert("phase".into(), phase);
        info.insert("ball_col".into(), col);
        info.insert("ball_row".into(), row);
        info.insert("spin".into(), spin);
        info
    }
}

impl Environment for MiniBowl {
    /// The dynamics have no randomness; `seed` is accepted for interface
    /// uniformity.
    fn reset(&mut self, _seed: u64) -> Observation {
        self.avatar_row = self.cfg.start_row;
        self.phase = Phase::Aim;
        self.balls_done = 0;
        self.score = 0;
        self.current = self.render();
        self.previous = self.current.clone();
        self.observation_now()
    }

    fn step(&mut self, action: Action) -> Result<StepResult> {
        let mut score_delta = 0u32;
        match self.phase {
            Phase::Done => return Err(Error::EpisodeDone),
            Phase::Aim => match action {
                Action::NoAction => {}
                Action::Up => self.avatar_row = self.cfg.clamp_row(self.avatar_row as isize - 1),
                Action::Down => self.avatar_row = self.cfg.clamp_row(self.avatar_row as isize + 1),
                Action::Bowl => {
                    self.phase = Phase::Roll {
                        col: self.cfg.avatar_col + 1,
                        row: self.avatar_row,
                        spin: 0,
                        since_drift: 0,
                    }
                }
            },
            phase @ Phase::Roll { .. } => match roll_step(&self.cfg, phase, action) {
                RollStep::Rolling(next) => self.phase = next,
                RollStep::Resolved { row } => {
                    score_delta = self.cfg.pins_for_row(row);
                    self.score += score_delta;
                    self.balls_done += 1;
                    if self.balls_done >= self.cfg.balls_per_episode {
                        self.phase = Phase::Done;
                    } else {
                        self.phase = Phase::Aim;
                        self.avatar_row = self.cfg.start_row;
                    }
                }
            },
        }
        let next = self.render();
        self.previous = std::mem::replace(&mut self.current, next);
        Ok(StepResult {
            observation: self.observation_now(),
            score_delta: f64::from(score_delta),
            episode_done: self.phase == Phase::Done,
            info: self.info(),
        })
    }

    fn observation(&self) -> Observation {
        self.observation_now()
    }

    fn optimal_action(&self) -> Action {
        self.policy.action(self.phase, self.avatar_row)
    }

    fn observation_shape(&self) -> (usize, usize, usize) {
        (FRAME_STACK, self.cfg.frame_size, self.cfg.frame_size)
    }

    fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    fn episode_score(&self) -> f64 {
        f64::from(self.score)
    }

    fn max_episode_score(&self) -> f64 {
        f64::from(self.cfg.max_episode_score())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bowl() -> MiniBowl {
        MiniBowl::new(MiniBowlConfig::default()).unwrap()
    }

    fn roll_out(env: &mut MiniBowl, action: Action) -> f64 {
        loop {
            let r = env.step(action).unwrap();
            if r.score_delta > 0.0 || !matches!(env.phase(), Phase::Roll { .. }) {
                return r.score_delta;
            }
        }
    }

    #[test]
    fn reset_places_avatar_at_start_row() {
        let mut env = bowl();
        env.reset(3);
        assert_eq!(env.avatar_row(), env.config().start_row);
        assert_eq!(env.episode_score(), 0.0);
        assert_eq!(env.phase(), Phase::Aim);
    }

    #[test]
    fn straight_roll_from_center_scores_ten() {
        let mut env = bowl();
        let center = env.config().pin_center_row;
        env.set_state(center, Phase::Aim);
        assert_eq!(env.step(Action::Bowl).unwrap().score_delta, 0.0);
        assert_eq!(roll_out(&mut env, Action::NoAction), 10.0);
    }

    #[test]
    fn far_off_center_without_spin_scores_zero() {
        let mut env = bowl();
        let center = env.config().pin_center_row;
        env.set_state(center + 5, Phase::Aim);
        env.step(Action::Bowl).unwrap();
        assert_eq!(roll_out(&mut env, Action::NoAction), 0.0);
    }

    #[test]
    fn up_during_aim_moves_avatar_up() {
        let mut env = bowl();
        let before = env.avatar_row();
        let r = env.step(Action::Up).unwrap();
        assert_eq!(env.avatar_row(), before - 1);
        assert_eq!(r.score_delta, 0.0);
    }

    #[test]
    fn spin_drifts_one_row_per_period() {
        let mut env = bowl();
        let center = env.config().pin_center_row;
        env.set_state(center, Phase::Aim);
        env.step(Action::Bowl).unwrap();
        env.step(Action::Down).unwrap();
        env.step(Action::NoAction).unwrap();
        env.step(Action::Up).unwrap(); // ignored: spin already set
        match env.phase() {
            Phase::Roll { row, spin, .. } => {
                assert_eq!(spin, 1);
                assert_eq!(row, center + 1);
            }
            p => panic!("unexpected phase {p:?}"),
        }
    }

    #[test]
    fn optimal_policy_examples() {
        let mut env = bowl();
        let center = env.config().pin_center_row;
        env.set_state(center + 3, Phase::Aim);
        assert_eq!(env.optimal_action(), Action::Up);
        env.set_state(center - 3, Phase::Aim);
        assert_eq!(env.optimal_action(), Action::Down);
        env.set_state(center, Phase::Aim);
        assert_eq!(env.optimal_action(), Action::Bowl);
        env.step(Action::Bowl).unwrap();
        assert_eq!(env.optimal_action(), Action::NoAction);
    }

    #[test]
    fn optimal_policy_corrects_off_center_roll_with_late_spin() {
        let mut env = bowl();
        let cfg = env.config().clone();
        env.set_state(cfg.pin_center_row + 1, Phase::Aim);
        env.step(Action::Bowl).unwrap();
        let mut spun = 0;
        loop {
            let a = env.optimal_action();
            if a == Action::Up {
                spun += 1;
            }
            let r = env.step(a).unwrap();
            if !matches!(env.phase(), Phase::Roll { .. }) {
                assert_eq!(r.score_delta, 10.0);
                break;
            }
        }
        assert_eq!(spun, 1);
    }

    #[test]
    fn greedy_optimal_policy_scores_maximum() {
        let mut env = bowl();
        env.reset(0);
        let mut steps = 0;
        while !env.is_done() {
            env.step(env.optimal_action()).unwrap();
            steps += 1;
            assert!(steps < 10_000);
        }
        assert_eq!(env.episode_score(), 50.0);
        assert!(env.step(Action::NoAction).is_err());
    }

    #[test]
    fn frames_use_palette_exactly_representable_in_8_bits() {
        let mut env = bowl();
        env.reset(0);
        env.step(Action::Bowl).unwrap();
        let f = env.step(Action::Up).unwrap().observation.current();
        let back = Frame::from_gray8(f.height, f.width, &f.to_gray8()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn invalid_geometry_rejected() {
        let mut cfg = MiniBowlConfig::default();
        cfg.pin_col = 40;
        assert!(MiniBowl::new(cfg).is_err());
    }

    #[test]
    fn full_scale_geometry_builds() {
        let env = MiniBowl::new(MiniBowlConfig::for_frame_size(160)).unwrap();
        assert_eq!(env.observation_shape(), (2, 160, 160));
        assert_eq!(env.observation().len(), 51_200);
    }
}
