//! Session time, the human feedback queue, and run control shared with
//! network producers.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::learner::{Feedback, FeedbackSource};

/// Default capacity of [`FeedbackQueue`].
pub const QUEUE_CAPACITY: usize = 1024;

/// Seconds since session start, excluding time spent paused.
#[derive(Debug, Clone)]
pub struct WallClock {
    inner: Arc<Mutex<WallState>>,
}

#[derive(Debug)]
struct WallState {
    origin: Instant,
    paused_at: Option<Instant>,
}

impl Default for WallClock {
    fn default() -> Self {
        Self::start()
    }
}

impl WallClock {
    pub fn start() -> Self {
        Self {
            inner: Arc::new(Mutex::new(WallState {
                origin: Instant::now(),
                paused_at: None,
            })),
        }
    }

    pub fn now(&self) -> f64 {
        let s = self.inner.lock().expect("clock lock");
        let at = s.paused_at.unwrap_or_else(Instant::now);
        at.saturating_duration_since(s.origin).as_secs_f64()
    }

    pub fn pause(&self) {
        let mut s = self.inner.lock().expect("clock lock");
        if s.paused_at.is_none() {
            s.paused_at = Some(Instant::now());
        }
    }

    pub fn resume(&self) {
        let mut s = self.inner.lock().expect("clock lock");
        if let Some(p) = s.paused_at.take() {
            s.origin += p.elapsed();
        }
    }

    pub fn is_paused(&self) -> bool {
        self.inner.lock().expect("clock lock").paused_at.is_some()
    }

    /// Sleeps until session time `t` (returns at once if already past).
    pub fn sleep_until(&self, t: f64) {
        let left = t - self.now();
        if left > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(left));
        }
    }
}

/// Bounded FIFO of human feedback. Entries are stamped with the session
/// clock on arrival; when full, the oldest entry is dropped.
#[derive(Debug, Clone)]
pub struct FeedbackQueue {
    inner: Arc<QueueInner>,
}

#[derive(Debug)]
struct QueueInner {
    capacity: usize,
    items: Mutex<VecDeque<Feedback>>,
    dropped: AtomicU64,
    received: AtomicU64,
    clock: WallClock,
}

impl FeedbackQueue {
    pub fn new(capacity: usize, clock: WallClock) -> Self {
        Self {
            inner: Arc::new(QueueInner {
                capacity: capacity.max(1),
                items: Mutex::new(VecDeque::with_capacity(capacity.min(QUEUE_CAPACITY))),
                dropped: AtomicU64::new(0),
                received: AtomicU64::new(0),
                clock,
            }),
        }
    }

    pub fn clock(&self) -> &WallClock {
        &self.inner.clock
    }

    /// Stamps `h` with the current session time and enqueues it. Returns
    /// `None` for non-finite values.
    pub fn submit(&self, h: f64, source: FeedbackSource) -> Option<Feedback> {
        if !h.is_finite() {
            return None;
        }
        let mut q = self.inner.items.lock().expect("queue lock");
        // Stamped under the lock so queue order and time order agree.
        let fb = Feedback {
            value: h,
            t_feedback: self.inner.clock.now(),
            source,
        };
        self.push_locked(&mut q, fb);
        Some(fb)
    }

    /// Enqueues feedback that already carries a timestamp.
    pub fn push(&self, fb: Feedback) {
        let mut q = self.inner.items.lock().expect("queue lock");
        self.push_locked(&mut q, fb);
    }

    fn push_locked(&self, q: &mut VecDeque<Feedback>, fb: Feedback) {
        if q.len() == self.inner.capacity {
            q.pop_front();
            self.inner.dropped.fetch_add(1, Ordering::Relaxed);
        }
        q.push_back(fb);
        self.inner.received.fetch_add(1, Ordering::Relaxed);
    }

    /// Removes and returns the leading entries with `t_feedback <= now`.
    pub fn drain_due(&self, now: f64) -> Vec<Feedback> {
        let mut q = self.inner.items.lock().expect("queue lock");
        let n = q.iter().take_while(|f| f.t_feedback <= now).count();
        q.drain(..n).collect()
    }

    pub fn len(&self) -> usize {
        self.inner.items.lock().expect("queue lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> u64 {
        self.inner.dropped.load(Ordering::Relaxed)
    }

    pub fn received(&self) -> u64 {
        self.inner.received.load(Ordering::Relaxed)
    }
}

/// Flags a live session polls at each step.
#[derive(Debug, Clone, Default)]
pub struct SessionControl {
    inner: Arc<ControlFlags>,
}

#[derive(Debug, Default)]
struct ControlFlags {
    paused: AtomicBool,
    reset: AtomicBool,
    stop: AtomicBool,
}

impl SessionControl {
    /// A control whose session waits for `start` before stepping.
    pub fn paused() -> Self {
        let c = Self::default();
        c.pause();
        c
    }

    pub fn pause(&self) {
        self.inner.paused.store(true, Ordering::SeqCst);
    }

    pub fn start(&self) {
        self.inner.paused.store(false, Ordering::SeqCst);
    }

    pub fn is_paused(&self) -> bool {
        self.inner.paused.load(Ordering::SeqCst)
    }

    /// Asks the session to start a new episode at its next step.
    pub fn request_reset(&self) {
        self.inner.reset.store(true, Ordering::SeqCst);
    }

    pub(crate) fn take_reset(&self) -> bool {
        self.inner.reset.swap(false, Ordering::SeqCst)
    }

    pub fn stop(&self) {
        self.inner.stop.store(true, Ordering::SeqCst);
    }

    pub fn is_stopped(&self) -> bool {
        self.inner.stop.load(Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overflow_drops_oldest() {
        let q = FeedbackQueue::new(3, WallClock::start());
        for i in 0..5 {
            q.push(Feedback {
                value: i as f64,
                t_feedback: i as f64,
                source: FeedbackSource::Human,
            });
        }
        assert_eq!(q.dropped(), 2);
        assert_eq!(q.received(), 5);
        let got: Vec<f64> = q.drain_due(10.0).iter().map(|f| f.value).collect();
        assert_eq!(got, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn drain_respects_now() {
        let q = FeedbackQueue::new(QUEUE_CAPACITY, WallClock::start());
        for t in [1.0, 2.0, 3.0] {
            q.push(Feedback {
                value: 1.0,
                t_feedback: t,
                source: FeedbackSource::Human,
            });
        }
        assert_eq!(q.drain_due(2.0).len(), 2);
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn submit_stamps_monotone_times() {
        let q = FeedbackQueue::new(QUEUE_CAPACITY, WallClock::start());
        assert!(q.submit(f64::INFINITY, FeedbackSource::Human).is_none());
        let a = q.submit(1.0, FeedbackSource::Human).unwrap();
        let b = q.submit(-1.0, FeedbackSource::Human).unwrap();
        assert!(b.t_feedback >= a.t_feedback);
    }

    #[test]
    fn paused_clock_stands_still() {
        let c = WallClock::start();
        c.pause();
        let t = c.now();
        std::thread::sleep(Duration::from_millis(20));
        assert_eq!(c.now(), t);
        c.resume();
        assert!(c.now() - t < 0.015);
    }
}
