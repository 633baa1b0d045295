//! Discrete-event engine: virtual clock, cancellable event queue and named
//! random streams.
//!
//! Events are ordered by `(fire_time, sequence)`. The sequence number is
//! assigned at scheduling time, so two events with the same fire time are
//! dispatched in the order they were scheduled.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Simulated time in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct SimTime(f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    /// Panics on negative or non-finite input.
    pub fn from_secs(secs: f64) -> Self {
        assert!(secs.is_finite() && secs >= 0.0, "invalid simulation time {secs}");
        SimTime(secs)
    }

    pub fn secs(self) -> f64 {
        self.0
    }

    pub fn after(self, delay: f64) -> Self {
        SimTime::from_secs(self.0 + delay)
    }
}

impl Eq for SimTime {}

impl std::hash::Hash for SimTime {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state);
    }
}

impl PartialOrd for SimTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.9}s", self.0)
    }
}

/// Handle returned by [`Scheduler::schedule`]; used to cancel the event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle {
    time: SimTime,
    seq: u64,
}

impl EventHandle {
    pub fn fire_time(&self) -> SimTime {
        self.time
    }

    pub fn sequence(&self) -> u64 {
        self.seq
    }
}

/// A dispatched event.
#[derive(Debug, Clone, PartialEq)]
pub struct Event<P> {
    pub fire_time: SimTime,
    pub sequence: u64,
    /// Component the event is addressed to.
    pub target: u32,
    pub payload: P,
}

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("cannot schedule at {at} when the clock is already at {now}")]
    InPast { at: SimTime, now: SimTime },
    #[error("run horizon {horizon} is before the current clock {now}")]
    HorizonInPast { horizon: SimTime, now: SimTime },
}

/// Unrecoverable handler fault, wrapped with the dispatch context.
#[derive(Debug, Error)]
#[error("handler fault at {time} (target {target}): {source}")]
pub struct RunError<E: std::error::Error + 'static> {
    pub time: SimTime,
    pub target: u32,
    #[source]
    pub source: E,
}

/// Priority event queue with a monotone clock.
pub struct Scheduler<P> {
    now: SimTime,
    next_seq: u64,
    pending: BTreeMap<(SimTime, u64), (u32, P)>,
}

impl<P> Default for Scheduler<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> Scheduler<P> {
    pub fn new() -> Self {
        Scheduler {
            now: SimTime::ZERO,
            next_seq: 0,
            pending: BTreeMap::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn schedule(&mut self, at: SimTime, target: u32, payload: P) -> Result<EventHandle, ScheduleError> {
        if at < self.now {
            return Err(ScheduleError::InPast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.insert((at, seq), (target, payload));
        Ok(EventHandle { time: at, seq })
    }

    /// Schedules `delay` seconds from now. Negative delays are clamped to zero.
    pub fn schedule_in(&mut self, delay: f64, target: u32, payload: P) -> EventHandle {
        let at = self.now.after(delay.max(0.0));
        self.schedule(at, target, payload)
            .expect("a non-negative delay never lands in the past")
    }

    /// Returns true if the event was still pending.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.pending.remove(&(handle.time, handle.seq)).is_some()
    }

    pub fn is_pending(&self, handle: EventHandle) -> bool {
        self.pending.contains_key(&(handle.time, handle.seq))
    }

    /// Pops the next event with `fire_time <= horizon` and advances the clock to it.
    pub fn pop_until(&mut self, horizon: SimTime) -> Option<Event<P>> {
        let (&(time, _), _) = self.pending.first_key_value()?;
        if time > horizon {
            return None;
        }
        let ((fire_time, sequence), (target, payload)) = self.pending.pop_first()?;
        self.now = fire_time;
        Some(Event {
            fire_time,
            sequence,
            target,
            payload,
        })
    }

    /// Advances the clock without dispatching. Fails if `t` is in the past.
    pub fn advance_to(&mut self, t: SimTime) -> Result<(), ScheduleError> {
        if t < self.now {
            return Err(ScheduleError::HorizonInPast { horizon: t, now: self.now });
        }
        self.now = t;
        Ok(())
    }

    /// Dispatches every event with `fire_time <= t_end` in order, then sets the
    /// clock to `t_end`. Returns the number of dispatched events.
    pub fn run_until<E, F>(&mut self, t_end: SimTime, mut handler: F) -> Result<u64, RunError<E>>
    where
        E: std::error::Error + 'static,
        F: FnMut(&mut Scheduler<P>, Event<P>) -> Result<(), E>,
    {
        assert!(t_end >= self.now, "run_until({t_end}) called with clock at {}", self.now);
        let mut dispatched = 0;
        while let Some(event) = self.pop_until(t_end) {
            let (time, target) = (event.fire_time, event.target);
            handler(self, event).map_err(|source| RunError { time, target, source })?;
            dispatched += 1;
        }
        self.now = t_end;
        Ok(dispatched)
    }
}

/// Independent random stream derived from `(master seed, label)`.
///
/// The stream seed is a SplitMix64 mix of the master seed with an FNV-1a hash
/// of the label, so streams with different labels never share state and
/// drawing from one leaves the others untouched.
#[derive(Clone)]
pub struct RngStream {
    label: String,
    rng: ChaCha8Rng,
}

impl fmt::Debug for RngStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RngStream").field("label", &self.label).finish()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        let derived = splitmix64(seed ^ splitmix64(fnv1a(label.as_bytes())));
        RngStream {
            label: label.to_string(),
            rng: ChaCha8Rng::seed_from_u64(derived),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Uniform in `[lo, hi)`; returns `lo` when the interval is empty.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        self.rng.random_range(lo..hi)
    }

    /// Uniform integer in `[0, n)`. Panics if `n == 0`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Uniform integer in `[0, max]`.
    pub fn int_inclusive(&mut self, max: u32) -> u32 {
        self.rng.random_range(0..=max)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
