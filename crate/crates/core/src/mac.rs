//! 802.11p-style DCF: frame timing, drop-tail interface queue and the
//! carrier-sense/backoff state of one node.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::sim::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MacParams {
    /// bit/s.
    pub bitrate: f64,
    pub slot: f64,
    pub sifs: f64,
    pub cw_min: u32,
    pub cw_max: u32,
    pub retry_limit: u32,
    pub queue_capacity: usize,
    /// Preamble plus PLCP header, s.
    pub phy_overhead: f64,
    /// MAC header and FCS bytes added to every data frame.
    pub mac_overhead: u32,
    pub ack_size: u32,
}

impl Default for MacParams {
    fn default() -> Self {
        MacParams {
            bitrate: 6.0e6,
            slot: 13e-6,
            sifs: 32e-6,
            cw_min: 15,
            cw_max: 1023,
            retry_limit: 7,
            queue_capacity: 50,
            phy_overhead: 40e-6,
            mac_overhead: 34,
            ack_size: 14,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid mac parameters: {0}")]
pub struct MacParamsError(pub String);

impl MacParams {
    pub fn validate(&self) -> Result<(), MacParamsError> {
        let pow2m1 = |v: u32| (v + 1).is_power_of_two();
        if !(pow2m1(self.cw_min) && pow2m1(self.cw_max) && self.cw_min < self.cw_max) {
            return Err(MacParamsError(format!(
                "cw_min ({}) and cw_max ({}) must be of the form 2^k - 1 with cw_min < cw_max",
                self.cw_min, self.cw_max
            )));
        }
        if self.queue_capacity == 0 {
            return Err(MacParamsError("queue_capacity must be positive".into()));
        }
        for (name, v) in [("bitrate", self.bitrate), ("slot", self.slot), ("sifs", self.sifs)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MacParamsError(format!("{name} must be positive")));
            }
        }
        if !(self.phy_overhead >= 0.0) {
            return Err(MacParamsError("phy_overhead must be non-negative".into()));
        }
        Ok(())
    }

    pub fn difs(&self) -> f64 {
        self.sifs + 2.0 * self.slot
    }

    /// Airtime of a data frame carrying `payload` bytes.
    pub fn frame_duration(&self, payload: u32) -> f64 {
        self.phy_overhead + 8.0 * (payload + self.mac_overhead) as f64 / self.bitrate
    }

    pub fn ack_duration(&self) -> f64 {
        self.phy_overhead + 8.0 * self.ack_size as f64 / self.bitrate
    }

    /// Wait after the end of a unicast transmission before declaring it lost.
    pub fn ack_timeout(&self) -> f64 {
        self.sifs + self.ack_duration() + self.slot
    }

    pub fn next_cw(&self, cw: u32) -> u32 {
        (2 * cw + 1).min(self.cw_max)
    }
}

/// FIFO queue that rejects arrivals when full. The head is the frame in service.
#[derive(Debug, Clone)]
pub struct DropTailQueue<T> {
    items: VecDeque<T>,
    capacity: usize,
}

impl<T> DropTailQueue<T> {
    pub fn new(capacity: usize) -> Self {
        DropTailQueue { items: VecDeque::new(), capacity }
    }

    /// Returns the item back when the queue is full.
    pub fn enqueue(&mut self, item: T) -> Result<(), T> {
        if self.items.len() >= self.capacity {
            return Err(item);
        }
        self.items.push_back(item);
        Ok(())
    }

    pub fn front(&self) -> Option<&T> {
        self.items.front()
    }

    pub fn front_mut(&mut self) -> Option<&mut T> {
        self.items.front_mut()
    }

    pub fn pop_front(&mut self) -> Option<T> {
        self.items.pop_front()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Removes every queued item except the head that matches `pred`.
    pub fn extract_behind_head(&mut self, mut pred: impl FnMut(&T) -> bool) -> Vec<T> {
        let mut out = Vec::new();
        let mut kept = VecDeque::with_capacity(self.items.len());
        for (i, item) in self.items.drain(..).enumerate() {
            if i > 0 && pred(&item) {
                out.push(item);
            } else {
                kept.push_back(item);
            }
        }
        self.items = kept;
        out
    }

    pub fn drain(&mut self) -> impl Iterator<Item = T> + '_ {
        self.items.drain(..)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusyEffect {
    /// Nothing pending, or the pending transmission starts now regardless.
    Unaffected,
    /// The pending transmission must be cancelled; the countdown is frozen.
    Frozen,
}

/// Carrier-sense and backoff bookkeeping of one node.
#[derive(Debug, Clone)]
pub struct Dcf {
    cw: u32,
    attempts: u32,
    sensed: u32,
    idle_since: f64,
    /// Remaining backoff slots while contending.
    remaining: Option<u32>,
    origin: f64,
    fire_at: Option<f64>,
    script: VecDeque<u32>,
}

const FIRE_EPS: f64 = 1e-9;
const SLOT_EPS: f64 = 1e-6;

impl Dcf {
    pub fn new(p: &MacParams) -> Self {
        Dcf {
            cw: p.cw_min,
            attempts: 0,
            sensed: 0,
            idle_since: 0.0,
            remaining: None,
            origin: 0.0,
            fire_at: None,
            script: VecDeque::new(),
        }
    }

    /// Backoff values used before any random draw (test hook).
    pub fn script_backoffs(&mut self, values: impl IntoIterator<Item = u32>) {
        self.script.extend(values);
    }

    pub fn cw(&self) -> u32 {
        self.cw
    }

    pub fn attempts(&self) -> u32 {
        self.attempts
    }

    pub fn is_busy(&self) -> bool {
        self.sensed > 0
    }

    pub fn is_contending(&self) -> bool {
        self.remaining.is_some()
    }

    pub fn remaining_slots(&self) -> Option<u32> {
        self.remaining
    }

    /// Draws a fresh backoff and returns the transmission time if the medium is idle.
    pub fn start_contention(&mut self, now: f64, p: &MacParams, rng: &mut RngStream) -> Option<f64> {
        let slots = self.script.pop_front().unwrap_or_else(|| rng.int_inclusive(self.cw));
        self.remaining = Some(slots);
        self.origin = now.max(self.idle_since);
        self.arm(p)
    }

    fn arm(&mut self, p: &MacParams) -> Option<f64> {
        if self.sensed > 0 {
            self.fire_at = None;
            return None;
        }
        let slots = self.remaining.expect("armed only while contending");
        let t = self.origin + p.difs() + slots as f64 * p.slot;
        self.fire_at = Some(t);
        Some(t)
    }

    pub fn on_busy(&mut self, now: f64, p: &MacParams) -> BusyEffect {
        self.sensed += 1;
        if self.sensed > 1 {
            return BusyEffect::Unaffected;
        }
        match (self.remaining, self.fire_at) {
            (Some(rem), Some(fire)) => {
                if fire <= now + FIRE_EPS {
                    return BusyEffect::Unaffected;
                }
                let counted = ((now - self.origin - p.difs()) / p.slot + SLOT_EPS).floor();
                let elapsed = counted.clamp(0.0, rem as f64) as u32;
                self.remaining = Some(rem - elapsed);
                self.fire_at = None;
                BusyEffect::Frozen
            }
            _ => BusyEffect::Unaffected,
        }
    }

    /// Returns a new transmission time when the countdown resumes.
    pub fn on_idle(&mut self, now: f64, p: &MacParams) -> Option<f64> {
        assert!(self.sensed > 0, "idle notification without matching busy");
        self.sensed -= 1;
        if self.sensed > 0 {
            return None;
        }
        self.idle_since = now;
        if self.remaining.is_some() && self.fire_at.is_none() {
            self.origin = now;
            return self.arm(p);
        }
        None
    }

    /// The scheduled transmission started.
    pub fn fired(&mut self) {
        self.remaining = None;
        self.fire_at = None;
    }

    /// Abandons contention (queue emptied).
    pub fn abort(&mut self) {
        self.remaining = None;
        self.fire_at = None;
    }

    pub fn on_success(&mut self, p: &MacParams) {
        self.cw = p.cw_min;
        self.attempts = 0;
    }

    /// Records a failed attempt; true when the retry limit is exhausted,
    /// in which case the state is reset for the next frame.
    pub fn on_failure(&mut self, p: &MacParams) -> bool {
        self.attempts += 1;
        if self.attempts > p.retry_limit {
            self.on_success(p);
            true
        } else {
            self.cw = p.next_cw(self.cw);
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> MacParams {
        MacParams::default()
    }

    #[test]
    fn queue_capacity() {
        let mut q = DropTailQueue::new(50);
        assert!(q.enqueue(0).is_ok());
        assert_eq!(q.len(), 1);
        for i in 1..50 {
            q.enqueue(i).unwrap();
        }
        assert_eq!(q.enqueue(50), Err(50));
        q.pop_front();
        assert!(q.enqueue(51).is_ok());
        assert_eq!(q.len(), 50);
    }

    #[test]
    fn frame_timing() {
        let p = p();
        assert!((p.difs() - 58e-6).abs() < 1e-15);
        assert!((p.frame_duration(512) - (40e-6 + 8.0 * 546.0 / 6e6)).abs() < 1e-15);
        assert!(p.validate().is_ok());
        let mut bad = p.clone();
        bad.cw_min = 16;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn backoff_zero_and_five() {
        let p = p();
        let mut rng = RngStream::new(1, "mac");
        let mut d = Dcf::new(&p);
        d.script_backoffs([0, 5]);
        assert!((d.start_contention(1.0, &p, &mut rng).unwrap() - (1.0 + p.difs())).abs() < 1e-15);
        d.fired();
        let t = d.start_contention(2.0, &p, &mut rng).unwrap();
        assert!((t - (2.0 + p.difs() + 5.0 * p.slot)).abs() < 1e-15);
    }

    #[test]
    fn freeze_keeps_remaining_slots() {
        let p = p();
        let mut rng = RngStream::new(1, "mac");
        let (mut a, mut b) = (Dcf::new(&p), Dcf::new(&p));
        a.script_backoffs([3]);
        b.script_backoffs([7]);
        let ta = a.start_contention(0.0, &p, &mut rng).unwrap();
        b.start_contention(0.0, &p, &mut rng).unwrap();
        assert_eq!(b.on_busy(ta, &p), BusyEffect::Frozen);
        assert_eq!(b.remaining_slots(), Some(4));
        let end = ta + p.frame_duration(100);
        let tb = b.on_idle(end, &p).unwrap();
        assert!((tb - (end + p.difs() + 4.0 * p.slot)).abs() < 1e-15);
    }

    #[test]
    fn simultaneous_fire_is_not_frozen() {
        let p = p();
        let mut rng = RngStream::new(1, "mac");
        let mut d = Dcf::new(&p);
        d.script_backoffs([2]);
        let t = d.start_contention(0.0, &p, &mut rng).unwrap();
        assert_eq!(d.on_busy(t, &p), BusyEffect::Unaffected);
    }

    #[test]
    fn busy_medium_defers_until_idle() {
        let p = p();
        let mut rng = RngStream::new(1, "mac");
        let mut d = Dcf::new(&p);
        d.on_busy(0.0, &p);
        d.script_backoffs([1]);
        assert_eq!(d.start_contention(0.5, &p, &mut rng), None);
        let t = d.on_idle(1.0, &p).unwrap();
        assert!((t - (1.0 + p.difs() + p.slot)).abs() < 1e-15);
    }

    #[test]
    fn contention_window_doubles_to_cap() {
        let p = p();
        let mut d = Dcf::new(&p);
        let mut seen = vec![d.cw()];
        for _ in 0..p.retry_limit {
            assert!(!d.on_failure(&p));
            seen.push(d.cw());
        }
        assert_eq!(seen, vec![15, 31, 63, 127, 255, 511, 1023, 1023]);
        assert!(d.on_failure(&p));
        assert_eq!(d.cw(), 15);
    }
}
