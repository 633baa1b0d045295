//! Nakagami-m radio channel: dual-slope log-distance mean power with
//! Gamma-distributed received power, plus the per-frame reception rule.

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::sim::RngStream;

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NakagamiParams {
    pub m0: f64,
    pub m1: f64,
    pub m2: f64,
    pub d0_m: f64,
    pub d1_m: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub d0_g: f64,
    pub d1_g: f64,
    pub ref_distance: f64,
}

impl Default for NakagamiParams {
    fn default() -> Self {
        NakagamiParams {
            m0: 1.5,
            m1: 0.75,
            m2: 0.75,
            d0_m: 80.0,
            d1_m: 200.0,
            gamma0: 1.9,
            gamma1: 3.8,
            gamma2: 3.8,
            d0_g: 200.0,
            d1_g: 500.0,
            ref_distance: 1.0,
        }
    }
}

impl NakagamiParams {
    pub fn validate(&self) -> Result<(), PhyError> {
        let positive = [
            ("m0", self.m0),
            ("m1", self.m1),
            ("m2", self.m2),
            ("gamma0", self.gamma0),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("ref_distance", self.ref_distance),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PhyError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.d0_m > 0.0 && self.d0_m < self.d1_m) {
            return Err(PhyError::Invalid("shape thresholds must satisfy 0 < d0_m < d1_m".into()));
        }
        if !(self.ref_distance < self.d0_g && self.d0_g < self.d1_g) {
            return Err(PhyError::Invalid(
                "exponent thresholds must satisfy ref_distance < d0_g < d1_g".into(),
            ));
        }
        Ok(())
    }

    /// Nakagami shape factor at distance `d`.
    pub fn shape(&self, d: f64) -> f64 {
        if d < self.d0_m {
            self.m0
        } else if d < self.d1_m {
            self.m1
        } else {
            self.m2
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TxParams {
    /// dBm. `None` means calibrate so the mean power at `target_range` equals `rx_threshold`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tx_power: Option<f64>,
    pub frequency: f64,
    pub rx_threshold: f64,
    pub carrier_sense_threshold: f64,
    pub target_range: f64,
    /// dB separation needed for the stronger of two overlapping frames to survive.
    pub capture_margin: f64,
}

impl Default for TxParams {
    fn default() -> Self {
        TxParams {
            tx_power: None,
            frequency: 5.9e9,
            rx_threshold: -82.0,
            carrier_sense_threshold: -92.0,
            target_range: 250.0,
            capture_margin: 10.0,
        }
    }
}

/// Scenario-level radio settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhyConfig {
    /// With fading off every frame arrives at its mean power.
    pub fading: bool,
    #[serde(flatten)]
    pub nakagami: NakagamiParams,
    #[serde(flatten)]
    pub tx: TxParams,
}

impl Default for PhyConfig {
    fn default() -> Self {
        PhyConfig { fading: true, nakagami: NakagamiParams::default(), tx: TxParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PhyError {
    #[error("path loss is undefined at distance {0} m")]
    Distance(f64),
    #[error("invalid phy parameters: {0}")]
    Invalid(String),
}

/// Free-space loss at the reference distance, dB.
pub fn reference_loss(frequency: f64, ref_distance: f64) -> f64 {
    20.0 * (4.0 * std::f64::consts::PI * ref_distance * frequency / SPEED_OF_LIGHT).log10()
}

/// Dual-slope log-distance loss in dB relative to the reference point.
fn excess_loss(d: f64, np: &NakagamiParams) -> f64 {
    let seg = |from: f64, to: f64, g: f64| 10.0 * g * (to / from).log10();
    if d < np.d0_g {
        seg(np.ref_distance, d, np.gamma0)
    } else if d < np.d1_g {
        seg(np.ref_distance, np.d0_g, np.gamma0) + seg(np.d0_g, d, np.gamma1)
    } else {
        seg(np.ref_distance, np.d0_g, np.gamma0)
            + seg(np.d0_g, np.d1_g, np.gamma1)
            + seg(np.d1_g, d, np.gamma2)
    }
}

fn mean_with_power(d: f64, np: &NakagamiParams, tx_power: f64, frequency: f64) -> f64 {
    tx_power - reference_loss(frequency, np.ref_distance) - excess_loss(d, np)
}

/// Transmit power (dBm) that puts the mean received power at `target_range` on `rx_threshold`.
pub fn calibrate_range(np: &NakagamiParams, tp: &TxParams) -> f64 {
    tp.rx_threshold - mean_with_power(tp.target_range, np, 0.0, tp.frequency)
}

/// Effective transmit power: the configured one or the calibrated one.
pub fn tx_power(np: &NakagamiParams, tp: &TxParams) -> f64 {
    tp.tx_power.unwrap_or_else(|| calibrate_range(np, tp))
}

/// Mean received power in dBm at distance `d` (m).
pub fn mean_rx_power(d: f64, np: &NakagamiParams, tp: &TxParams) -> Result<f64, PhyError> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(PhyError::Distance(d));
    }
    Ok(mean_with_power(d, np, tx_power(np, tp), tp.frequency))
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

/// Received power sample in mW: Gamma(shape m(d), scale mean/m(d)).
pub fn sample_rx_power(rng: &mut RngStream, d: f64, np: &NakagamiParams, tp: &TxParams) -> Result<f64, PhyError> {
    let mean = dbm_to_mw(mean_rx_power(d, np, tp)?);
    Ok(sample_around(rng, mean, np.shape(d)))
}

/// Gamma sample with the given mean (mW) and shape.
pub fn sample_around(rng: &mut RngStream, mean_mw: f64, shape: f64) -> f64 {
    let g = Gamma::new(shape, mean_mw / shape).expect("shape and mean are positive");
    // A zero draw is possible in f64 for tiny shapes; keep the sample strictly positive.
    g.sample(rng).max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameOutcome {
    Received,
    LostFading,
    LostCollision,
}

/// Reception decision for one frame at one receiver. `interferers` are the
/// powers (mW) of every frame overlapping it in time at this receiver.
pub fn frame_outcome(power_mw: f64, interferers: &[f64], rx_threshold_dbm: f64, capture_margin_db: f64) -> FrameOutcome {
    if power_mw < dbm_to_mw(rx_threshold_dbm) {
        return FrameOutcome::LostFading;
    }
    let floor = power_mw * 10f64.powf(-capture_margin_db / 10.0);
    if interferers.iter().any(|&p| p > floor) {
        FrameOutcome::LostCollision
    } else {
        FrameOutcome::Received
    }
}

/// True when a frame at `other_mw` prevents capture of a frame at `this_mw`.
pub fn interferes(this_mw: f64, other_mw: f64, capture_margin_db: f64) -> bool {
    other_mw > this_mw * 10f64.powf(-capture_margin_db / 10.0)
}

/// Distance at which the mean power crosses `threshold_dbm`, by bisection.
pub fn range_for(threshold_dbm: f64, np: &NakagamiParams, tp: &TxParams) -> f64 {
    let (mut lo, mut hi) = (np.ref_distance, 1.0e6);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_rx_power(mid, np, tp).expect("positive distance") >= threshold_dbm {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}
