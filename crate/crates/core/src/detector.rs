//! Classical photodetector: Gaussian amplitude statistics, a fixed threshold,
//! and the analytic false-alarm expressions that follow from them.

use std::f64::consts::SQRT_2;

use libm::erfc;
use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::Dbm;
use crate::timing::Picos;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectorError {
    #[error("invalid detector parameter {name}: {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("window count must be at least 1")]
    NoWindows,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub noise_sigma: f64,
    pub threshold: f64,
    pub quantum_efficiency: f64,
    pub dead_time: Picos,
    /// Output amplitude per watt of detected optical power.
    pub gain: f64,
    /// Oracle mode: the output equals its mean, so empty gates never fire.
    pub noiseless: bool,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            noise_sigma: 1.0,
            threshold: 5.0,
            quantum_efficiency: 0.2,
            dead_time: Picos::from_ns(100),
            gain: 1.0,
            noiseless: false,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |name, value| Err(DetectorError::InvalidParameter { name, value });
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma", self.noise_sigma);
        }
        if !(self.threshold >= 0.0) || !self.threshold.is_finite() {
            return bad("threshold", self.threshold);
        }
        if !(self.quantum_efficiency > 0.0 && self.quantum_efficiency <= 1.0) {
            return bad("quantum_efficiency", self.quantum_efficiency);
        }
        if self.dead_time.0 < 0 {
            return bad("dead_time", self.dead_time.0 as f64);
        }
        if !(self.gain > 0.0) || !self.gain.is_finite() {
            return bad("gain", self.gain);
        }
        Ok(())
    }

    /// Probability that one poll of a gate with mean amplitude `mean` fires.
    pub fn fire_probability(&self, mean: f64) -> f64 {
        if self.noiseless {
            if mean > self.threshold {
                1.0
            } else {
                0.0
            }
        } else {
            q_function((self.threshold - mean) / self.noise_sigma)
        }
    }

    /// Single-poll false-alarm probability of an empty gate.
    pub fn false_alarm(&self) -> f64 {
        self.fire_probability(0.0)
    }
}

/// Gaussian upper tail, `erfc(x / sqrt 2) / 2`.
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

fn check_sigma(sigma: f64) -> Result<(), DetectorError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(DetectorError::InvalidParameter {
            name: "noise_sigma",
            value: sigma,
        });
    }
    Ok(())
}

pub fn false_alarm_prob(threshold: f64, sigma: f64) -> Result<f64, DetectorError> {
    check_sigma(sigma)?;
    Ok(q_function(threshold / sigma))
}

pub fn detection_prob(
    mean_amplitude: f64,
    threshold: f64,
    sigma: f64,
) -> Result<f64, DetectorError> {
    check_sigma(sigma)?;
    if !(mean_amplitude >= 0.0) {
        return Err(DetectorError::InvalidParameter {
            name: "mean_amplitude",
            value: mean_amplitude,
        });
    }
    Ok(q_function((threshold - mean_amplitude) / sigma))
}

fn check_period_args(p_false: f64, n_windows: u64) -> Result<(), DetectorError> {
    if !(0.0..=1.0).contains(&p_false) {
        return Err(DetectorError::InvalidProbability(p_false));
    }
    if n_windows == 0 {
        return Err(DetectorError::NoWindows);
    }
    Ok(())
}

/// `(1 - p_false)^n_windows`, evaluated as `exp(n * ln_1p(-p))`.
pub fn no_false_alarm_period(p_false: f64, n_windows: u64) -> Result<f64, DetectorError> {
    check_period_args(p_false, n_windows)?;
    if p_false == 1.0 {
        return Ok(0.0);
    }
    Ok((n_windows as f64 * (-p_false).ln_1p()).exp())
}

/// `1 - (1 - p_false)^n_windows`; `expm1` keeps small results accurate.
pub fn false_alarm_per_period(p_false: f64, n_windows: u64) -> Result<f64, DetectorError> {
    check_period_args(p_false, n_windows)?;
    if p_false == 1.0 {
        return Ok(1.0);
    }
    Ok(-(n_windows as f64 * (-p_false).ln_1p()).exp_m1())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSample {
    pub signal_present: bool,
    pub mean_amplitude: f64,
    pub measured: f64,
}

/// Draws one detector output for a gate.
pub fn draw_window<R: Rng + ?Sized>(
    signal_present: bool,
    mean_amplitude: f64,
    params: &DetectorParams,
    rng: &mut R,
) -> WindowSample {
    let mean = if signal_present { mean_amplitude } else { 0.0 };
    let noise = if params.noiseless {
        0.0
    } else {
        let z: f64 = StandardNormal.sample(rng);
        z * params.noise_sigma
    };
    WindowSample {
        signal_present,
        mean_amplitude: mean,
        measured: mean + noise,
    }
}

/// One thresholded poll: true when the drawn output exceeds the threshold.
pub fn sample_window<R: Rng + ?Sized>(
    signal_present: bool,
    mean_amplitude: f64,
    params: &DetectorParams,
    rng: &mut R,
) -> bool {
    draw_window(signal_present, mean_amplitude, params, rng).measured > params.threshold
}

/// Number of firings in `polls` independent polls of a gate that fires with
/// probability `p`. Equal in distribution to summing `polls` calls of
/// [`sample_window`] with the matching mean.
pub fn poll_count<R: Rng + ?Sized>(p: f64, polls: u32, rng: &mut R) -> u32 {
    if p <= 0.0 || polls == 0 {
        return 0;
    }
    if p >= 1.0 {
        return polls;
    }
    Binomial::new(polls as u64, p)
        .expect("p in (0, 1)")
        .sample(rng) as u32
}

/// Mean detector amplitude for a received optical power.
pub fn mean_amplitude_from_power(received: Dbm, params: &DetectorParams) -> f64 {
    params.gain * params.quantum_efficiency * received.watts()
}
