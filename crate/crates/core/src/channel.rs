//! Optical link model: power budget and propagation delay between a station and
//! the central node's 95/5 tap, plus slow delay drift.
//!
//! The ranging pulse leaves the station, crosses the fiber, is diverted by the
//! tap toward the mirror, and returns over the same fiber. The tap fraction is
//! charged once per round trip; circulator insertion loss is folded into the
//! connector budget.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timing::Picos;

pub const SPEED_OF_LIGHT_M_PER_S: f64 = 299_792_458.0;

/// Optical power in dBm.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Dbm(pub f64);

impl Dbm {
    pub fn watts(self) -> f64 {
        10f64.powf((self.0 - 30.0) / 10.0)
    }
}

impl fmt::Display for Dbm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} dBm", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("invalid channel parameter {name}: {value}")]
    InvalidParameter { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub length_km: f64,
    pub attenuation_db_per_km: f64,
    /// Connectors crossed on one traversal of the link.
    pub connector_count: u32,
    pub connector_loss_db: f64,
    /// Fraction diverted to the mirror at the 95/5 splitter.
    pub tap_ratio: f64,
    pub group_index: f64,
    /// 0 models the electronically disabled mirror output.
    pub mirror_reflectivity: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            length_km: 0.0,
            attenuation_db_per_km: 0.2,
            connector_count: 2,
            connector_loss_db: 0.3,
            tap_ratio: 0.05,
            group_index: 1.468,
            mirror_reflectivity: 1.0,
        }
    }
}

impl ChannelParams {
    pub fn with_length(length_km: f64) -> Self {
        ChannelParams {
            length_km,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |name, value| Err(ChannelError::InvalidParameter { name, value });
        if !(self.length_km >= 0.0) || !self.length_km.is_finite() {
            return bad("length_km", self.length_km);
        }
        if !(self.attenuation_db_per_km >= 0.0) || !self.attenuation_db_per_km.is_finite() {
            return bad("attenuation_db_per_km", self.attenuation_db_per_km);
        }
        if !(self.connector_loss_db >= 0.0) || !self.connector_loss_db.is_finite() {
            return bad("connector_loss_db", self.connector_loss_db);
        }
        if !(self.tap_ratio > 0.0 && self.tap_ratio < 1.0) {
            return bad("tap_ratio", self.tap_ratio);
        }
        if !(self.group_index >= 1.0) || !self.group_index.is_finite() {
            return bad("group_index", self.group_index);
        }
        if !(0.0..=1.0).contains(&self.mirror_reflectivity) {
            return bad("mirror_reflectivity", self.mirror_reflectivity);
        }
        Ok(())
    }

    fn one_way_loss_db(&self) -> f64 {
        self.attenuation_db_per_km * self.length_km
            + self.connector_count as f64 * self.connector_loss_db
    }
}

/// Power returned to the station's photodetector after the mirror round trip.
pub fn received_power_roundtrip(launch: Dbm, params: &ChannelParams) -> Result<Dbm, ChannelError> {
    params.validate()?;
    Ok(Dbm(launch.0 - 2.0 * params.one_way_loss_db()
        + 10.0 * params.tap_ratio.log10()
        + 10.0 * params.mirror_reflectivity.log10()))
}

/// Power reaching the central node's detectors through the pass-through port.
pub fn received_power_oneway(launch: Dbm, params: &ChannelParams) -> Result<Dbm, ChannelError> {
    params.validate()?;
    Ok(Dbm(
        launch.0 - params.one_way_loss_db() + 10.0 * (1.0 - params.tap_ratio).log10()
    ))
}

/// Station-to-tap propagation delay, rounded to the nearest picosecond.
pub fn one_way_delay(params: &ChannelParams) -> Picos {
    let ps = params.length_km * params.group_index / SPEED_OF_LIGHT_M_PER_S * 1e15;
    Picos(ps.round() as i64)
}

/// Twice the rounded one-way delay, so the echo lands exactly twice as late as
/// the forward arrival.
pub fn round_trip_time(params: &ChannelParams) -> Picos {
    one_way_delay(params) * 2
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftModel {
    pub linear_rate_ps_per_s: f64,
    pub jitter_sigma_ps: f64,
}

impl DriftModel {
    pub fn is_null(&self) -> bool {
        self.linear_rate_ps_per_s == 0.0 && self.jitter_sigma_ps == 0.0
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.jitter_sigma_ps >= 0.0) || !self.jitter_sigma_ps.is_finite() {
            return Err(ChannelError::InvalidParameter {
                name: "jitter_sigma_ps",
                value: self.jitter_sigma_ps,
            });
        }
        if !self.linear_rate_ps_per_s.is_finite() {
            return Err(ChannelError::InvalidParameter {
                name: "linear_rate_ps_per_s",
                value: self.linear_rate_ps_per_s,
            });
        }
        Ok(())
    }
}

/// Delay after `elapsed` of linear drift plus one jitter draw, clamped at zero.
///
/// The null model consumes no randomness.
pub fn apply_drift<R: Rng + ?Sized>(
    base_delay: Picos,
    elapsed: Picos,
    model: &DriftModel,
    rng: &mut R,
) -> Picos {
    let mut delay = base_delay.0 as f64 + model.linear_rate_ps_per_s * elapsed.as_secs_f64();
    if model.jitter_sigma_ps > 0.0 {
        let normal = Normal::new(0.0, model.jitter_sigma_ps).expect("validated sigma");
        delay += normal.sample(rng);
    }
    Picos((delay.round() as i64).max(0))
}
