//! Probabilistic air-to-ground and line-of-sight air-to-air channel.
//!
//! Path loss is `(K_o d)^α · μ` with `K_o = 4π f_c / c`. Air-to-ground links
//! mix the LoS and NLoS attenuations by the elevation-dependent LoS
//! probability; air-to-air links are always LoS. Gains are reciprocal path
//! losses and are symmetric in their arguments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Position3;

pub const SPEED_OF_LIGHT: f64 = 2.998e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelParams {
    pub carrier_frequency_hz: f64,
    pub path_loss_exponent_alpha: f64,
    pub mu_los_db: f64,
    pub mu_nlos_db: f64,
    pub psi: f64,
    pub eta: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            carrier_frequency_hz: 2e9,
            path_loss_exponent_alpha: 2.0,
            mu_los_db: 5.0,
            mu_nlos_db: 20.0,
            psi: 11.95,
            eta: 0.14,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Validation {
                key: format!("channel.{key}"),
                msg: msg.to_string(),
            })
        };
        if !(self.carrier_frequency_hz > 0.0) {
            return bad("carrier_frequency_hz", "must be > 0");
        }
        if !(self.path_loss_exponent_alpha > 0.0) {
            return bad("path_loss_exponent_alpha", "must be > 0");
        }
        if !(self.psi > 0.0) {
            return bad("psi", "must be > 0");
        }
        if !(self.eta > 0.0) {
            return bad("eta", "must be > 0");
        }
        if !(self.mu_nlos_db >= self.mu_los_db) {
            return bad("mu_nlos_db", "must be >= mu_los_db");
        }
        Ok(())
    }

    /// `K_o = 4π f_c / c`.
    pub fn k_o(&self) -> f64 {
        4.0 * std::f64::consts::PI * self.carrier_frequency_hz / SPEED_OF_LIGHT
    }

    pub fn mu_los(&self) -> f64 {
        db_to_linear(self.mu_los_db)
    }

    pub fn mu_nlos(&self) -> f64 {
        db_to_linear(self.mu_nlos_db)
    }

    /// Distance-dependent factor `(K_o d)^α` shared by every model.
    fn spreading(&self, d: f64) -> f64 {
        (self.k_o() * d).powf(self.path_loss_exponent_alpha)
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Source,
    Destination,
    Abs,
    InterferenceSource,
}

impl NodeKind {
    pub fn is_aerial(self) -> bool {
        matches!(self, NodeKind::Abs)
    }
}

fn nonzero_distance(a: &Position3, b: &Position3) -> Result<f64> {
    let d = a.distance(b);
    if d > 0.0 && d.is_finite() {
        Ok(d)
    } else {
        Err(Error::ZeroDistance(format!("{a:?}"), format!("{b:?}")))
    }
}

/// Elevation angle in degrees, `(180/π)·asin(|Δh|/d)`.
pub fn elevation_angle_deg(a: &Position3, b: &Position3) -> Result<f64> {
    let d = nonzero_distance(a, b)?;
    let ratio = ((a.z - b.z).abs() / d).min(1.0);
    Ok(ratio.asin().to_degrees())
}

pub fn los_probability(theta_deg: f64, params: &ChannelParams) -> f64 {
    1.0 / (1.0 + params.psi * (-params.eta * (theta_deg - params.psi)).exp())
}

/// Linear air-to-air loss `(K_o d)^α μ_LoS`.
pub fn a2a_path_loss(a: &Position3, b: &Position3, params: &ChannelParams) -> Result<f64> {
    let d = nonzero_distance(a, b)?;
    Ok(params.spreading(d) * params.mu_los())
}

/// Average air-to-ground loss, LoS/NLoS attenuations mixed by [`los_probability`].
pub fn a2g_path_loss_avg(
    aerial: &Position3,
    ground: &Position3,
    params: &ChannelParams,
) -> Result<f64> {
    let d = nonzero_distance(aerial, ground)?;
    let theta = elevation_angle_deg(aerial, ground)?;
    let p_los = los_probability(theta, params);
    let mix = p_los * params.mu_los() + (1.0 - p_los) * params.mu_nlos();
    Ok(params.spreading(d) * mix)
}

/// Channel power gain between two nodes.
///
/// Both aerial: air-to-air. Exactly one aerial: averaged air-to-ground.
/// Both terrestrial: averaged air-to-ground model, which at zero height
/// difference evaluates at `θ = 0` and is dominated by the NLoS term.
pub fn channel_gain(
    a: &Position3,
    kind_a: NodeKind,
    b: &Position3,
    kind_b: NodeKind,
    params: &ChannelParams,
) -> Result<f64> {
    // Canonical argument order keeps g(a,b) and g(b,a) on one code path.
    let (p, kp, q, kq) = if canonical_first(a, b) {
        (a, kind_a, b, kind_b)
    } else {
        (b, kind_b, a, kind_a)
    };
    let loss = match (kp.is_aerial(), kq.is_aerial()) {
        (true, true) => a2a_path_loss(p, q, params)?,
        (true, false) => a2g_path_loss_avg(p, q, params)?,
        (false, true) => a2g_path_loss_avg(q, p, params)?,
        (false, false) => a2g_path_loss_avg(p, q, params)?,
    };
    Ok(1.0 / loss)
}

fn canonical_first(a: &Position3, b: &Position3) -> bool {
    let ka = a.to_array();
    let kb = b.to_array();
    ka.iter()
        .zip(kb.iter())
        .find(|(x, y)| x != y)
        .map(|(x, y)| x < y)
        .unwrap_or(true)
}
