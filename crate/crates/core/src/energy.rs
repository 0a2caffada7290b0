//! Rotary-wing propulsion power and trajectory energy.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mobility::TrajectoryLog;

pub const MU_BRACKET: (f64, f64) = (1e-8, 10.0);
const BISECTION_ITERS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyParams {
    pub air_density_rho: f64,
    pub drag_coeff_cd0: f64,
    pub reference_area_ae: f64,
    pub blade_chord_cb: f64,
    pub n_blades: u32,
    pub angular_velocity_omega: f64,
    pub rotor_radius_r: f64,
    pub weight_w: f64,
    /// Floors the descending vertical power at 0.
    pub clamp_descent: bool,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            air_density_rho: 1.225,
            drag_coeff_cd0: 0.05,
            reference_area_ae: 0.3,
            blade_chord_cb: 0.1,
            n_blades: 4,
            angular_velocity_omega: 20.0,
            rotor_radius_r: 0.5,
            weight_w: 50.0,
            clamp_descent: false,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("energy.air_density_rho", self.air_density_rho),
            ("energy.drag_coeff_cd0", self.drag_coeff_cd0),
            ("energy.reference_area_ae", self.reference_area_ae),
            ("energy.blade_chord_cb", self.blade_chord_cb),
            ("energy.n_blades", self.n_blades as f64),
            ("energy.angular_velocity_omega", self.angular_velocity_omega),
            ("energy.rotor_radius_r", self.rotor_radius_r),
            ("energy.weight_w", self.weight_w),
        ];
        for (key, v) in checks {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation { key: key.into(), msg: format!("must be > 0, got {v}") });
            }
        }
        Ok(())
    }

    fn tip_speed(&self) -> f64 {
        self.angular_velocity_omega * self.rotor_radius_r
    }
}

/// `g(μ) = 2ρπω²R⁴ μ √(v_h²/(ωR)² + μ²) − W`, increasing in μ.
pub fn mu_residual(mu: f64, v_h: f64, p: &EnergyParams) -> f64 {
    let k = 2.0 * p.air_density_rho * PI * p.angular_velocity_omega.powi(2) * p.rotor_radius_r.powi(4);
    let a = v_h / p.tip_speed();
    k * mu * (a * a + mu * mu).sqrt() - p.weight_w
}

fn mu_residual_derivative(mu: f64, v_h: f64, p: &EnergyParams) -> f64 {
    let k = 2.0 * p.air_density_rho * PI * p.angular_velocity_omega.powi(2) * p.rotor_radius_r.powi(4);
    let a = v_h / p.tip_speed();
    let r = (a * a + mu * mu).sqrt();
    k * (r + mu * mu / r)
}

/// Positive root of [`mu_residual`]: bisection on `MU_BRACKET`, then one Newton step
/// kept only if it lowers the residual.
pub fn induced_velocity_mu(v_h: f64, p: &EnergyParams) -> Result<f64> {
    if !(v_h >= 0.0) {
        return Err(Error::Invalid(format!("horizontal speed must be >= 0, got {v_h}")));
    }
    let (mut lo, mut hi) = MU_BRACKET;
    let (glo, ghi) = (mu_residual(lo, v_h, p), mu_residual(hi, v_h, p));
    if !(glo < 0.0 && ghi > 0.0) {
        return Err(Error::RootFinding(format!(
            "bracket [{lo}, {hi}] does not straddle the root: g = [{glo}, {ghi}]"
        )));
    }
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mu_residual(mid, v_h, p) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut mu = 0.5 * (lo + hi);
    let polished = mu - mu_residual(mu, v_h, p) / mu_residual_derivative(mu, v_h, p);
    if polished > 0.0 && mu_residual(polished, v_h, p).abs() < mu_residual(mu, v_h, p).abs() {
        mu = polished;
    }
    let res = mu_residual(mu, v_h, p).abs();
    if res >= 1e-9 * p.weight_w {
        return Err(Error::RootFinding(format!(
            "residual {res} at mu = {mu} after bisection on [{lo}, {hi}]"
        )));
    }
    Ok(mu)
}

/// `½ρC_D0 A_e v³ + (π/4) N_b c_b ρ C_D0 ω³R⁴ (1 + 3 (v/(ωR))²)`.
pub fn parasitic_power(v_h: f64, p: &EnergyParams) -> f64 {
    let body = 0.5 * p.air_density_rho * p.drag_coeff_cd0 * p.reference_area_ae * v_h.powi(3);
    let blade = PI / 4.0
        * p.n_blades as f64
        * p.blade_chord_cb
        * p.air_density_rho
        * p.drag_coeff_cd0
        * p.angular_velocity_omega.powi(3)
        * p.rotor_radius_r.powi(4);
    let a = v_h / p.tip_speed();
    body + blade * (1.0 + 3.0 * a * a)
}

/// `ωRW μ(v_h)`.
pub fn induced_power(v_h: f64, p: &EnergyParams) -> Result<f64> {
    Ok(p.tip_speed() * p.weight_w * induced_velocity_mu(v_h, p)?)
}

pub fn horizontal_power(v_h: f64, p: &EnergyParams) -> Result<f64> {
    Ok(parasitic_power(v_h, p) + induced_power(v_h, p)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerticalDirection {
    Climb,
    Descend,
}

/// `(W/2) v ± (W/2) √(v² + 2W/(ρπR²))`; the descending branch is floored at 0
/// when `clamp_descent` is set.
pub fn vertical_power(v_v: f64, direction: VerticalDirection, p: &EnergyParams) -> Result<f64> {
    if !(v_v >= 0.0) {
        return Err(Error::Invalid(format!("vertical speed must be >= 0, got {v_v}")));
    }
    let half_w = 0.5 * p.weight_w;
    let root = (v_v * v_v + 2.0 * p.weight_w / (p.air_density_rho * PI * p.rotor_radius_r.powi(2))).sqrt();
    Ok(match direction {
        VerticalDirection::Climb => half_w * v_v + half_w * root,
        VerticalDirection::Descend => {
            let raw = half_w * v_v - half_w * root;
            if p.clamp_descent {
                raw.max(0.0)
            } else {
                raw
            }
        }
    })
}

/// How long each logged segment takes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedModel {
    /// Segment time is the logged slot duration.
    LoggedTimes,
    /// Every nonzero segment is flown at this speed.
    Cruise(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegmentEnergy {
    pub duration_s: f64,
    pub length_m: f64,
    pub v_h: f64,
    pub v_v: f64,
    pub p_h: f64,
    pub p_v: f64,
    pub energy_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AbsEnergy {
    pub node_id: usize,
    pub path_length_m: f64,
    pub moving_time_s: f64,
    pub segments: Vec<SegmentEnergy>,
    pub energy_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyReport {
    pub per_abs: Vec<AbsEnergy>,
}

impl EnergyReport {
    pub fn total_j(&self) -> f64 {
        self.per_abs.iter().map(|a| a.energy_j).sum()
    }
}

/// Energy of one straight segment with displacement components `(Δxy, Δh)`.
pub fn segment_energy(
    horizontal_m: f64,
    dh_m: f64,
    duration_s: f64,
    p: &EnergyParams,
) -> Result<SegmentEnergy> {
    let length = (horizontal_m * horizontal_m + dh_m * dh_m).sqrt();
    if length == 0.0 {
        return Ok(SegmentEnergy {
            duration_s,
            length_m: 0.0,
            v_h: 0.0,
            v_v: 0.0,
            p_h: 0.0,
            p_v: 0.0,
            energy_j: 0.0,
        });
    }
    if !(duration_s > 0.0) {
        return Err(Error::Invalid(format!("segment of {length} m has duration {duration_s} s")));
    }
    let v = length / duration_s;
    // φ = asin(Δh / D): v_v = v |sin φ|, v_h = v cos φ
    let sin_phi = dh_m / length;
    let v_v = v * sin_phi.abs();
    let v_h = v * (1.0 - sin_phi * sin_phi).max(0.0).sqrt();
    let direction = if dh_m > 0.0 { VerticalDirection::Climb } else { VerticalDirection::Descend };
    let p_v = vertical_power(v_v, direction, p)?;
    let p_h = horizontal_power(v_h, p)?;
    Ok(SegmentEnergy { duration_s, length_m: length, v_h, v_v, p_h, p_v, energy_j: duration_s * (p_v + p_h) })
}

/// Per-ABS energy along the moving nodes of `traj`.
pub fn trajectory_energy(traj: &TrajectoryLog, p: &EnergyParams, speed: SpeedModel) -> Result<EnergyReport> {
    if let SpeedModel::Cruise(v) = speed {
        if !(v > 0.0) {
            return Err(Error::Invalid(format!("cruise speed must be > 0, got {v}")));
        }
    }
    let mut per_abs = Vec::new();
    for (k, &node_id) in traj.node_ids.iter().enumerate() {
        if !traj.moving[k] {
            continue;
        }
        let mut segments = Vec::new();
        let mut energy = 0.0;
        let mut time = 0.0;
        let mut length = 0.0;
        for (seg, w) in traj.slots.windows(2).enumerate() {
            let a = w[0].positions[k];
            let b = w[1].positions[k];
            let d = b - a;
            let horiz = (d.x * d.x + d.y * d.y).sqrt();
            let dist = d.norm();
            let duration = match speed {
                SpeedModel::LoggedTimes => w[1].time_s - w[0].time_s,
                SpeedModel::Cruise(v) => dist / v,
            };
            if dist > 0.0 && !(duration > 0.0) {
                return Err(Error::ZeroDurationSegment { abs: node_id, segment: seg });
            }
            let s = segment_energy(horiz, d.z, duration, p)?;
            if dist > 0.0 {
                time += duration;
            }
            length += dist;
            energy += s.energy_j;
            segments.push(s);
        }
        per_abs.push(AbsEnergy { node_id, path_length_m: length, moving_time_s: time, segments, energy_j: energy });
    }
    Ok(EnergyReport { per_abs })
}

/// `ε = 100 (1 − E_efficient / E_maxflow)`.
pub fn energy_savings(e_efficient: f64, e_maxflow: f64) -> Result<f64> {
    if e_maxflow == 0.0 {
        return Err(Error::Invalid("max-flow trajectory energy is 0; savings undefined".into()));
    }
    Ok(100.0 * (1.0 - e_efficient / e_maxflow))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyComparison {
    pub node_id: usize,
    pub d_maxflow_m: f64,
    pub d_straight_m: f64,
    pub e_maxflow_j: f64,
    pub e_efficient_j: f64,
    /// `None` when the max-flow energy is 0.
    pub savings_pct: Option<f64>,
}

/// Pairs two reports by node id.
pub fn compare(maxflow: &EnergyReport, efficient: &EnergyReport) -> Result<Vec<EnergyComparison>> {
    let mut out = Vec::new();
    for m in &maxflow.per_abs {
        let e = efficient
            .per_abs
            .iter()
            .find(|e| e.node_id == m.node_id)
            .ok_or_else(|| Error::Invalid(format!("node {} missing from efficient report", m.node_id)))?;
        out.push(EnergyComparison {
            node_id: m.node_id,
            d_maxflow_m: m.path_length_m,
            d_straight_m: e.path_length_m,
            e_maxflow_j: m.energy_j,
            e_efficient_j: e.energy_j,
            savings_pct: energy_savings(e.energy_j, m.energy_j).ok(),
        });
    }
    Ok(out)
}

/// CSV with columns `abs_id,D_m,E_maxflow_J,E_efficient_J,savings_pct`.
pub fn write_energy_csv<W: Write>(rows: &[EnergyComparison], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["abs_id", "D_m", "E_maxflow_J", "E_efficient_J", "savings_pct"])?;
    for r in rows {
        wtr.write_record([
            r.node_id.to_string(),
            r.d_maxflow_m.to_string(),
            r.e_maxflow_j.to_string(),
            r.e_efficient_j.to_string(),
            r.savings_pct.map_or(String::new(), |s| s.to_string()),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Average ranks, ties sharing the mean rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` for fewer than 2 points or constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Position3;
    use crate::mobility::{straight_line_trajectory, MobilityConfig};

    fn table1() -> EnergyParams {
        EnergyParams::default()
    }

    #[test]
    fn mu_at_hover() {
        let p = table1();
        let closed = (p.weight_w / (2.0 * p.air_density_rho * PI * 400.0 * 0.5f64.powi(4))).sqrt();
        let mu = induced_velocity_mu(0.0, &p).unwrap();
        assert!((mu - closed).abs() < 1e-12);
        assert!((mu - 0.5098).abs() < 1e-4);
        let p4 = EnergyParams { weight_w: 200.0, ..table1() };
        assert!((induced_velocity_mu(0.0, &p4).unwrap() / mu - 2.0).abs() < 1e-9);
    }

    #[test]
    fn mu_decreasing_with_small_residual() {
        let p = table1();
        let mut prev = f64::INFINITY;
        for k in 0..=60 {
            let v = 0.5 * k as f64;
            let mu = induced_velocity_mu(v, &p).unwrap();
            assert!(mu < prev);
            assert!(mu_residual(mu, v, &p).abs() < 1e-9 * p.weight_w);
            prev = mu;
        }
    }

    #[test]
    fn hover_powers() {
        let p = table1();
        assert!((parasitic_power(0.0, &p) - 9.62).abs() < 5e-3);
        let pi = induced_power(0.0, &p).unwrap();
        assert!((pi - 254.9).abs() < 0.05);
        let climb = vertical_power(0.0, VerticalDirection::Climb, &p).unwrap();
        assert!((climb - pi).abs() <= 1e-6 * pi);
        let down = vertical_power(0.0, VerticalDirection::Descend, &p).unwrap();
        assert!((down + 254.9).abs() < 0.05);
        let clamped = EnergyParams { clamp_descent: true, ..p };
        assert_eq!(vertical_power(0.0, VerticalDirection::Descend, &clamped).unwrap(), 0.0);
    }

    #[test]
    fn vertical_branch_difference() {
        let p = table1();
        for v in [0.0, 0.7, 3.0, 12.0] {
            let c = vertical_power(v, VerticalDirection::Climb, &p).unwrap();
            let d = vertical_power(v, VerticalDirection::Descend, &p).unwrap();
            let root = (v * v + 2.0 * p.weight_w / (p.air_density_rho * PI * 0.25)).sqrt();
            assert!((c + d - p.weight_w * v).abs() < 1e-9);
            assert!((c - d - p.weight_w * root).abs() < 1e-9);
        }
    }

    #[test]
    fn power_trends() {
        let p = table1();
        assert!(parasitic_power(100.0, &p) > 100.0 * parasitic_power(1.0, &p));
        assert!(induced_power(10.0, &p).unwrap() < induced_power(1.0, &p).unwrap());
    }

    #[test]
    fn segment_additivity() {
        let p = EnergyParams { clamp_descent: true, ..table1() };
        let whole = segment_energy(30.0, 4.0, 8.0, &p).unwrap();
        let half = segment_energy(15.0, 2.0, 4.0, &p).unwrap();
        assert!((whole.energy_j - 2.0 * half.energy_j).abs() < 1e-9 * whole.energy_j);
        assert!((whole.v_h.powi(2) + whole.v_v.powi(2) - (whole.length_m / 8.0).powi(2)).abs() < 1e-9);
    }

    #[test]
    fn trajectory_examples() {
        let p = EnergyParams { clamp_descent: true, ..table1() };
        let cfg = MobilityConfig::default();
        let q = vec![Position3::new(0.0, 0.0, 20.0)];
        let still = straight_line_trajectory(&q, &q, &cfg).unwrap();
        let r = trajectory_energy(&still, &p, SpeedModel::LoggedTimes).unwrap();
        assert_eq!(r.total_j(), 0.0);

        let q_l = vec![Position3::new(40.0, 0.0, 20.0)];
        let t = straight_line_trajectory(&q, &q_l, &cfg).unwrap();
        let r = trajectory_energy(&t, &p, SpeedModel::LoggedTimes).unwrap();
        let expected = 40.0 / 5.0 * horizontal_power(5.0, &p).unwrap();
        assert!((r.total_j() - expected).abs() < 1e-9 * expected);
        let cruise = trajectory_energy(&t, &p, SpeedModel::Cruise(5.0)).unwrap();
        assert!((cruise.total_j() - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn savings_formula() {
        assert_eq!(energy_savings(5.0, 5.0).unwrap(), 0.0);
        assert_eq!(energy_savings(0.0, 5.0).unwrap(), 100.0);
        assert!(energy_savings(6.0, 5.0).unwrap() < 0.0);
        assert!(energy_savings(1.0, 0.0).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        let r = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!(r > 0.9 && r < 1.0);
    }

    #[test]
    fn validation_names_key() {
        let p = EnergyParams { weight_w: -1.0, ..table1() };
        match p.validate() {
            Err(Error::Validation { key, .. }) => assert_eq!(key, "energy.weight_w"),
            other => panic!("{other:?}"),
        }
    }
}
