//! Gradient-driven ABS positioning and straight-line replay.
//!
//! `∂λ2/∂q_i = Σ_{p<q} (x_p/√w_p − x_q/√w_q)² ∂a_pq/∂q_i` for the Fiedler
//! pair of `L_W = W^{-1/2} L W^{-1/2}`; `∂a_pq/∂q_i` is a central finite
//! difference through the full channel and SIR model.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::distfiedler::{distributed_fiedler_from, DistFiedlerConfig};
use crate::error::{Error, Result};
use crate::flow::FlowMetric;
use crate::geometry::{Axis, Position3};
use crate::netgraph::{unnormalized_weighted_laplacian, CapacityGraph, LinkModel, NetworkState, WeightMatrix};
use crate::spectral::{fiedler_variant, LaplacianVariant};

pub const DEFAULT_FD_STEP_M: f64 = 1e-3;
pub const DEFAULT_MAX_ITERATIONS: usize = 300;
pub const DEFAULT_CONVERGENCE_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_HALVINGS: u32 = 6;
/// Minimum `λ3 − λ2` for the gradient to be well defined.
pub const DEGENERACY_GAP: f64 = 1e-8;
const SPEED_SLACK: f64 = 1e-9;

/// Axis-aligned box bounding ABS positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub min: Position3,
    pub max: Position3,
}

impl Region {
    pub fn contains(&self, p: &Position3) -> bool {
        Axis::ALL
            .iter()
            .all(|&a| p.axis(a) >= self.min.axis(a) && p.axis(a) <= self.max.axis(a))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FiedlerSource {
    #[default]
    Centralized,
    Distributed(DistFiedlerConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MobilityConfig {
    pub step_time_s: f64,
    pub v_max: f64,
    /// ABS heights stay at or above this value; 0 leaves only the ground.
    pub height_floor_m: f64,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub fd_step_m: f64,
    pub max_halvings: u32,
    pub region: Option<Region>,
    pub fiedler_source: FiedlerSource,
    pub step_rule: StepRule,
}

/// How per-ABS gradients become displacements before backtracking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Each ABS moves `v_max Δt` along its own unit gradient.
    PerAbs,
    /// The joint gradient is scaled so its largest per-ABS block moves `v_max Δt`.
    Joint,
    /// ABS `i` moves `min(v_max Δt, gain · v_max Δt · ‖g_i‖ / max_j ‖g_j‖)`.
    Saturated { gain: f64 },
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule::PerAbs
    }
}

impl Default for MobilityConfig {
    fn default() -> Self {
        Self {
            step_time_s: 1.0,
            v_max: 5.0,
            height_floor_m: 0.0,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            convergence_tol: DEFAULT_CONVERGENCE_TOL,
            fd_step_m: DEFAULT_FD_STEP_M,
            max_halvings: DEFAULT_MAX_HALVINGS,
            region: None,
            fiedler_source: FiedlerSource::Centralized,
            step_rule: StepRule::PerAbs,
        }
    }
}

impl MobilityConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Validation { key: key.into(), msg: msg.into() });
        if !(self.step_time_s > 0.0) {
            return bad("mobility.step_time_s", "must be > 0");
        }
        if !(self.v_max > 0.0) {
            return bad("mobility.v_max", "must be > 0");
        }
        if !(self.height_floor_m >= 0.0) {
            return bad("mobility.height_floor_m", "must be >= 0");
        }
        if self.max_iterations < 1 {
            return bad("mobility.max_iterations", "must be >= 1");
        }
        if !(self.convergence_tol > 0.0) {
            return bad("mobility.convergence_tol", "must be > 0");
        }
        if !(self.fd_step_m > 0.0) {
            return bad("mobility.fd_step_m", "must be > 0");
        }
        Ok(())
    }

    pub fn max_step(&self) -> f64 {
        self.v_max * self.step_time_s
    }

    fn lowest_z(&self) -> f64 {
        let region_floor = self.region.map_or(0.0, |r| r.min.z);
        self.height_floor_m.max(region_floor).max(0.0)
    }

    fn clamp(&self, p: Position3) -> Position3 {
        let mut q = p;
        if let Some(r) = self.region {
            q.x = q.x.clamp(r.min.x, r.max.x);
            q.y = q.y.clamp(r.min.y, r.max.y);
            q.z = q.z.min(r.max.z);
        }
        q.z = q.z.max(self.lowest_z());
        q
    }

    /// Zeroes gradient components that point out of the feasible box from its boundary.
    fn project(&self, p: &Position3, g: [f64; 3]) -> [f64; 3] {
        let mut out = g;
        for (k, axis) in Axis::ALL.iter().enumerate() {
            let (lo, hi) = match (axis, self.region) {
                (Axis::Z, r) => (self.lowest_z(), r.map_or(f64::INFINITY, |r| r.max.z)),
                (a, Some(r)) => (r.min.axis(*a), r.max.axis(*a)),
                (_, None) => (f64::NEG_INFINITY, f64::INFINITY),
            };
            let v = p.axis(*axis);
            if (v <= lo && out[k] < 0.0) || (v >= hi && out[k] > 0.0) {
                out[k] = 0.0;
            }
        }
        out
    }
}

/// `∂a_pq/∂(axis of node i)` by central differences; exactly 0 when `p = q`.
pub fn capacity_gradient(
    p: usize,
    q: usize,
    i: usize,
    axis: Axis,
    state: &NetworkState,
    fd_step_m: f64,
) -> Result<f64> {
    if p == q {
        return Ok(0.0);
    }
    check_abs(state, i)?;
    let model = LinkModel::new(state)?;
    let base = state.nodes[i].position;
    let plus = base.with_axis(axis, base.axis(axis) + fd_step_m);
    let minus = base.with_axis(axis, base.axis(axis) - fd_step_m);
    let cp = model.capacity_displaced(p, q, i, plus)?;
    let cm = model.capacity_displaced(p, q, i, minus)?;
    Ok((cp - cm) / (2.0 * fd_step_m))
}

fn check_abs(state: &NetworkState, i: usize) -> Result<()> {
    match state.nodes.get(i) {
        None => Err(Error::NodeOutOfRange(i)),
        Some(n) if !n.kind.is_aerial() => Err(Error::Invalid(format!("node {i} is not an ABS"))),
        Some(_) => Ok(()),
    }
}

/// Spectral objective maximized by the positioning loop.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// λ2(W^{-1/2} L W^{-1/2}) for fixed node weights.
    Weighted(WeightMatrix),
    /// λ2(D^{-1/2} L D^{-1/2}), i.e. `W = D`; the degrees move with the ABSs.
    Normalized,
}

impl Objective {
    pub fn weights(&self, g: &CapacityGraph) -> Result<WeightMatrix> {
        match self {
            Objective::Weighted(w) => {
                if w.len() != g.len() {
                    return Err(Error::Dimension { expected: g.len(), got: w.len() });
                }
                Ok(w.clone())
            }
            Objective::Normalized => {
                WeightMatrix::new(g.degrees.iter().cloned().collect()).map_err(|_| Error::Disconnected)
            }
        }
    }

    fn degree_coupled(&self) -> bool {
        matches!(self, Objective::Normalized)
    }
}

/// λ2 and its Fiedler vector for `W^{-1/2} L W^{-1/2}`, rejecting a repeated λ2.
#[derive(Debug, Clone, PartialEq)]
pub struct FiedlerPair {
    pub lambda2: f64,
    pub vector: DVector<f64>,
}

pub fn central_fiedler(g: &CapacityGraph, w: &WeightMatrix) -> Result<FiedlerPair> {
    let m = unnormalized_weighted_laplacian(g, w)?;
    let r = fiedler_variant(&m, &w.sqrt_ones(), LaplacianVariant::UnnormalizedWeighted)?;
    if let Some(gap) = r.gap() {
        if gap <= DEGENERACY_GAP {
            return Err(Error::DegenerateLambda2 { gap });
        }
    }
    Ok(FiedlerPair { lambda2: r.lambda2, vector: r.fiedler_vector })
}

/// Gradient of λ2 w.r.t. ABS `i` for a given unit Fiedler vector `x`.
///
/// With `degree_lambda = Some(λ)` the weights are the degrees themselves and
/// each pair also carries `−λ (y_p² + y_q²)`, `y = W^{-1/2} x`, from `∂β/∂a`.
pub fn gradient_from_vector(
    model: &LinkModel,
    adjacency: &CapacityGraph,
    i: usize,
    x: &DVector<f64>,
    w: &WeightMatrix,
    degree_lambda: Option<f64>,
    fd_step_m: f64,
) -> Result<[f64; 3]> {
    let state = model.state();
    check_abs(state, i)?;
    let n = state.len();
    let ws = w.as_slice();
    let scaled: Vec<f64> = (0..n).map(|p| x[p] / ws[p].sqrt()).collect();
    let base = state.nodes[i].position;
    let mut grad = [0.0; 3];
    for (k, axis) in Axis::ALL.iter().enumerate() {
        let plus = model.adjacency_displaced(i, base.with_axis(*axis, base.axis(*axis) + fd_step_m))?;
        let minus = model.adjacency_displaced(i, base.with_axis(*axis, base.axis(*axis) - fd_step_m))?;
        let mut acc = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                if adjacency.adjacency[(p, q)] > 0.0 {
                    let mut c = (scaled[p] - scaled[q]).powi(2);
                    if let Some(l) = degree_lambda {
                        c -= l * (scaled[p].powi(2) + scaled[q].powi(2));
                    }
                    acc += c * (plus[(p, q)] - minus[(p, q)]);
                }
            }
        }
        grad[k] = acc / (2.0 * fd_step_m);
    }
    Ok(grad)
}

/// Spatial gradient of λ2(W^{-1/2} L W^{-1/2}) w.r.t. ABS `i`.
pub fn lambda2_gradient(i: usize, state: &NetworkState, w: &WeightMatrix, fd_step_m: f64) -> Result<[f64; 3]> {
    check_abs(state, i)?;
    let model = LinkModel::new(state)?;
    let g = CapacityGraph::from_adjacency(model.adjacency(), state.kinds())?;
    let pair = central_fiedler(&g, w)?;
    gradient_from_vector(&model, &g, i, &pair.vector, w, None, fd_step_m)
}

/// Spatial gradient of the objective's λ2 w.r.t. ABS `i`.
pub fn objective_gradient(
    i: usize,
    state: &NetworkState,
    objective: &Objective,
    fd_step_m: f64,
) -> Result<[f64; 3]> {
    check_abs(state, i)?;
    let model = LinkModel::new(state)?;
    let g = CapacityGraph::from_adjacency(model.adjacency(), state.kinds())?;
    let w = objective.weights(&g)?;
    let pair = central_fiedler(&g, &w)?;
    let corr = objective.degree_coupled().then_some(pair.lambda2);
    gradient_from_vector(&model, &g, i, &pair.vector, &w, corr, fd_step_m)
}

/// λ2 of the current state under `w`, from the configured Fiedler source.
fn fiedler_for(
    g: &CapacityGraph,
    w: &WeightMatrix,
    source: FiedlerSource,
    warm: Option<&DVector<f64>>,
) -> Result<FiedlerPair> {
    let central = central_fiedler(g, w)?;
    match source {
        FiedlerSource::Centralized => Ok(central),
        FiedlerSource::Distributed(cfg) => {
            let warm = warm.filter(|v| v.len() == g.len());
            let t = distributed_fiedler_from(g, w, cfg, warm)?;
            Ok(FiedlerPair { lambda2: t.lambda2_estimate, vector: t.per_node_entries })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: NetworkState,
    pub lambda2_before: f64,
    pub lambda2_after: f64,
    /// Accepted fraction of the full step; 0 when no move was taken.
    pub scale: f64,
    pub gradient_norm: f64,
    pub displacement: Vec<f64>,
    pub converged: bool,
    pub fiedler: DVector<f64>,
}

/// One synchronous positioning slot.
///
/// Every ABS moves by `s · v_max Δt · g_i / max_j ‖g_j‖` with `s` halved from 1
/// until λ2 does not decrease and stays simple. Gradients pointing out of the feasible box from
/// its boundary are projected away first.
pub fn step(state: &NetworkState, cfg: &MobilityConfig, w: &WeightMatrix) -> Result<NetworkState> {
    Ok(step_detailed(state, cfg, &Objective::Weighted(w.clone()), None)?.state)
}

pub fn step_detailed(
    state: &NetworkState,
    cfg: &MobilityConfig,
    objective: &Objective,
    warm: Option<&DVector<f64>>,
) -> Result<StepOutcome> {
    let n = state.len();
    let model = LinkModel::new(state)?;
    let g = CapacityGraph::from_adjacency(model.adjacency(), state.kinds())?;
    let w = objective.weights(&g)?;
    let pair = fiedler_for(&g, &w, cfg.fiedler_source, warm)?;
    let corr = objective.degree_coupled().then_some(pair.lambda2);
    let abs = state.abs_indices();

    let mut grads = Vec::with_capacity(abs.len());
    for &i in &abs {
        let raw = gradient_from_vector(&model, &g, i, &pair.vector, &w, corr, cfg.fd_step_m)?;
        grads.push(cfg.project(&state.nodes[i].position, raw));
    }
    let norms: Vec<f64> = grads.iter().map(|v| Position3::from_array(*v).norm()).collect();
    let gradient_norm = norms.iter().map(|x| x * x).sum::<f64>().sqrt();
    let gmax = norms.iter().cloned().fold(0.0, f64::max);
    let stay = |converged| StepOutcome {
        state: state.clone(),
        lambda2_before: pair.lambda2,
        lambda2_after: pair.lambda2,
        scale: 0.0,
        gradient_norm,
        displacement: vec![0.0; n],
        converged,
        fiedler: pair.vector.clone(),
    };
    if gradient_norm < cfg.convergence_tol || !(gmax > 0.0) {
        return Ok(stay(true));
    }

    let mut scale = 1.0;
    for _ in 0..=cfg.max_halvings {
        let mut trial = state.clone();
        let mut displacement = vec![0.0; n];
        for (&i, gi) in abs.iter().zip(&grads) {
            let old = state.nodes[i].position;
            let g = Position3::from_array(*gi);
            let denom = match cfg.step_rule {
                StepRule::Joint => gmax,
                StepRule::PerAbs => g.norm(),
                StepRule::Saturated { gain } => g.norm().max(gmax / gain),
            };
            let dir = if denom > 0.0 { g * (scale * cfg.max_step() / denom) } else { g };
            let new = cfg.clamp(old + dir);
            displacement[i] = new.distance(&old);
            trial.nodes[i].position = new;
        }
        let tm = LinkModel::new(&trial)?;
        let tg = CapacityGraph::from_adjacency(tm.adjacency(), trial.kinds())?;
        let tw = objective.weights(&tg)?;
        // A trial with a repeated λ2 is rejected like a decrease.
        let tp = match fiedler_for(&tg, &tw, cfg.fiedler_source, Some(&pair.vector)) {
            Ok(tp) => Some(tp),
            Err(Error::DegenerateLambda2 { .. }) => None,
            Err(e) => return Err(e),
        };
        if let Some(tp) = tp.filter(|tp| tp.lambda2 >= pair.lambda2) {
            return Ok(StepOutcome {
                state: trial,
                lambda2_before: pair.lambda2,
                lambda2_after: tp.lambda2,
                scale,
                gradient_norm,
                displacement,
                converged: false,
                fiedler: tp.vector,
            });
        }
        scale *= 0.5;
    }
    Ok(stay(false))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    NoImprovement,
    IterationLimit,
    Replay,
    /// Single-slot log of a placement that never moves.
    Stationary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotRecord {
    pub slot: usize,
    pub time_s: f64,
    /// Positions of the logged nodes, parallel to `TrajectoryLog::node_ids`.
    pub positions: Vec<Position3>,
    pub lambda2: Option<f64>,
    pub flow_metric: Option<f64>,
    /// Distance moved since the previous slot.
    pub displacement: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub node_ids: Vec<usize>,
    pub moving: Vec<bool>,
    pub slots: Vec<SlotRecord>,
    /// Total path length `D_i` per logged node.
    pub path_length: Vec<f64>,
    pub stop_reason: StopReason,
}

impl TrajectoryLog {
    fn new(node_ids: Vec<usize>, moving: Vec<bool>, stop_reason: StopReason) -> Self {
        let n = node_ids.len();
        Self { node_ids, moving, slots: Vec::new(), path_length: vec![0.0; n], stop_reason }
    }

    fn push(&mut self, rec: SlotRecord) {
        for (d, x) in self.path_length.iter_mut().zip(&rec.displacement) {
            *d += x;
        }
        self.slots.push(rec);
    }

    pub fn initial_positions(&self) -> &[Position3] {
        &self.slots[0].positions
    }

    pub fn final_positions(&self) -> &[Position3] {
        &self.slots[self.slots.len() - 1].positions
    }

    pub fn final_flow(&self) -> Option<f64> {
        self.slots.last().and_then(|s| s.flow_metric)
    }

    /// Speed limit, height floor (moving nodes) and fixity (other nodes).
    pub fn check_invariants(&self, cfg: &MobilityConfig) -> Result<()> {
        for w in self.slots.windows(2) {
            let dt = w[1].time_s - w[0].time_s;
            for k in 0..self.node_ids.len() {
                let d = w[1].positions[k].distance(&w[0].positions[k]);
                if self.moving[k] {
                    if d > cfg.v_max * dt + SPEED_SLACK {
                        return Err(Error::Invalid(format!(
                            "node {} moved {d} m in {dt} s at slot {}",
                            self.node_ids[k], w[1].slot
                        )));
                    }
                } else if d != 0.0 {
                    return Err(Error::Invalid(format!(
                        "fixed node {} moved at slot {}",
                        self.node_ids[k], w[1].slot
                    )));
                }
            }
        }
        if cfg.height_floor_m > 0.0 {
            for s in &self.slots {
                for (k, p) in s.positions.iter().enumerate() {
                    if self.moving[k] && p.z < cfg.height_floor_m - SPEED_SLACK {
                        return Err(Error::Invalid(format!(
                            "node {} below floor at slot {}",
                            self.node_ids[k], s.slot
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// CSV with columns `slot,node_id,x,y,z,lambda2,flow_metric`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["slot", "node_id", "x", "y", "z", "lambda2", "flow_metric"])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for s in &self.slots {
            for (k, p) in s.positions.iter().enumerate() {
                wtr.write_record([
                    s.slot.to_string(),
                    self.node_ids[k].to_string(),
                    p.x.to_string(),
                    p.y.to_string(),
                    p.z.to_string(),
                    opt(s.lambda2),
                    opt(s.flow_metric),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Iterates [`step`] until the gradient norm drops below tolerance, no
/// backtracked step improves λ2, or `max_iterations` slots have run.
pub fn run_maxflow_trajectory(
    initial: &NetworkState,
    cfg: &MobilityConfig,
    objective: &Objective,
    metric: &FlowMetric,
) -> Result<TrajectoryLog> {
    cfg.validate()?;
    initial.validate()?;
    let n = initial.len();
    let moving: Vec<bool> = initial.nodes.iter().map(|x| x.kind.is_aerial()).collect();
    let mut log = TrajectoryLog::new((0..n).collect(), moving, StopReason::IterationLimit);

    let mut state = initial.clone();
    let g0 = crate::netgraph::build_capacity_graph(&state)?;
    let mut lambda2 = fiedler_for(&g0, &objective.weights(&g0)?, cfg.fiedler_source, None)?.lambda2;
    log.push(SlotRecord {
        slot: 0,
        time_s: 0.0,
        positions: state.positions(),
        lambda2: Some(lambda2),
        flow_metric: Some(metric.evaluate(&g0)?),
        displacement: vec![0.0; n],
    });
    let mut warm: Option<DVector<f64>> = None;
    for slot in 1..=cfg.max_iterations {
        let out = step_detailed(&state, cfg, objective, warm.as_ref())?;
        if out.converged {
            log.stop_reason = StopReason::Converged;
            break;
        }
        if out.scale == 0.0 {
            log.stop_reason = StopReason::NoImprovement;
            break;
        }
        state = out.state;
        lambda2 = out.lambda2_after;
        warm = Some(out.fiedler);
        let g = crate::netgraph::build_capacity_graph(&state)?;
        log.push(SlotRecord {
            slot,
            time_s: slot as f64 * cfg.step_time_s,
            positions: state.positions(),
            lambda2: Some(lambda2),
            flow_metric: Some(metric.evaluate(&g)?),
            displacement: out.displacement,
        });
    }
    Ok(log)
}

/// Constant-speed straight segments `q0[i] → qL[i]` with a common moving time
/// `T = max_i D_i / v_max`, sampled every `Δt` (the last interval may be shorter).
pub fn straight_line_trajectory(
    q0: &[Position3],
    q_l: &[Position3],
    cfg: &MobilityConfig,
) -> Result<TrajectoryLog> {
    if q0.len() != q_l.len() {
        return Err(Error::Dimension { expected: q0.len(), got: q_l.len() });
    }
    let n = q0.len();
    let mut log = TrajectoryLog::new((0..n).collect(), vec![true; n], StopReason::Replay);
    let lengths: Vec<f64> = q0.iter().zip(q_l).map(|(a, b)| a.distance(b)).collect();
    let total_time = lengths.iter().cloned().fold(0.0, f64::max) / cfg.v_max;
    log.push(SlotRecord {
        slot: 0,
        time_s: 0.0,
        positions: q0.to_vec(),
        lambda2: None,
        flow_metric: None,
        displacement: vec![0.0; n],
    });
    if total_time == 0.0 {
        return Ok(log);
    }
    let slots = ((total_time / cfg.step_time_s) - 1e-9).ceil().max(1.0) as usize;
    let mut prev = q0.to_vec();
    for k in 1..=slots {
        let t = (k as f64 * cfg.step_time_s).min(total_time);
        let frac = t / total_time;
        let positions: Vec<Position3> = if k == slots {
            q_l.to_vec()
        } else {
            q0.iter().zip(q_l).map(|(a, b)| *a + (*b - *a) * frac).collect()
        };
        let displacement = positions.iter().zip(&prev).map(|(a, b)| a.distance(b)).collect();
        prev = positions.clone();
        log.push(SlotRecord { slot: k, time_s: t, positions, lambda2: None, flow_metric: None, displacement });
    }
    // Straight-line lengths are exact, not the sum of rounded pieces.
    log.path_length = lengths;
    Ok(log)
}

/// `L · K² / e`: computation delay before the first move in the energy-efficient mode.
pub fn computation_latency(iterations: usize, k_bits: f64, e_speed: f64) -> Result<f64> {
    if !(e_speed > 0.0) {
        return Err(Error::Invalid(format!("processing speed must be > 0, got {e_speed}")));
    }
    Ok(iterations as f64 * k_bits * k_bits / e_speed)
}
