//! Scenario files, the Monte-Carlo experiment harness and CSV emission.
//!
//! A scenario is a TOML document whose tables give dotted keys such as
//! `mobility.v_max` or `graph.r_int_m`. Flow-graph nodes are ordered
//! sources, then destinations, then ABSs; interferers are not flow nodes.
//! Run `r` draws from a ChaCha8 stream seeded by `rng_seed` with stream id
//! `r`, so results do not depend on scheduling.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelParams, NodeKind};
use crate::distfiedler::{distributed_fiedler, DistFiedlerConfig, MessageTrace};
use crate::energy::{compare, trajectory_energy, EnergyComparison, EnergyParams, SpeedModel};
use crate::error::{Error, Result};
use crate::flow::{ConcurrentFlowConfig, FlowMetric};
use crate::geometry::Position3;
use crate::mobility::{
    run_maxflow_trajectory, straight_line_trajectory, FiedlerSource, MobilityConfig, Objective, Region,
    SlotRecord, StepRule, StopReason, TrajectoryLog,
};
use crate::netgraph::{build_capacity_graph, GraphParams, NetworkState, Node, WeightMatrix};
use crate::spectral::{aggregate_weights, CommoditySpec};

pub const SCHEMA_VERSION: u32 = 1;

/// Stream ids at or above this offset belong to the random-stationary baseline.
const BASELINE_STREAM_OFFSET: u64 = 1 << 40;

/// Bundled scenarios, embedded at compile time.
pub const BUNDLED: &[(&str, &str)] = &[
    ("fig1_single_si", include_str!("../scenarios/fig1_single_si.toml")),
    ("fig2_multicast", include_str!("../scenarios/fig2_multicast.toml")),
    ("fig3_multiunicast", include_str!("../scenarios/fig3_multiunicast.toml")),
    ("fig5_height_floor", include_str!("../scenarios/fig5_height_floor.toml")),
    ("fig6_energy", include_str!("../scenarios/fig6_energy.toml")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn load_bundled(name: &str) -> Result<Scenario> {
    let text = bundled(name).ok_or_else(|| Error::Config(format!("no bundled scenario named `{name}`")))?;
    Scenario::from_toml_str(text)
}

/// Reads a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    Scenario::from_toml_str(&text)
}

/// A file path if one exists, otherwise a bundled scenario name.
pub fn resolve_scenario(name_or_path: &str) -> Result<Scenario> {
    let path = Path::new(name_or_path);
    if path.exists() {
        return load_scenario(path);
    }
    match bundled(name_or_path) {
        Some(text) => Scenario::from_toml_str(text),
        None => Err(Error::Config(format!(
            "`{name_or_path}` is neither a readable file nor a bundled scenario ({})",
            BUNDLED.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Weighted,
    Unweighted,
    RandomBaseline,
    EnergyEfficient,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Weighted, Mode::Unweighted, Mode::RandomBaseline, Mode::EnergyEfficient];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Weighted => "weighted",
            Mode::Unweighted => "unweighted",
            Mode::RandomBaseline => "random-baseline",
            Mode::EnergyEfficient => "energy-efficient",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| Error::Validation {
            key: "mode".into(),
            msg: format!("unknown mode `{s}`; expected weighted, unweighted, random-baseline or energy-efficient"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowEval {
    #[default]
    Single,
    Multicast,
    MultiUnicast,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl RegionSpec {
    pub fn region(&self) -> Region {
        Region { min: pos(self.min), max: pos(self.max) }
    }
}

/// `count` ABSs at `origin + k·spacing`, `k = 0..count`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSpec {
    pub count: usize,
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
}

/// Exactly one of `positions` and `line` is set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbsSpec {
    pub positions: Option<Vec<[f64; 3]>>,
    pub line: Option<LineSpec>,
    /// Per-run uniform perturbation: `±jitter_m` in x and y, `[0, jitter_m]` upward in z.
    pub jitter_m: f64,
}

impl AbsSpec {
    pub fn nominal_positions(&self) -> Vec<Position3> {
        match (&self.positions, &self.line) {
            (Some(p), _) => p.iter().map(|&q| pos(q)).collect(),
            (None, Some(l)) => (0..l.count)
                .map(|k| {
                    let k = k as f64;
                    Position3::new(
                        l.origin[0] + k * l.spacing[0],
                        l.origin[1] + k * l.spacing[1],
                        l.origin[2] + k * l.spacing[2],
                    )
                })
                .collect(),
            (None, None) => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Terminals {
    pub sources: Vec<[f64; 3]>,
    pub destinations: Vec<[f64; 3]>,
    pub interferers: Vec<[f64; 3]>,
}

/// Unicast demand from `sources[source]` to `destinations[destination]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommodityEntry {
    pub source: usize,
    pub destination: usize,
    #[serde(default = "one")]
    pub demand: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsSection {
    /// Weight of sources and destinations.
    pub terminal: f64,
    /// Weight of relaying ABSs.
    pub abs: f64,
    /// Exponent of the multi-commodity aggregate weights.
    pub p: f64,
}

impl Default for WeightsSection {
    fn default() -> Self {
        Self { terminal: 1.0, abs: 0.01, p: crate::spectral::DEFAULT_P }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub bandwidth_hz: f64,
    pub r_int_m: f64,
    pub zeta: f64,
    pub kappa: f64,
    pub y0: f64,
    /// Communication range shared by all nodes; absent means unbounded.
    pub range_threshold_m: Option<f64>,
    pub allow_ground_links: bool,
}

impl Default for GraphSection {
    fn default() -> Self {
        let g = GraphParams::default();
        Self {
            bandwidth_hz: g.bandwidth_hz,
            r_int_m: g.r_int_m,
            zeta: g.zeta,
            kappa: g.kappa,
            y0: g.y0,
            range_threshold_m: None,
            allow_ground_links: g.allow_ground_links,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRuleName {
    #[default]
    PerAbs,
    Joint,
    Saturated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FiedlerSourceName {
    #[default]
    Centralized,
    Distributed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MobilitySection {
    pub step_time_s: f64,
    pub v_max: f64,
    pub height_floor_m: f64,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub fd_step_m: f64,
    pub max_halvings: u32,
    pub step_rule: StepRuleName,
    /// Gain of the saturated step rule.
    pub saturation_gain: f64,
    pub fiedler_source: FiedlerSourceName,
}

impl Default for MobilitySection {
    fn default() -> Self {
        let m = MobilityConfig::default();
        Self {
            step_time_s: m.step_time_s,
            v_max: m.v_max,
            height_floor_m: m.height_floor_m,
            max_iterations: m.max_iterations,
            convergence_tol: m.convergence_tol,
            fd_step_m: m.fd_step_m,
            max_halvings: m.max_halvings,
            step_rule: StepRuleName::PerAbs,
            saturation_gain: 10.0,
            fiedler_source: FiedlerSourceName::Centralized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub eps: f64,
    pub max_augmentations: usize,
}

impl Default for FlowSection {
    fn default() -> Self {
        let c = ConcurrentFlowConfig::default();
        Self { eps: c.eps, max_augmentations: c.max_augmentations }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistFiedlerSection {
    pub outer_iters: usize,
    pub gossip_rounds: usize,
}

impl Default for DistFiedlerSection {
    fn default() -> Self {
        let c = DistFiedlerConfig::default();
        Self { outer_iters: c.outer_iters, gossip_rounds: c.gossip_rounds }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedModelName {
    /// Segments take their logged slot duration.
    LoggedTimes,
    /// Segments are flown at `cruise_speed_mps`.
    #[default]
    Cruise,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyEvalSection {
    pub speed_model: SpeedModelName,
    /// Defaults to `mobility.v_max`.
    pub cruise_speed_mps: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub height_m: f64,
    pub runs: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self { height_m: 20.0, runs: 100 }
    }
}

fn one() -> f64 {
    1.0
}

fn default_runs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub flow_eval: FlowEval,
    #[serde(default = "default_runs")]
    pub monte_carlo_runs: usize,
    #[serde(default)]
    pub rng_seed: u64,
    pub region: RegionSpec,
    pub abs: AbsSpec,
    pub terminals: Terminals,
    #[serde(default)]
    pub commodities: Vec<CommodityEntry>,
    #[serde(default)]
    pub weights: WeightsSection,
    #[serde(default)]
    pub graph: GraphSection,
    #[serde(default)]
    pub channel: ChannelParams,
    #[serde(default)]
    pub mobility: MobilitySection,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub distfiedler: DistFiedlerSection,
    #[serde(default)]
    pub energy: EnergyParams,
    #[serde(default)]
    pub energy_eval: EnergyEvalSection,
    #[serde(default)]
    pub baseline: BaselineSection,
}

fn pos(a: [f64; 3]) -> Position3 {
    Position3::new(a[0], a[1], a[2])
}

fn invalid(key: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Validation { key: key.into(), msg: msg.into() }
}

impl Scenario {
    /// Parses, applies defaults and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse(e.to_string().trim_end().to_string()))?;
        let s: Scenario = table.try_into().map_err(|e: toml::de::Error| Error::Schema(e.to_string().trim_end().to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("unsupported version {}; expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        if self.monte_carlo_runs < 1 {
            return Err(invalid("monte_carlo_runs", "must be >= 1"));
        }
        let r = &self.region;
        for a in 0..3 {
            if !(r.min[a] < r.max[a]) || !r.min[a].is_finite() || !r.max[a].is_finite() {
                return Err(invalid("region", format!("axis {a}: need min < max, got {} and {}", r.min[a], r.max[a])));
            }
        }
        if r.min[2] > 0.0 {
            return Err(invalid("region.min", "terrestrial nodes sit at z = 0, so region.min z must be <= 0"));
        }
        let region = r.region();

        match (&self.abs.positions, &self.abs.line) {
            (Some(_), Some(_)) => return Err(invalid("abs", "set exactly one of abs.positions and abs.line")),
            (None, None) => return Err(invalid("abs", "missing abs.positions or abs.line")),
            _ => {}
        }
        if !(self.abs.jitter_m >= 0.0) {
            return Err(invalid("abs.jitter_m", "must be >= 0"));
        }
        let abs = self.abs.nominal_positions();
        if abs.is_empty() {
            return Err(invalid("abs", "need at least one ABS"));
        }
        let floor = self.mobility.height_floor_m;
        for (i, p) in abs.iter().enumerate() {
            if !region.contains(p) {
                return Err(invalid(format!("abs.positions[{i}]"), format!("{p:?} lies outside the region")));
            }
            if p.z <= 0.0 {
                return Err(invalid(format!("abs.positions[{i}]"), "ABS height must be > 0"));
            }
            if p.z < floor {
                return Err(invalid(
                    format!("abs.positions[{i}]"),
                    format!("height {} is below mobility.height_floor_m = {floor}", p.z),
                ));
            }
        }

        let t = &self.terminals;
        if t.sources.is_empty() {
            return Err(invalid("terminals.sources", "need at least one source"));
        }
        if t.destinations.is_empty() {
            return Err(invalid("terminals.destinations", "need at least one destination"));
        }
        for (name, list) in [("sources", &t.sources), ("destinations", &t.destinations), ("interferers", &t.interferers)] {
            for (i, &q) in list.iter().enumerate() {
                let key = format!("terminals.{name}[{i}]");
                if q[2] != 0.0 {
                    return Err(invalid(key, "terrestrial nodes must have z = 0"));
                }
                if !region.contains(&pos(q)) {
                    return Err(invalid(key, format!("{q:?} lies outside the region")));
                }
            }
        }

        for (k, c) in self.commodities.iter().enumerate() {
            if c.source >= t.sources.len() {
                return Err(invalid(format!("commodities[{k}].source"), format!("index {} out of range", c.source)));
            }
            if c.destination >= t.destinations.len() {
                return Err(invalid(
                    format!("commodities[{k}].destination"),
                    format!("index {} out of range", c.destination),
                ));
            }
            if !(c.demand > 0.0) {
                return Err(invalid(format!("commodities[{k}].demand"), "must be > 0"));
            }
        }
        if self.flow_eval == FlowEval::MultiUnicast && self.commodities.is_empty() {
            return Err(invalid("commodities", "multi-unicast flow evaluation needs at least one commodity"));
        }

        let w = &self.weights;
        if !(w.terminal > 0.0) {
            return Err(invalid("weights.terminal", "must be > 0"));
        }
        if !(w.abs > 0.0) {
            return Err(invalid("weights.abs", "must be > 0"));
        }
        if !(0.0..1.0).contains(&w.p) {
            return Err(invalid("weights.p", "must lie in [0, 1)"));
        }

        let g = &self.graph;
        for (key, v) in [
            ("graph.bandwidth_hz", g.bandwidth_hz),
            ("graph.r_int_m", g.r_int_m),
            ("graph.zeta", g.zeta),
            ("graph.kappa", g.kappa),
            ("graph.y0", g.y0),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(key, format!("must be > 0, got {v}")));
            }
        }
        if let Some(r) = g.range_threshold_m {
            if !(r > 0.0) {
                return Err(invalid("graph.range_threshold_m", "must be > 0"));
            }
        }
        self.channel.validate()?;
        self.mobility_config()?.validate()?;
        if !(self.mobility.max_halvings <= 60) {
            return Err(invalid("mobility.max_halvings", "must be <= 60"));
        }
        if self.mobility.step_rule == StepRuleName::Saturated && !(self.mobility.saturation_gain > 0.0) {
            return Err(invalid("mobility.saturation_gain", "must be > 0"));
        }
        if !(self.flow.eps > 0.0 && self.flow.eps < 1.0) {
            return Err(invalid("flow.eps", "must lie in (0, 1)"));
        }
        if self.flow.max_augmentations < 1 {
            return Err(invalid("flow.max_augmentations", "must be >= 1"));
        }
        if self.distfiedler.outer_iters < 1 {
            return Err(invalid("distfiedler.outer_iters", "must be >= 1"));
        }
        if self.distfiedler.gossip_rounds < 1 {
            return Err(invalid("distfiedler.gossip_rounds", "must be >= 1"));
        }
        self.energy.validate()?;
        if let Some(v) = self.energy_eval.cruise_speed_mps {
            if !(v > 0.0) {
                return Err(invalid("energy_eval.cruise_speed_mps", "must be > 0"));
            }
        }
        let b = &self.baseline;
        if !(b.height_m > 0.0 && b.height_m >= region.min.z && b.height_m <= region.max.z) {
            return Err(invalid("baseline.height_m", "must be > 0 and inside the region"));
        }
        if b.runs < 1 {
            return Err(invalid("baseline.runs", "must be >= 1"));
        }
        Ok(())
    }

    pub fn region(&self) -> Region {
        self.region.region()
    }

    pub fn n_terminals(&self) -> usize {
        self.terminals.sources.len() + self.terminals.destinations.len()
    }

    pub fn n_abs(&self) -> usize {
        self.abs.nominal_positions().len()
    }

    /// Flow-graph indices of the ABSs.
    pub fn abs_ids(&self) -> Vec<usize> {
        (self.n_terminals()..self.n_terminals() + self.n_abs()).collect()
    }

    fn source_id(&self, k: usize) -> usize {
        k
    }

    fn destination_id(&self, k: usize) -> usize {
        self.terminals.sources.len() + k
    }

    pub fn graph_params(&self) -> GraphParams {
        let g = &self.graph;
        let n = self.n_terminals() + self.n_abs();
        GraphParams {
            bandwidth_hz: g.bandwidth_hz,
            r_int_m: g.r_int_m,
            zeta: g.zeta,
            kappa: g.kappa,
            y0: g.y0,
            range_threshold_m: g.range_threshold_m.map(|r| vec![r; n]),
            allow_ground_links: g.allow_ground_links,
            channel: self.channel,
        }
    }

    pub fn mobility_config(&self) -> Result<MobilityConfig> {
        let m = &self.mobility;
        let step_rule = match m.step_rule {
            StepRuleName::PerAbs => StepRule::PerAbs,
            StepRuleName::Joint => StepRule::Joint,
            StepRuleName::Saturated => StepRule::Saturated { gain: m.saturation_gain },
        };
        let fiedler_source = match m.fiedler_source {
            FiedlerSourceName::Centralized => FiedlerSource::Centralized,
            FiedlerSourceName::Distributed => FiedlerSource::Distributed(self.dist_config()),
        };
        Ok(MobilityConfig {
            step_time_s: m.step_time_s,
            v_max: m.v_max,
            height_floor_m: m.height_floor_m,
            max_iterations: m.max_iterations,
            convergence_tol: m.convergence_tol,
            fd_step_m: m.fd_step_m,
            max_halvings: m.max_halvings,
            region: Some(self.region()),
            fiedler_source,
            step_rule,
        })
    }

    pub fn dist_config(&self) -> DistFiedlerConfig {
        DistFiedlerConfig { outer_iters: self.distfiedler.outer_iters, gossip_rounds: self.distfiedler.gossip_rounds }
    }

    pub fn speed_model(&self) -> SpeedModel {
        match self.energy_eval.speed_model {
            SpeedModelName::LoggedTimes => SpeedModel::LoggedTimes,
            SpeedModelName::Cruise => SpeedModel::Cruise(self.energy_eval.cruise_speed_mps.unwrap_or(self.mobility.v_max)),
        }
    }

    pub fn flow_metric(&self) -> Result<FlowMetric> {
        Ok(match self.flow_eval {
            FlowEval::Single => FlowMetric::Single { source: self.source_id(0), destination: self.destination_id(0) },
            FlowEval::Multicast => FlowMetric::Multicast {
                source: self.source_id(0),
                destinations: (0..self.terminals.destinations.len()).map(|k| self.destination_id(k)).collect(),
            },
            FlowEval::MultiUnicast => FlowMetric::MultiUnicast {
                commodities: self.commodity_specs()?,
                config: ConcurrentFlowConfig { eps: self.flow.eps, max_augmentations: self.flow.max_augmentations },
            },
        })
    }

    /// Commodities with terminal weight on their own endpoints and ABS weight elsewhere.
    pub fn commodity_specs(&self) -> Result<Vec<CommoditySpec>> {
        let n = self.n_terminals() + self.n_abs();
        self.commodities
            .iter()
            .map(|c| {
                CommoditySpec::with_endpoint_weights(
                    n,
                    self.source_id(c.source),
                    self.destination_id(c.destination),
                    c.demand,
                    self.weights.terminal,
                    self.weights.abs,
                )
            })
            .collect()
    }

    /// Node weights of the weighted objective: aggregated over commodities
    /// for multi-unicast, terminal/ABS weights otherwise.
    pub fn weight_matrix(&self) -> Result<WeightMatrix> {
        match self.flow_eval {
            FlowEval::MultiUnicast => aggregate_weights(&self.commodity_specs()?, self.weights.p),
            _ => {
                let kinds: Vec<NodeKind> = self.node_kinds();
                WeightMatrix::practical(&kinds, self.weights.terminal, self.weights.abs)
            }
        }
    }

    pub fn objective(&self, mode: Mode) -> Result<Objective> {
        match mode {
            Mode::Unweighted => Ok(Objective::Normalized),
            _ => Ok(Objective::Weighted(self.weight_matrix()?)),
        }
    }

    pub fn node_kinds(&self) -> Vec<NodeKind> {
        let t = &self.terminals;
        std::iter::repeat_n(NodeKind::Source, t.sources.len())
            .chain(std::iter::repeat_n(NodeKind::Destination, t.destinations.len()))
            .chain(std::iter::repeat_n(NodeKind::Abs, self.n_abs()))
            .collect()
    }

    fn state_with_abs(&self, abs: Vec<Position3>) -> Result<NetworkState> {
        let t = &self.terminals;
        let mut nodes: Vec<Node> = t.sources.iter().map(|&q| Node::new(pos(q), NodeKind::Source)).collect();
        nodes.extend(t.destinations.iter().map(|&q| Node::new(pos(q), NodeKind::Destination)));
        nodes.extend(abs.into_iter().map(|p| Node::new(p, NodeKind::Abs)));
        NetworkState::new(nodes, t.interferers.iter().map(|&q| pos(q)).collect(), self.graph_params())
    }

    /// Initial state of run `run`: nominal ABS positions plus jitter, kept
    /// inside the region and above the height floor.
    pub fn initial_state(&self, run: usize, seed: u64) -> Result<NetworkState> {
        let mut rng = run_rng(seed, run as u64);
        let region = self.region();
        let j = self.abs.jitter_m;
        let lowest = self.mobility.height_floor_m.max(region.min.z);
        let abs = self
            .abs
            .nominal_positions()
            .into_iter()
            .map(|p| {
                if j == 0.0 {
                    return p;
                }
                let dx = rng.random_range(-j..=j);
                let dy = rng.random_range(-j..=j);
                let dz = rng.random_range(0.0..=j);
                Position3::new(
                    (p.x + dx).clamp(region.min.x, region.max.x),
                    (p.y + dy).clamp(region.min.y, region.max.y),
                    (p.z + dz).clamp(lowest, region.max.z),
                )
            })
            .collect();
        self.state_with_abs(abs)
    }

    /// ABSs uniform on the region's horizontal extent at `baseline.height_m`.
    pub fn random_state(&self, run: usize, seed: u64) -> Result<NetworkState> {
        let mut rng = run_rng(seed, BASELINE_STREAM_OFFSET + run as u64);
        let r = self.region();
        let h = self.baseline.height_m;
        let abs = (0..self.n_abs())
            .map(|_| Position3::new(rng.random_range(r.min.x..=r.max.x), rng.random_range(r.min.y..=r.max.y), h))
            .collect();
        self.state_with_abs(abs)
    }
}

fn run_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub values: Vec<f64>,
}

impl BaselineStats {
    fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt(), values }
    }
}

/// Flow metric of `runs` random stationary placements; deterministic per seed.
pub fn random_stationary_baseline(scenario: &Scenario, runs: usize, seed: u64) -> Result<BaselineStats> {
    if runs < 1 {
        return Err(invalid("baseline.runs", "must be >= 1"));
    }
    let metric = scenario.flow_metric()?;
    let values = (0..runs)
        .into_par_iter()
        .map(|r| metric.evaluate(&build_capacity_graph(&scenario.random_state(r, seed)?)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(BaselineStats::from_values(values))
}

/// Overrides applied on top of a scenario file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOverrides {
    pub mode: Option<Mode>,
    pub iters: Option<usize>,
    pub runs: Option<usize>,
    pub seed: Option<u64>,
}

impl Scenario {
    pub fn with_overrides(mut self, o: RunOverrides) -> Result<Self> {
        if let Some(m) = o.mode {
            self.mode = m;
        }
        if let Some(l) = o.iters {
            self.mobility.max_iterations = l;
        }
        if let Some(r) = o.runs {
            self.monte_carlo_runs = r;
        }
        if let Some(s) = o.seed {
            self.rng_seed = s;
        }
        self.validate()?;
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run: usize,
    /// Max-flow trajectory, or the single placement of the random baseline.
    pub log: TrajectoryLog,
    /// Straight-line replay of the ABSs (energy-efficient mode).
    pub straight: Option<TrajectoryLog>,
    pub energy: Option<Vec<EnergyComparison>>,
    /// Distributed Fiedler trace on the initial graph (distributed Fiedler source).
    pub dist_trace: Option<MessageTrace>,
}

impl RunOutcome {
    pub fn final_flow(&self) -> f64 {
        self.log.final_flow().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub scenario: String,
    pub mode: Mode,
    pub metric_name: &'static str,
    pub seed: u64,
    pub runs: Vec<RunOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub scenario: String,
    pub mode: Mode,
    pub metric: &'static str,
    pub seed: u64,
    pub runs: usize,
    pub final_flow: BaselineStats,
    pub stop_reasons: BTreeMap<String, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_savings_pct: Option<f64>,
}

impl ExperimentResult {
    pub fn final_flows(&self) -> Vec<f64> {
        self.runs.iter().map(RunOutcome::final_flow).collect()
    }

    pub fn mean_final_flow(&self) -> f64 {
        let f = self.final_flows();
        f.iter().sum::<f64>() / f.len() as f64
    }

    pub fn summary(&self) -> ExperimentSummary {
        let mut stop_reasons = BTreeMap::new();
        for r in &self.runs {
            let name = serde_json::to_value(r.log.stop_reason)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default();
            *stop_reasons.entry(name).or_insert(0) += 1;
        }
        let min_savings_pct = self
            .runs
            .iter()
            .filter_map(|r| r.energy.as_ref())
            .flatten()
            .filter_map(|e| e.savings_pct)
            .reduce(f64::min);
        ExperimentSummary {
            scenario: self.scenario.clone(),
            mode: self.mode,
            metric: self.metric_name,
            seed: self.seed,
            runs: self.runs.len(),
            final_flow: BaselineStats::from_values(self.final_flows()),
            stop_reasons,
            min_savings_pct,
        }
    }

    /// Writes the CSVs that apply to this mode and returns their paths.
    pub fn write_outputs(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();

        let path = dir.join("trajectories.csv");
        write_trajectories_csv(self.runs.iter().map(|r| (r.run, &r.log)), File::create(&path)?)?;
        written.push(path);

        if self.runs.iter().any(|r| r.straight.is_some()) {
            let path = dir.join("straight_trajectories.csv");
            write_trajectories_csv(
                self.runs.iter().filter_map(|r| r.straight.as_ref().map(|s| (r.run, s))),
                File::create(&path)?,
            )?;
            written.push(path);
        }

        let path = dir.join("flow.csv");
        {
            let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&path)?));
            w.write_record(["run", "slot", "metric_name", "value"])?;
            for r in &self.runs {
                for s in &r.log.slots {
                    if let Some(v) = s.flow_metric {
                        w.write_record([r.run.to_string(), s.slot.to_string(), self.metric_name.to_string(), v.to_string()])?;
                    }
                }
            }
            w.flush()?;
        }
        written.push(path);

        if self.runs.iter().any(|r| r.energy.is_some()) {
            let path = dir.join("energy.csv");
            let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&path)?));
            w.write_record(["run", "abs_id", "D_m", "E_maxflow_J", "E_efficient_J", "savings_pct"])?;
            for r in &self.runs {
                for e in r.energy.iter().flatten() {
                    w.write_record([
                        r.run.to_string(),
                        e.node_id.to_string(),
                        e.d_maxflow_m.to_string(),
                        e.e_maxflow_j.to_string(),
                        e.e_efficient_j.to_string(),
                        e.savings_pct.map_or(String::new(), |s| s.to_string()),
                    ])?;
                }
            }
            w.flush()?;
            written.push(path);
        }

        if let Some(trace) = self.runs.iter().find_map(|r| r.dist_trace.as_ref()) {
            let path = dir.join("distfiedler_error.csv");
            trace.write_csv(BufWriter::new(File::create(&path)?))?;
            written.push(path);
        }

        let path = dir.join("summary.json");
        let mut f = BufWriter::new(File::create(&path)?);
        serde_json::to_writer_pretty(&mut f, &self.summary()).map_err(|e| Error::Invalid(e.to_string()))?;
        writeln!(f)?;
        f.flush()?;
        written.push(path);
        Ok(written)
    }
}

/// CSV with columns `run,slot,node_id,x,y,z`.
pub fn write_trajectories_csv<'a, W: Write>(
    logs: impl IntoIterator<Item = (usize, &'a TrajectoryLog)>,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(writer));
    w.write_record(["run", "slot", "node_id", "x", "y", "z"])?;
    for (run, log) in logs {
        for s in &log.slots {
            for (k, p) in s.positions.iter().enumerate() {
                w.write_record([
                    run.to_string(),
                    s.slot.to_string(),
                    log.node_ids[k].to_string(),
                    p.x.to_string(),
                    p.y.to_string(),
                    p.z.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct TrajectoryRow {
    pub run: usize,
    pub slot: usize,
    pub node_id: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub fn read_trajectories_csv(path: &Path) -> Result<Vec<TrajectoryRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Re-checks speed, height-floor and fixity invariants on trajectory rows.
/// Slot `k` is taken to start at `k · step_time_s`.
pub fn validate_trajectory_rows(rows: &[TrajectoryRow], scenario: &Scenario) -> Result<()> {
    let abs: std::collections::BTreeSet<usize> = scenario.abs_ids().into_iter().collect();
    let m = &scenario.mobility;
    let mut last: BTreeMap<(usize, usize), (usize, Position3)> = BTreeMap::new();
    for row in rows {
        let p = Position3::new(row.x, row.y, row.z);
        let moving = abs.contains(&row.node_id);
        if moving && m.height_floor_m > 0.0 && p.z < m.height_floor_m - 1e-9 {
            return Err(Error::Invalid(format!(
                "run {} slot {}: ABS {} at height {} below the floor",
                row.run, row.slot, row.node_id, p.z
            )));
        }
        if let Some(&(slot, q)) = last.get(&(row.run, row.node_id)) {
            let d = p.distance(&q);
            let allowed = if moving { m.v_max * m.step_time_s * (row.slot - slot) as f64 + 1e-9 } else { 0.0 };
            if row.slot <= slot || d > allowed {
                return Err(Error::Invalid(format!(
                    "run {} node {}: moved {d} m between slots {slot} and {}",
                    row.run, row.node_id, row.slot
                )));
            }
        }
        last.insert((row.run, row.node_id), (row.slot, p));
    }
    Ok(())
}

/// Single-slot log of a stationary placement.
fn stationary_log(state: &NetworkState, metric: &FlowMetric) -> Result<TrajectoryLog> {
    let g = build_capacity_graph(state)?;
    let n = state.len();
    Ok(TrajectoryLog {
        node_ids: (0..n).collect(),
        moving: state.nodes.iter().map(|x| x.kind.is_aerial()).collect(),
        slots: vec![SlotRecord {
            slot: 0,
            time_s: 0.0,
            positions: state.positions(),
            lambda2: None,
            flow_metric: Some(metric.evaluate(&g)?),
            displacement: vec![0.0; n],
        }],
        path_length: vec![0.0; n],
        stop_reason: StopReason::Stationary,
    })
}

/// Executes one Monte-Carlo run of `scenario.mode`.
pub fn run_single(scenario: &Scenario, run: usize) -> Result<RunOutcome> {
    let seed = scenario.rng_seed;
    let metric = scenario.flow_metric()?;
    if scenario.mode == Mode::RandomBaseline {
        let log = stationary_log(&scenario.random_state(run, seed)?, &metric)?;
        return Ok(RunOutcome { run, log, straight: None, energy: None, dist_trace: None });
    }
    let cfg = scenario.mobility_config()?;
    let objective = scenario.objective(scenario.mode)?;
    let initial = scenario.initial_state(run, seed)?;
    let dist_trace = match cfg.fiedler_source {
        FiedlerSource::Distributed(d) => {
            let g = build_capacity_graph(&initial)?;
            Some(distributed_fiedler(&g, &objective.weights(&g)?, d.outer_iters, d.gossip_rounds)?)
        }
        FiedlerSource::Centralized => None,
    };
    let log = run_maxflow_trajectory(&initial, &cfg, &objective, &metric)?;
    let (straight, energy) = if scenario.mode == Mode::EnergyEfficient {
        let abs: Vec<usize> = scenario.abs_ids();
        let q0: Vec<Position3> = abs.iter().map(|&i| log.initial_positions()[i]).collect();
        let q_l: Vec<Position3> = abs.iter().map(|&i| log.final_positions()[i]).collect();
        let mut straight = straight_line_trajectory(&q0, &q_l, &cfg)?;
        straight.node_ids = abs;
        let speed = scenario.speed_model();
        let e_max = trajectory_energy(&log, &scenario.energy, speed)?;
        let e_eff = trajectory_energy(&straight, &scenario.energy, speed)?;
        let rows = compare(&e_max, &e_eff)?;
        (Some(straight), Some(rows))
    } else {
        (None, None)
    };
    Ok(RunOutcome { run, log, straight, energy, dist_trace })
}

/// Runs all Monte-Carlo runs in parallel; outcomes are ordered by run index.
pub fn run_experiment(scenario: &Scenario) -> Result<ExperimentResult> {
    scenario.validate()?;
    let runs = (0..scenario.monte_carlo_runs)
        .into_par_iter()
        .map(|r| run_single(scenario, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult {
        scenario: scenario.name.clone(),
        mode: scenario.mode,
        metric_name: scenario.flow_metric()?.name(),
        seed: scenario.rng_seed,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig1() -> Scenario {
        load_bundled("fig1_single_si").unwrap()
    }

    fn small(mode: Mode) -> Scenario {
        let mut s = fig1();
        s.mode = mode;
        s.monte_carlo_runs = 2;
        s.mobility.max_iterations = 5;
        s
    }

    #[test]
    fn bundled_scenarios_load() {
        for (name, _) in BUNDLED {
            let s = load_bundled(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(&s.name, name);
        }
    }

    #[test]
    fn fig1_layout() {
        let s = fig1();
        let st = s.initial_state(0, 0).unwrap();
        assert_eq!(s.n_abs(), 8);
        assert_eq!(st.nodes[0].position, Position3::new(0.0, 0.0, 0.0));
        assert_eq!(st.nodes[1].position, Position3::new(200.0, 0.0, 0.0));
        assert_eq!(st.interferers, vec![Position3::new(30.0, 0.0, 0.0)]);
        let nominal = s.abs.nominal_positions();
        for (i, p) in nominal.iter().enumerate() {
            assert_eq!(*p, Position3::new(0.0, 25.0 * (i + 1) as f64, 20.0));
        }
    }

    const MINIMAL: &str = r#"
schema_version = 1
[region]
min = [0.0, 0.0, 0.0]
max = [100.0, 100.0, 50.0]
[abs]
positions = [[10.0, 10.0, 20.0], [20.0, 30.0, 20.0]]
[terminals]
sources = [[0.0, 0.0, 0.0]]
destinations = [[100.0, 0.0, 0.0]]
"#;

    #[test]
    fn defaults_applied() {
        let s = Scenario::from_toml_str(MINIMAL).unwrap();
        assert_eq!(s.graph.bandwidth_hz, 1.0);
        assert_eq!(s.mode, Mode::Weighted);
        assert_eq!(s.monte_carlo_runs, 1);
        assert_eq!(s.mobility.v_max, 5.0);
    }

    #[test]
    fn negative_r_int_names_key() {
        let text = format!("{MINIMAL}[graph]\nr_int_m = -1.0\n");
        match Scenario::from_toml_str(&text) {
            Err(Error::Validation { key, .. }) => assert_eq!(key, "graph.r_int_m"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn diagnostics_are_distinct() {
        assert!(matches!(Scenario::from_toml_str("schema_version = "), Err(Error::Parse(_))));
        let unknown = format!("{MINIMAL}[mobility]\nwarp_speed = 9.0\n");
        assert!(matches!(Scenario::from_toml_str(&unknown), Err(Error::Schema(_))));
        let bad_version = MINIMAL.replace("schema_version = 1", "schema_version = 7");
        assert!(matches!(Scenario::from_toml_str(&bad_version), Err(Error::Validation { .. })));
    }

    #[test]
    fn invariant_violations() {
        let lifted = MINIMAL.replace("sources = [[0.0, 0.0, 0.0]]", "sources = [[0.0, 0.0, 3.0]]");
        match Scenario::from_toml_str(&lifted) {
            Err(Error::Validation { key, .. }) => assert_eq!(key, "terminals.sources[0]"),
            other => panic!("{other:?}"),
        }
        let outside = MINIMAL.replace("[10.0, 10.0, 20.0]", "[10.0, 10.0, 80.0]");
        match Scenario::from_toml_str(&outside) {
            Err(Error::Validation { key, .. }) => assert_eq!(key, "abs.positions[0]"),
            other => panic!("{other:?}"),
        }
        let zero_runs = format!("monte_carlo_runs = 0\n{MINIMAL}");
        match Scenario::from_toml_str(&zero_runs) {
            Err(Error::Validation { key, .. }) => assert_eq!(key, "monte_carlo_runs"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn toml_round_trip() {
        let s = fig1();
        assert_eq!(Scenario::from_toml_str(&s.to_toml_string().unwrap()).unwrap(), s);
    }

    #[test]
    fn mode_parsing() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("fastest".parse::<Mode>().is_err());
    }

    #[test]
    fn jitter_is_seeded_per_run() {
        let s = fig1();
        assert_eq!(s.initial_state(3, 9).unwrap(), s.initial_state(3, 9).unwrap());
        assert_ne!(s.initial_state(3, 9).unwrap(), s.initial_state(4, 9).unwrap());
        assert_ne!(s.initial_state(3, 9).unwrap(), s.initial_state(3, 10).unwrap());
        let region = s.region();
        for p in s.initial_state(5, 1).unwrap().positions().iter().skip(2) {
            assert!(region.contains(p) && p.z >= 20.0);
        }
    }

    #[test]
    fn baseline_determinism() {
        let s = fig1();
        let a = random_stationary_baseline(&s, 8, 11).unwrap();
        let b = random_stationary_baseline(&s, 8, 11).unwrap();
        assert_eq!(a, b);
        let single = random_stationary_baseline(&s, 1, 11).unwrap();
        assert_eq!(single.mean, single.values[0]);
        assert_eq!(single.std, 0.0);
        assert!(random_stationary_baseline(&s, 0, 11).is_err());
    }

    #[test]
    fn experiment_outputs_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let s = small(Mode::Weighted);
        let res = run_experiment(&s).unwrap();
        assert_eq!(res.runs.iter().map(|r| r.run).collect::<Vec<_>>(), vec![0, 1]);
        res.write_outputs(dir.path()).unwrap();
        let rows = read_trajectories_csv(&dir.path().join("trajectories.csv")).unwrap();
        assert!(!rows.is_empty());
        validate_trajectory_rows(&rows, &s).unwrap();

        let mut broken = rows.clone();
        let k = broken.iter().rposition(|r| r.node_id == 2).unwrap();
        broken[k].x += 50.0;
        assert!(validate_trajectory_rows(&broken, &s).is_err());

        let flow = std::fs::read_to_string(dir.path().join("flow.csv")).unwrap();
        assert!(flow.starts_with("run,slot,metric_name,value\n0,0,max_flow,"));
        assert!(!dir.path().join("energy.csv").exists());
    }

    #[test]
    fn energy_mode_compares_every_abs() {
        let s = small(Mode::EnergyEfficient);
        let res = run_experiment(&s).unwrap();
        for r in &res.runs {
            let e = r.energy.as_ref().unwrap();
            assert_eq!(e.iter().map(|x| x.node_id).collect::<Vec<_>>(), s.abs_ids());
            let st = r.straight.as_ref().unwrap();
            for (k, &id) in st.node_ids.iter().enumerate() {
                assert_eq!(st.final_positions()[k], r.log.final_positions()[id]);
            }
        }
    }

    #[test]
    fn random_baseline_mode_is_stationary() {
        let s = small(Mode::RandomBaseline);
        let res = run_experiment(&s).unwrap();
        let base = random_stationary_baseline(&s, 2, s.rng_seed).unwrap();
        assert_eq!(res.final_flows(), base.values);
        assert!(res.runs.iter().all(|r| r.log.slots.len() == 1));
    }

    #[test]
    fn no_interferers_still_valid() {
        let mut s = small(Mode::Weighted);
        s.terminals.interferers.clear();
        let res = run_experiment(&s).unwrap();
        let cfg = s.mobility_config().unwrap();
        for r in &res.runs {
            r.log.check_invariants(&cfg).unwrap();
            assert!(r.final_flow() > 0.0);
        }
    }

    #[test]
    fn distributed_source_writes_trace() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = small(Mode::Weighted);
        s.monte_carlo_runs = 1;
        s.mobility.max_iterations = 2;
        s.mobility.fiedler_source = FiedlerSourceName::Distributed;
        run_experiment(&s).unwrap().write_outputs(dir.path()).unwrap();
        let trace = std::fs::read_to_string(dir.path().join("distfiedler_error.csv")).unwrap();
        assert!(trace.starts_with("iteration,error_norm,messages_cumulative\n"));
    }

    #[test]
    fn overrides_revalidate() {
        let o = RunOverrides { runs: Some(0), ..Default::default() };
        assert!(fig1().with_overrides(o).is_err());
        let o = RunOverrides { mode: Some(Mode::Unweighted), iters: Some(7), runs: Some(3), seed: Some(5) };
        let s = fig1().with_overrides(o).unwrap();
        assert_eq!((s.mode, s.mobility.max_iterations, s.monte_carlo_runs, s.rng_seed), (Mode::Unweighted, 7, 3, 5));
    }
}
