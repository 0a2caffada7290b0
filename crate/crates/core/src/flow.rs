//! Single-commodity max flow, multicast evaluation and maximum concurrent flow.
//!
//! Every undirected capacity `a_ij` becomes two antiparallel arcs of capacity
//! `a_ij` each. Residual capacities below `RESIDUAL_REL_TOL · max a` are
//! treated as saturated.

use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};
use crate::netgraph::CapacityGraph;
use crate::spectral::CommoditySpec;

pub const RESIDUAL_REL_TOL: f64 = 1e-9;
pub const VERIFY_TOL: f64 = 1e-9;
pub const DEFAULT_EPS: f64 = 0.01;
pub const DEFAULT_MAX_AUGMENTATIONS: usize = 2_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    pub value: f64,
    /// Net flow on `(i, j)`; only positive entries are stored.
    pub edge_flows: BTreeMap<(usize, usize), f64>,
    /// Source side of a minimum cut.
    pub cut: Option<Vec<usize>>,
}

impl FlowResult {
    pub fn zero() -> Self {
        Self { value: 0.0, edge_flows: BTreeMap::new(), cut: None }
    }
}

fn check_node(g: &CapacityGraph, v: usize) -> Result<()> {
    if v >= g.len() {
        Err(Error::NodeOutOfRange(v))
    } else {
        Ok(())
    }
}

fn residual_tol(g: &CapacityGraph) -> f64 {
    RESIDUAL_REL_TOL * g.adjacency.max().max(0.0)
}

/// Fewest-hop augmenting path; neighbors are scanned in index order.
fn bfs_path(residual: &[Vec<f64>], s: usize, d: usize, tol: f64) -> (Vec<Option<usize>>, bool) {
    let n = residual.len();
    let mut parent = vec![None; n];
    let mut seen = vec![false; n];
    seen[s] = true;
    let mut queue = VecDeque::from([s]);
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if !seen[v] && residual[u][v] > tol {
                seen[v] = true;
                parent[v] = Some(u);
                if v == d {
                    return (parent, true);
                }
                queue.push_back(v);
            }
        }
    }
    (parent, false)
}

/// Edmonds–Karp max flow from `s` to `d`.
pub fn max_flow(g: &CapacityGraph, s: usize, d: usize) -> Result<FlowResult> {
    check_node(g, s)?;
    check_node(g, d)?;
    if s == d {
        return Err(Error::Invalid(format!("max_flow source == destination ({s})")));
    }
    let n = g.len();
    let tol = residual_tol(g);
    let mut residual: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| g.adjacency[(i, j)]).collect())
        .collect();
    let mut value = 0.0;
    loop {
        let (parent, found) = bfs_path(&residual, s, d, tol);
        if !found {
            break;
        }
        let mut bottleneck = f64::INFINITY;
        let mut v = d;
        while let Some(u) = parent[v] {
            bottleneck = bottleneck.min(residual[u][v]);
            v = u;
        }
        let mut v = d;
        while let Some(u) = parent[v] {
            residual[u][v] -= bottleneck;
            residual[v][u] += bottleneck;
            v = u;
        }
        value += bottleneck;
    }

    let mut edge_flows = BTreeMap::new();
    for i in 0..n {
        for j in 0..n {
            // r_ij = a − φ_ij and r_ji = a + φ_ij
            let phi = 0.5 * (residual[j][i] - residual[i][j]);
            if phi > 0.0 && g.adjacency[(i, j)] > 0.0 {
                edge_flows.insert((i, j), phi.min(g.adjacency[(i, j)]));
            }
        }
    }
    let mut reach = vec![false; n];
    reach[s] = true;
    let mut queue = VecDeque::from([s]);
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if !reach[v] && residual[u][v] > tol {
                reach[v] = true;
                queue.push_back(v);
            }
        }
    }
    let cut = (0..n).filter(|&i| reach[i]).collect();
    Ok(FlowResult { value, edge_flows, cut: Some(cut) })
}

/// Capacity of the cut `(S, S̄)` for `S = subset`.
pub fn cut_capacity(g: &CapacityGraph, subset: &[usize]) -> f64 {
    let n = g.len();
    let mut in_s = vec![false; n];
    for &i in subset {
        in_s[i] = true;
    }
    let mut c = 0.0;
    for i in (0..n).filter(|&i| in_s[i]) {
        for j in (0..n).filter(|&j| !in_s[j]) {
            c += g.adjacency[(i, j)];
        }
    }
    c
}

/// `min_{d ∈ dests} max_flow(s, d)`.
pub fn multicast_flow(g: &CapacityGraph, s: usize, dests: &[usize]) -> Result<f64> {
    if dests.is_empty() {
        return Err(Error::Invalid("multicast needs at least one destination".into()));
    }
    if dests.contains(&s) {
        return Err(Error::Invalid(format!("multicast source {s} is also a destination")));
    }
    let mut best = f64::INFINITY;
    for &d in dests {
        best = best.min(max_flow(g, s, d)?.value);
    }
    Ok(best)
}

/// Checks capacity, conservation and value consistency at `VERIFY_TOL`.
pub fn verify_flow(g: &CapacityGraph, result: &FlowResult, s: usize, d: usize) -> bool {
    let n = g.len();
    if s >= n || d >= n || !(result.value >= -VERIFY_TOL) {
        return false;
    }
    let mut net_out = vec![0.0; n];
    for (&(i, j), &f) in &result.edge_flows {
        if i >= n || j >= n || i == j {
            return false;
        }
        if f < -VERIFY_TOL || f > g.adjacency[(i, j)] + VERIFY_TOL {
            return false;
        }
        net_out[i] += f;
        net_out[j] -= f;
    }
    let scale = result.value.abs().max(1.0);
    for (v, &x) in net_out.iter().enumerate() {
        let expected = if v == s {
            result.value
        } else if v == d {
            -result.value
        } else {
            0.0
        };
        if (x - expected).abs() > VERIFY_TOL * scale {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcurrentFlowConfig {
    pub eps: f64,
    /// Cap on shortest-path augmentations.
    pub max_augmentations: usize,
}

impl Default for ConcurrentFlowConfig {
    fn default() -> Self {
        Self { eps: DEFAULT_EPS, max_augmentations: DEFAULT_MAX_AUGMENTATIONS }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcurrentFlowResult {
    /// Feasible concurrent throughput `f^m`.
    pub value: f64,
    /// Per-commodity arc flows `(i → j) ↦ f`, scaled to be jointly feasible;
    /// commodity `k` ships `value · D(k)`.
    pub commodity_flows: Vec<BTreeMap<(usize, usize), f64>>,
    /// Smallest dual bound seen; the optimum is at most this.
    pub upper_bound: f64,
    pub augmentations: usize,
    /// `value ≥ (1 − eps) · upper_bound`.
    pub certified: bool,
    pub diagnostic: Option<String>,
}

struct Arc {
    from: usize,
    to: usize,
    cap: f64,
}

/// Dense Dijkstra with lowest-index tie-breaking; returns distances and the
/// arc used to reach each node.
fn shortest_paths(
    n: usize,
    out_arcs: &[Vec<usize>],
    arcs: &[Arc],
    len: &[f64],
    s: usize,
) -> (Vec<f64>, Vec<Option<usize>>) {
    let mut dist = vec![f64::INFINITY; n];
    let mut via = vec![None; n];
    let mut done = vec![false; n];
    dist[s] = 0.0;
    for _ in 0..n {
        let mut u = None;
        for v in 0..n {
            if !done[v] && dist[v].is_finite() && u.map_or(true, |b: usize| dist[v] < dist[b]) {
                u = Some(v);
            }
        }
        let Some(u) = u else { break };
        done[u] = true;
        for &e in &out_arcs[u] {
            let nd = dist[u] + len[e];
            let t = arcs[e].to;
            if nd < dist[t] {
                dist[t] = nd;
                via[t] = Some(e);
            }
        }
    }
    (dist, via)
}

/// Maximum concurrent flow by multiplicative length updates (Garg–Könemann,
/// Fleischer phase order) with a primal-dual stopping rule.
///
/// Lengths are held as `l(e)/δ` with a separate log scale so they neither
/// underflow at start nor overflow near termination.
pub fn max_concurrent_flow(
    g: &CapacityGraph,
    commodities: &[CommoditySpec],
    cfg: ConcurrentFlowConfig,
) -> Result<ConcurrentFlowResult> {
    if commodities.is_empty() {
        return Err(Error::Invalid("need at least one commodity".into()));
    }
    if !(cfg.eps > 0.0 && cfg.eps < 0.5) {
        return Err(Error::Invalid(format!("eps must lie in (0, 0.5), got {}", cfg.eps)));
    }
    let n = g.len();
    let k_count = commodities.len();
    for c in commodities {
        check_node(g, c.source)?;
        check_node(g, c.destination)?;
        if c.source == c.destination || !(c.demand > 0.0) {
            return Err(Error::Invalid("commodity needs distinct endpoints and demand > 0".into()));
        }
    }

    // Upper bound from individual max flows; also detects disconnection.
    let mut ub = f64::INFINITY;
    for (k, c) in commodities.iter().enumerate() {
        let mf = max_flow(g, c.source, c.destination)?.value;
        if mf <= 0.0 {
            return Ok(ConcurrentFlowResult {
                value: 0.0,
                commodity_flows: vec![BTreeMap::new(); k_count],
                upper_bound: 0.0,
                augmentations: 0,
                certified: true,
                diagnostic: Some(format!(
                    "commodity {k} ({} -> {}) is disconnected",
                    c.source, c.destination
                )),
            });
        }
        ub = ub.min(mf / c.demand);
    }

    let tol = residual_tol(g);
    let mut arcs = Vec::new();
    let mut out_arcs = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            let c = g.adjacency[(i, j)];
            if i != j && c > tol {
                out_arcs[i].push(arcs.len());
                arcs.push(Arc { from: i, to: j, cap: c });
            }
        }
    }
    let m = arcs.len() as f64;
    let eps = cfg.eps / 3.0;
    // ln δ with δ = (m / (1 − ε))^{−1/ε}
    let ln_delta = -(m / (1.0 - eps)).ln() / eps;
    let mut log_scale = ln_delta;
    let mut len: Vec<f64> = arcs.iter().map(|a| 1.0 / a.cap).collect();

    // Scaled demands put the optimum in [1, K].
    let scaled: Vec<f64> = commodities.iter().map(|c| c.demand * ub / k_count as f64).collect();
    let mut arc_flow = vec![vec![0.0; arcs.len()]; k_count];
    let mut routed = vec![0.0; k_count];
    let mut upper = f64::INFINITY;
    let mut augmentations = 0;
    let mut certified = false;
    let mut diagnostic = None;

    let d_of = |len: &[f64]| arcs.iter().zip(len).map(|(a, l)| a.cap * l).sum::<f64>();
    // Throughput of the routed flow after scaling by its worst congestion.
    let primal = |routed: &[f64], arc_flow: &[Vec<f64>]| -> f64 {
        let mut congestion = 0.0f64;
        for (e, a) in arcs.iter().enumerate() {
            let total: f64 = arc_flow.iter().map(|f| f[e]).sum();
            congestion = congestion.max(total / a.cap);
        }
        let throughput = commodities
            .iter()
            .zip(routed)
            .map(|(c, r)| r / c.demand)
            .fold(f64::INFINITY, f64::min);
        if congestion > 0.0 {
            throughput / congestion
        } else {
            0.0
        }
    };

    'outer: loop {
        // Dual bound D(l) / α(l), invariant to the length scale.
        let mut alpha = 0.0;
        for c in commodities {
            let (dist, _) = shortest_paths(n, &out_arcs, &arcs, &len, c.source);
            alpha += c.demand * dist[c.destination];
        }
        upper = upper.min(d_of(&len) / alpha);

        for (k, c) in commodities.iter().enumerate() {
            let mut remaining = scaled[k];
            while remaining > 1e-12 * scaled[k] {
                if d_of(&len).ln() + log_scale >= 0.0 {
                    break 'outer;
                }
                if augmentations >= cfg.max_augmentations {
                    diagnostic = Some(format!(
                        "stopped after {augmentations} augmentations without certification"
                    ));
                    break 'outer;
                }
                let (_, via) = shortest_paths(n, &out_arcs, &arcs, &len, c.source);
                let mut path = Vec::new();
                let mut v = c.destination;
                while v != c.source {
                    let e = via[v].expect("connected commodity has a path");
                    path.push(e);
                    v = arcs[e].from;
                }
                let amount = path.iter().map(|&e| arcs[e].cap).fold(remaining, f64::min);
                for &e in &path {
                    arc_flow[k][e] += amount;
                    len[e] *= 1.0 + eps * amount / arcs[e].cap;
                }
                routed[k] += amount;
                remaining -= amount;
                augmentations += 1;
                let max_len = len.iter().cloned().fold(0.0, f64::max);
                if max_len > 1e150 {
                    for l in len.iter_mut() {
                        *l *= 1e-150;
                    }
                    log_scale += 150.0 * std::f64::consts::LN_10;
                }
            }
        }

        let value = primal(&routed, &arc_flow);
        if value >= (1.0 - cfg.eps) * upper {
            certified = true;
            break;
        }
    }

    let value = primal(&routed, &arc_flow);
    let mut commodity_flows = Vec::with_capacity(k_count);
    for (k, c) in commodities.iter().enumerate() {
        // Rescale commodity k to ship exactly value · D(k).
        let factor = if routed[k] > 0.0 { value * c.demand / routed[k] } else { 0.0 };
        let mut map = BTreeMap::new();
        for (e, a) in arcs.iter().enumerate() {
            let f = arc_flow[k][e] * factor;
            if f > 0.0 {
                *map.entry((a.from, a.to)).or_insert(0.0) += f;
            }
        }
        commodity_flows.push(map);
    }
    if !certified && value >= (1.0 - cfg.eps) * upper {
        certified = true;
    }
    Ok(ConcurrentFlowResult {
        value,
        commodity_flows,
        upper_bound: upper,
        augmentations,
        certified,
        diagnostic,
    })
}

/// Joint feasibility of a concurrent flow: per-commodity conservation with
/// throughput `value · D(k)` and shared arc capacities, at `VERIFY_TOL`.
pub fn verify_concurrent_flow(
    g: &CapacityGraph,
    commodities: &[CommoditySpec],
    result: &ConcurrentFlowResult,
) -> bool {
    let n = g.len();
    if result.commodity_flows.len() != commodities.len() {
        return false;
    }
    let mut load: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (c, flows) in commodities.iter().zip(&result.commodity_flows) {
        let mut net = vec![0.0; n];
        for (&(i, j), &f) in flows {
            if i >= n || j >= n || f < -VERIFY_TOL {
                return false;
            }
            net[i] += f;
            net[j] -= f;
            *load.entry((i, j)).or_insert(0.0) += f;
        }
        let target = result.value * c.demand;
        let scale = target.abs().max(1.0);
        for (v, &x) in net.iter().enumerate() {
            let expected = if v == c.source {
                target
            } else if v == c.destination {
                -target
            } else {
                0.0
            };
            if (x - expected).abs() > VERIFY_TOL * scale {
                return false;
            }
        }
    }
    load.iter()
        .all(|(&(i, j), &f)| f <= g.adjacency[(i, j)] * (1.0 + VERIFY_TOL) + VERIFY_TOL)
}

/// Flow metric evaluated on a capacity graph.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowMetric {
    Single { source: usize, destination: usize },
    Multicast { source: usize, destinations: Vec<usize> },
    MultiUnicast { commodities: Vec<CommoditySpec>, config: ConcurrentFlowConfig },
}

impl FlowMetric {
    pub fn name(&self) -> &'static str {
        match self {
            FlowMetric::Single { .. } => "max_flow",
            FlowMetric::Multicast { .. } => "multicast_flow",
            FlowMetric::MultiUnicast { .. } => "max_concurrent_flow",
        }
    }

    pub fn evaluate(&self, g: &CapacityGraph) -> Result<f64> {
        match self {
            FlowMetric::Single { source, destination } => Ok(max_flow(g, *source, *destination)?.value),
            FlowMetric::Multicast { source, destinations } => multicast_flow(g, *source, destinations),
            FlowMetric::MultiUnicast { commodities, config } => {
                Ok(max_concurrent_flow(g, commodities, *config)?.value)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::WeightMatrix;

    fn commodity(n: usize, s: usize, d: usize) -> CommoditySpec {
        CommoditySpec::new(s, d, 1.0, WeightMatrix::identity(n)).unwrap()
    }

    #[test]
    fn max_flow_examples() {
        let chain = CapacityGraph::from_edges(3, &[(0, 1, 2.0), (1, 2, 3.0)]).unwrap();
        let r = max_flow(&chain, 0, 2).unwrap();
        assert!((r.value - 2.0).abs() < 1e-12);
        assert!(verify_flow(&chain, &r, 0, 2));

        let two = CapacityGraph::from_edges(4, &[(0, 1, 2.0), (1, 3, 2.0), (0, 2, 3.0), (2, 3, 3.0)])
            .unwrap();
        let r = max_flow(&two, 0, 3).unwrap();
        assert!((r.value - 5.0).abs() < 1e-12);
        let cut = r.cut.clone().unwrap();
        assert!((cut_capacity(&two, &cut) - 5.0).abs() < 1e-12);

        let split = CapacityGraph::from_edges(4, &[(0, 1, 1.0), (2, 3, 1.0)]).unwrap();
        assert_eq!(max_flow(&split, 0, 3).unwrap().value, 0.0);
    }

    #[test]
    fn max_flow_errors() {
        let g = CapacityGraph::from_edges(2, &[(0, 1, 1.0)]).unwrap();
        assert!(matches!(max_flow(&g, 0, 5), Err(Error::NodeOutOfRange(5))));
        assert!(max_flow(&g, 1, 1).is_err());
    }

    #[test]
    fn multicast_examples() {
        let star = CapacityGraph::from_edges(4, &[(0, 1, 1.0), (0, 2, 2.0), (0, 3, 3.0)]).unwrap();
        assert!((multicast_flow(&star, 0, &[1, 2, 3]).unwrap() - 1.0).abs() < 1e-12);
        assert!((multicast_flow(&star, 0, &[3]).unwrap() - 3.0).abs() < 1e-12);
        assert!(multicast_flow(&star, 0, &[0, 1]).is_err());
        assert!(multicast_flow(&star, 0, &[]).is_err());
    }

    #[test]
    fn verify_flow_rejects_violations() {
        let g = CapacityGraph::from_edges(3, &[(0, 1, 2.0), (1, 2, 3.0)]).unwrap();
        let mut r = max_flow(&g, 0, 2).unwrap();
        assert!(verify_flow(&g, &FlowResult::zero(), 0, 2));
        r.edge_flows.insert((0, 1), 2.5);
        r.edge_flows.insert((1, 2), 2.5);
        r.value = 2.5;
        assert!(!verify_flow(&g, &r, 0, 2));
    }

    #[test]
    fn concurrent_single_commodity_matches_max_flow() {
        let g = CapacityGraph::from_edges(4, &[(0, 1, 2.0), (1, 3, 1.5), (0, 2, 1.0), (2, 3, 3.0), (1, 2, 0.5)])
            .unwrap();
        let mf = max_flow(&g, 0, 3).unwrap().value;
        let cs = [commodity(4, 0, 3)];
        let r = max_concurrent_flow(&g, &cs, ConcurrentFlowConfig::default()).unwrap();
        assert!(r.value >= (1.0 - 0.01) * mf && r.value <= mf * (1.0 + 1e-9));
        assert!(verify_concurrent_flow(&g, &cs, &r));
        assert!(r.certified);
    }

    #[test]
    fn concurrent_disjoint_commodities() {
        let g = CapacityGraph::from_edges(4, &[(0, 1, 3.0), (2, 3, 5.0)]).unwrap();
        let cs = [commodity(4, 0, 1), commodity(4, 2, 3)];
        let r = max_concurrent_flow(&g, &cs, ConcurrentFlowConfig::default()).unwrap();
        assert!((r.value - 3.0).abs() <= 0.01 * 3.0);
        assert!(verify_concurrent_flow(&g, &cs, &r));
    }

    #[test]
    fn concurrent_shared_edge() {
        // 0→2 and 1→2 both end in the 2–3 bottleneck of capacity 2
        let g = CapacityGraph::from_edges(4, &[(0, 2, 10.0), (1, 2, 10.0), (2, 3, 2.0)]).unwrap();
        let cs = [commodity(4, 0, 3), commodity(4, 1, 3)];
        let r = max_concurrent_flow(&g, &cs, ConcurrentFlowConfig::default()).unwrap();
        assert!((r.value - 1.0).abs() <= 0.01);
        assert!(verify_concurrent_flow(&g, &cs, &r));
    }

    #[test]
    fn concurrent_disconnected_is_zero() {
        let g = CapacityGraph::from_edges(4, &[(0, 1, 3.0), (2, 3, 5.0)]).unwrap();
        let cs = [commodity(4, 0, 3)];
        let r = max_concurrent_flow(&g, &cs, ConcurrentFlowConfig::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.diagnostic.is_some());
    }
}
