//! SIR-weighted capacity graph.
//!
//! `a_ij = B (1/ln(1+SIR_ij) + 1/ln(1+SIR_ji))^-1` with
//! `SIR_ij = g_ij / (Σ_p g_pj + Σ_{k≠i,j} u(d_jk / r_int))`, unit transmit
//! powers and no receiver noise. The smoothed step `u` penalizes nodes that
//! crowd a receiver.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::channel::{channel_gain, ChannelParams, NodeKind};
use crate::error::{Error, Result};
use crate::geometry::Position3;

/// SIR reported when the interference denominator vanishes.
pub const SIR_CAP: f64 = 1e12;
/// Capacities below this fraction of the bandwidth are truncated to zero.
pub const CAPACITY_FLOOR_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub position: Position3,
    pub kind: NodeKind,
}

impl Node {
    pub fn new(position: Position3, kind: NodeKind) -> Self {
        Self { position, kind }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphParams {
    pub bandwidth_hz: f64,
    pub r_int_m: f64,
    pub zeta: f64,
    pub kappa: f64,
    pub y0: f64,
    /// Communication range per flow-graph node; `None` means unbounded.
    pub range_threshold_m: Option<Vec<f64>>,
    /// When false, links between two terrestrial flow nodes carry no capacity.
    pub allow_ground_links: bool,
    pub channel: ChannelParams,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            bandwidth_hz: 1.0,
            r_int_m: 5.0,
            zeta: 1.0,
            kappa: 10.0,
            y0: 1e-6,
            range_threshold_m: None,
            allow_ground_links: true,
            channel: ChannelParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub nodes: Vec<Node>,
    pub interferers: Vec<Position3>,
    pub params: GraphParams,
}

impl NetworkState {
    pub fn new(nodes: Vec<Node>, interferers: Vec<Position3>, params: GraphParams) -> Result<Self> {
        let s = Self { nodes, interferers, params };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        p.channel.validate()?;
        let bad = |key: &str, msg: String| Err(Error::Validation { key: key.into(), msg });
        if self.nodes.len() < 2 {
            return bad("nodes", format!("need at least 2 flow nodes, got {}", self.nodes.len()));
        }
        if !self.nodes.iter().any(|n| n.kind == NodeKind::Source) {
            return bad("nodes", "no source node".into());
        }
        if !self.nodes.iter().any(|n| n.kind == NodeKind::Destination) {
            return bad("nodes", "no destination node".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.kind == NodeKind::InterferenceSource {
                return bad("nodes", format!("node {i}: interferers are not flow nodes"));
            }
            if !n.kind.is_aerial() && n.position.z != 0.0 {
                return bad("nodes", format!("node {i}: terrestrial node must have z = 0"));
            }
        }
        if self.interferers.iter().any(|q| q.z != 0.0) {
            return bad("interferers", "interferers must have z = 0".into());
        }
        if !(p.bandwidth_hz > 0.0) {
            return bad("graph.bandwidth_hz", "must be > 0".into());
        }
        if !(p.r_int_m > 0.0) {
            return bad("graph.r_int_m", "must be > 0".into());
        }
        if !(p.zeta > 0.0) {
            return bad("graph.zeta", "must be > 0".into());
        }
        if !(p.kappa > 0.0) {
            return bad("graph.kappa", "must be > 0".into());
        }
        if !(p.y0 > 0.0) {
            return bad("graph.y0", "must be > 0".into());
        }
        if let Some(r) = &p.range_threshold_m {
            if r.len() != self.nodes.len() {
                return bad(
                    "graph.range_threshold_m",
                    format!("expected {} entries, got {}", self.nodes.len(), r.len()),
                );
            }
            if r.iter().any(|&x| !(x > 0.0)) {
                return bad("graph.range_threshold_m", "must be > 0".into());
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kinds(&self) -> Vec<NodeKind> {
        self.nodes.iter().map(|n| n.kind).collect()
    }

    pub fn positions(&self) -> Vec<Position3> {
        self.nodes.iter().map(|n| n.position).collect()
    }

    pub fn abs_indices(&self) -> Vec<usize> {
        self.indices_of(NodeKind::Abs)
    }

    pub fn indices_of(&self, kind: NodeKind) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].kind == kind).collect()
    }

    fn range_of(&self, i: usize) -> f64 {
        match &self.params.range_threshold_m {
            Some(r) if self.nodes[i].kind.is_aerial() => r[i],
            _ => f64::INFINITY,
        }
    }

    /// Link range for the pair: the smaller of the two endpoint ranges.
    pub fn pair_range(&self, i: usize, j: usize) -> f64 {
        self.range_of(i).min(self.range_of(j))
    }
}

/// `u(y) = ζ·exp(−κy − ln y0) / (1 + exp(−κy − ln y0))`.
pub fn smoothed_step(y: f64, zeta: f64, kappa: f64, y0: f64) -> Result<f64> {
    if !(y0 > 0.0) {
        return Err(Error::Config(format!("y0 must be > 0, got {y0}")));
    }
    let t = -kappa * y - y0.ln();
    // ζ·σ(t), written to avoid exp overflow for large |t|
    Ok(if t >= 0.0 {
        zeta / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        zeta * e / (1.0 + e)
    })
}

fn check_pair(i: usize, j: usize, n: usize) -> Result<()> {
    if i >= n {
        return Err(Error::NodeOutOfRange(i));
    }
    if j >= n {
        return Err(Error::NodeOutOfRange(j));
    }
    Ok(())
}

fn cap_sir(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        let s = num / den;
        if s.is_finite() {
            s.min(SIR_CAP)
        } else {
            SIR_CAP
        }
    } else {
        SIR_CAP
    }
}

/// Combines the two directional SIRs into one undirected capacity.
pub fn capacity_from_sirs(sir_ij: f64, sir_ji: f64, bandwidth: f64) -> f64 {
    if sir_ij <= 0.0 || sir_ji <= 0.0 {
        return 0.0;
    }
    let r1 = sir_ij.ln_1p();
    let r2 = sir_ji.ln_1p();
    let a = bandwidth * (r1 * r2) / (r1 + r2);
    if a < CAPACITY_FLOOR_REL * bandwidth {
        0.0
    } else {
        a
    }
}

/// SIR at node `j` for a transmission from node `i`.
pub fn sir(i: usize, j: usize, state: &NetworkState) -> Result<f64> {
    check_pair(i, j, state.len())?;
    if i == j {
        return Err(Error::Invalid(format!("sir({i},{j}) needs distinct nodes")));
    }
    let p = &state.params;
    let ni = &state.nodes[i];
    let nj = &state.nodes[j];
    let g = channel_gain(&ni.position, ni.kind, &nj.position, nj.kind, &p.channel)?;
    let mut den = 0.0;
    for q in &state.interferers {
        den += channel_gain(q, NodeKind::InterferenceSource, &nj.position, nj.kind, &p.channel)?;
    }
    for (k, nk) in state.nodes.iter().enumerate() {
        if k == i || k == j {
            continue;
        }
        let y = nj.position.distance(&nk.position) / p.r_int_m;
        den += smoothed_step(y, p.zeta, p.kappa, p.y0)?;
    }
    Ok(cap_sir(g, den))
}

/// Undirected link capacity, range gated.
pub fn link_capacity(i: usize, j: usize, state: &NetworkState) -> Result<f64> {
    check_pair(i, j, state.len())?;
    if i == j {
        return Ok(0.0);
    }
    if !link_allowed(state, i, j, state.nodes[i].position.distance(&state.nodes[j].position)) {
        return Ok(0.0);
    }
    let s_ij = sir(i, j, state)?;
    let s_ji = sir(j, i, state)?;
    Ok(capacity_from_sirs(s_ij, s_ji, state.params.bandwidth_hz))
}

fn link_allowed(state: &NetworkState, i: usize, j: usize, d: f64) -> bool {
    if !state.params.allow_ground_links
        && !state.nodes[i].kind.is_aerial()
        && !state.nodes[j].kind.is_aerial()
    {
        return false;
    }
    d <= state.pair_range(i, j)
}

/// Cached gains, interference and penalty terms for one [`NetworkState`].
///
/// Supports re-evaluating every capacity with a single node displaced,
/// which is what finite-difference gradients need.
#[derive(Debug, Clone)]
pub struct LinkModel<'a> {
    state: &'a NetworkState,
    gain: Vec<f64>,
    interference: Vec<f64>,
    penalty: Vec<f64>,
}

/// The displaced node's recomputed row of the cache.
struct Displaced {
    node: usize,
    position: Position3,
    gain: Vec<f64>,
    interference: f64,
    penalty: Vec<f64>,
}

impl<'a> LinkModel<'a> {
    pub fn new(state: &'a NetworkState) -> Result<Self> {
        let n = state.len();
        let mut gain = vec![0.0; n * n];
        let mut penalty = vec![0.0; n * n];
        let mut interference = vec![0.0; n];
        for j in 0..n {
            interference[j] = interference_at(state, &state.nodes[j])?;
            for i in (j + 1)..n {
                let (g, u) = pair_terms(state, &state.nodes[i], &state.nodes[j])?;
                gain[i * n + j] = g;
                gain[j * n + i] = g;
                penalty[i * n + j] = u;
                penalty[j * n + i] = u;
            }
        }
        Ok(Self { state, gain, interference, penalty })
    }

    pub fn state(&self) -> &NetworkState {
        self.state
    }

    fn displaced(&self, node: usize, position: Position3) -> Result<Displaced> {
        let n = self.state.len();
        let moved = Node::new(position, self.state.nodes[node].kind);
        let mut gain = vec![0.0; n];
        let mut penalty = vec![0.0; n];
        for k in 0..n {
            if k == node {
                continue;
            }
            let (g, u) = pair_terms(self.state, &moved, &self.state.nodes[k])?;
            gain[k] = g;
            penalty[k] = u;
        }
        Ok(Displaced {
            node,
            position,
            gain,
            interference: interference_at(self.state, &moved)?,
            penalty,
        })
    }

    fn sir_with(&self, i: usize, j: usize, d: Option<&Displaced>) -> f64 {
        let n = self.state.len();
        let gain = |a: usize, b: usize| match d {
            Some(d) if a == d.node => d.gain[b],
            Some(d) if b == d.node => d.gain[a],
            _ => self.gain[a * n + b],
        };
        let pen = |a: usize, b: usize| match d {
            Some(d) if a == d.node => d.penalty[b],
            Some(d) if b == d.node => d.penalty[a],
            _ => self.penalty[a * n + b],
        };
        let mut den = match d {
            Some(d) if d.node == j => d.interference,
            _ => self.interference[j],
        };
        for k in 0..n {
            if k != i && k != j {
                den += pen(j, k);
            }
        }
        cap_sir(gain(i, j), den)
    }

    fn capacity_with(&self, i: usize, j: usize, d: Option<&Displaced>) -> f64 {
        if i == j {
            return 0.0;
        }
        let pi = self.position_with(i, d);
        let pj = self.position_with(j, d);
        if !link_allowed(self.state, i, j, pi.distance(&pj)) {
            return 0.0;
        }
        capacity_from_sirs(
            self.sir_with(i, j, d),
            self.sir_with(j, i, d),
            self.state.params.bandwidth_hz,
        )
    }

    fn position_with(&self, i: usize, d: Option<&Displaced>) -> Position3 {
        match d {
            Some(d) if d.node == i => d.position,
            _ => self.state.nodes[i].position,
        }
    }

    pub fn sir(&self, i: usize, j: usize) -> f64 {
        self.sir_with(i, j, None)
    }

    pub fn capacity(&self, i: usize, j: usize) -> f64 {
        self.capacity_with(i, j, None)
    }

    pub fn adjacency(&self) -> DMatrix<f64> {
        self.adjacency_with(None)
    }

    fn adjacency_with(&self, d: Option<&Displaced>) -> DMatrix<f64> {
        let n = self.state.len();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let c = self.capacity_with(i, j, d);
                a[(i, j)] = c;
                a[(j, i)] = c;
            }
        }
        a
    }

    /// Full adjacency matrix with `node` moved to `position`.
    pub fn adjacency_displaced(&self, node: usize, position: Position3) -> Result<DMatrix<f64>> {
        check_pair(node, node, self.state.len())?;
        let d = self.displaced(node, position)?;
        Ok(self.adjacency_with(Some(&d)))
    }

    /// Capacity of (i, j) with `node` moved to `position`.
    pub fn capacity_displaced(
        &self,
        i: usize,
        j: usize,
        node: usize,
        position: Position3,
    ) -> Result<f64> {
        check_pair(i, j, self.state.len())?;
        let d = self.displaced(node, position)?;
        Ok(self.capacity_with(i, j, Some(&d)))
    }
}

fn interference_at(state: &NetworkState, node: &Node) -> Result<f64> {
    let mut s = 0.0;
    for q in &state.interferers {
        s += channel_gain(q, NodeKind::InterferenceSource, &node.position, node.kind, &state.params.channel)?;
    }
    Ok(s)
}

fn pair_terms(state: &NetworkState, a: &Node, b: &Node) -> Result<(f64, f64)> {
    let p = &state.params;
    let g = channel_gain(&a.position, a.kind, &b.position, b.kind, &p.channel)?;
    let y = a.position.distance(&b.position) / p.r_int_m;
    let u = smoothed_step(y, p.zeta, p.kappa, p.y0)?;
    Ok((g, u))
}

/// Symmetric nonnegative capacity matrix with its generalized degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityGraph {
    pub adjacency: DMatrix<f64>,
    pub degrees: DVector<f64>,
    pub kinds: Vec<NodeKind>,
}

impl CapacityGraph {
    /// Builds a graph from an explicit adjacency matrix. The matrix must be
    /// square, symmetric, nonnegative, with zero diagonal.
    pub fn from_adjacency(adjacency: DMatrix<f64>, kinds: Vec<NodeKind>) -> Result<Self> {
        let n = adjacency.nrows();
        if adjacency.ncols() != n {
            return Err(Error::Dimension { expected: n, got: adjacency.ncols() });
        }
        if kinds.len() != n {
            return Err(Error::Dimension { expected: n, got: kinds.len() });
        }
        for i in 0..n {
            if adjacency[(i, i)] != 0.0 {
                return Err(Error::Invalid(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let a = adjacency[(i, j)];
                if !(a >= 0.0) || !a.is_finite() {
                    return Err(Error::Invalid(format!("invalid capacity at ({i},{j}): {a}")));
                }
                if a != adjacency[(j, i)] {
                    return Err(Error::NotSymmetric { i, j, diff: (a - adjacency[(j, i)]).abs() });
                }
            }
        }
        let degrees = DVector::from_iterator(n, (0..n).map(|i| adjacency.row(i).sum()));
        Ok(Self { adjacency, degrees, kinds })
    }

    /// Convenience constructor from an undirected edge list; every node is an ABS
    /// except the caller-labeled ones.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut a = DMatrix::zeros(n, n);
        for &(i, j, c) in edges {
            check_pair(i, j, n)?;
            if i == j {
                return Err(Error::Invalid(format!("self loop at {i}")));
            }
            a[(i, j)] += c;
            a[(j, i)] += c;
        }
        Self::from_adjacency(a, vec![NodeKind::Abs; n])
    }

    pub fn len(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self, i: usize, j: usize) -> f64 {
        self.adjacency[(i, j)]
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&j| self.adjacency[(i, j)] > 0.0)
    }

    pub fn edge_count(&self) -> usize {
        let n = self.len();
        (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.adjacency[(i, j)] > 0.0)
            .count()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            adjacency: &self.adjacency * c,
            degrees: &self.degrees * c,
            kinds: self.kinds.clone(),
        }
    }

    pub fn is_connected(&self) -> bool {
        components(self) == 1
    }

    pub fn max_degree(&self) -> f64 {
        self.degrees.iter().cloned().fold(0.0, f64::max)
    }
}

/// Number of connected components over positive-capacity edges.
pub fn components(g: &CapacityGraph) -> usize {
    let n = g.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut count = n;
    for i in 0..n {
        for j in (i + 1)..n {
            if g.adjacency[(i, j)] > 0.0 {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri] = rj;
                    count -= 1;
                }
            }
        }
    }
    count
}

pub fn build_capacity_graph(state: &NetworkState) -> Result<CapacityGraph> {
    let model = LinkModel::new(state)?;
    CapacityGraph::from_adjacency(model.adjacency(), state.kinds())
}

/// Positive node weights `W = diag(w)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix(Vec<f64>);

impl WeightMatrix {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(i) = weights.iter().position(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::Invalid(format!(
                "weight {i} = {} makes W non-invertible",
                weights[i]
            )));
        }
        Ok(Self(weights))
    }

    pub fn identity(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    /// Large weights for terminals, small for relays.
    pub fn practical(kinds: &[NodeKind], terminal: f64, abs: f64) -> Result<Self> {
        Self::new(
            kinds
                .iter()
                .map(|k| if k.is_aerial() { abs } else { terminal })
                .collect(),
        )
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|w| w * c).collect())
    }

    /// `W^{1/2}·1`, the null direction of the weighted Laplacians.
    pub fn sqrt_ones(&self) -> DVector<f64> {
        DVector::from_iterator(self.0.len(), self.0.iter().map(|w| w.sqrt()))
    }
}

/// The Laplacian family of one capacity graph.
#[derive(Debug, Clone)]
pub struct Laplacians {
    /// `L = D − A`
    pub l: DMatrix<f64>,
    /// `D^{-1/2} L D^{-1/2}`
    pub l_norm: DMatrix<f64>,
    /// `W^{-1/2} L_norm W^{-1/2}`
    pub l_weighted: DMatrix<f64>,
    /// `W^{-1/2} L W^{-1/2}`, whose λ2 the mobility gradient differentiates.
    pub l_unnorm_weighted: DMatrix<f64>,
}

pub fn laplacian(g: &CapacityGraph) -> DMatrix<f64> {
    DMatrix::from_diagonal(&g.degrees) - &g.adjacency
}

pub fn normalized_laplacian(g: &CapacityGraph) -> Result<DMatrix<f64>> {
    if let Some(i) = g.degrees.iter().position(|&b| !(b > 0.0)) {
        return Err(Error::IsolatedNode(i));
    }
    let inv_sqrt: Vec<f64> = g.degrees.iter().map(|b| 1.0 / b.sqrt()).collect();
    Ok(scale_sym(&laplacian(g), &inv_sqrt))
}

/// `W^{-1/2} M W^{-1/2}`.
pub fn weighted(m: &DMatrix<f64>, w: &WeightMatrix) -> Result<DMatrix<f64>> {
    if w.len() != m.nrows() {
        return Err(Error::Dimension { expected: m.nrows(), got: w.len() });
    }
    let inv_sqrt: Vec<f64> = w.as_slice().iter().map(|x| 1.0 / x.sqrt()).collect();
    Ok(scale_sym(m, &inv_sqrt))
}

/// Unnormalized weighted Laplacian `W^{-1/2} L W^{-1/2}`; defined for graphs
/// with isolated nodes.
pub fn unnormalized_weighted_laplacian(g: &CapacityGraph, w: &WeightMatrix) -> Result<DMatrix<f64>> {
    weighted(&laplacian(g), w)
}

fn scale_sym(m: &DMatrix<f64>, s: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| s[i] * m[(i, j)] * s[j])
}

pub fn laplacians(g: &CapacityGraph, w: &WeightMatrix) -> Result<Laplacians> {
    let l = laplacian(g);
    let l_norm = normalized_laplacian(g)?;
    let l_weighted = weighted(&l_norm, w)?;
    let l_unnorm_weighted = weighted(&l, w)?;
    Ok(Laplacians { l, l_norm, l_weighted, l_unnorm_weighted })
}
