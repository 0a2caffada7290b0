#![allow(dead_code)]

use absnet::channel::NodeKind;
use absnet::netgraph::{CapacityGraph, GraphParams, NetworkState, Node, WeightMatrix};
use absnet::spectral::CommoditySpec;
use absnet::Position3;
use minilp::{ComparisonOp, OptimizationDirection, Problem};
use rand::Rng;

/// Flow nodes: source 0, destination 1, then `n_abs` ABSs; up to two interferers.
pub fn random_state<R: Rng>(rng: &mut R, n_abs: usize) -> NetworkState {
    let ground = |r: &mut R| Position3::new(r.random_range(0.0..200.0), r.random_range(0.0..200.0), 0.0);
    let mut nodes = vec![Node::new(ground(rng), NodeKind::Source), Node::new(ground(rng), NodeKind::Destination)];
    for _ in 0..n_abs {
        let p = Position3::new(rng.random_range(0.0..200.0), rng.random_range(0.0..200.0), rng.random_range(10.0..80.0));
        nodes.push(Node::new(p, NodeKind::Abs));
    }
    let interferers = (0..rng.random_range(0..=2)).map(|_| ground(rng)).collect();
    NetworkState::new(nodes, interferers, GraphParams::default()).unwrap()
}

pub fn random_weights<R: Rng>(rng: &mut R, n: usize) -> WeightMatrix {
    WeightMatrix::new((0..n).map(|_| rng.random_range(0.01..2.0)).collect()).unwrap()
}

/// Connected graph: a random spanning tree plus extra edges with probability `p`.
pub fn random_connected_graph<R: Rng>(rng: &mut R, n: usize, p: f64) -> CapacityGraph {
    let mut edges = Vec::new();
    for j in 1..n {
        let i = rng.random_range(0..j);
        edges.push((i, j, rng.random_range(0.05..5.0)));
    }
    for i in 0..n {
        for j in i + 1..n {
            if !edges.iter().any(|&(a, b, _)| (a, b) == (i, j)) && rng.random_bool(p) {
                edges.push((i, j, rng.random_range(0.05..5.0)));
            }
        }
    }
    CapacityGraph::from_edges(n, &edges).unwrap()
}

/// Graph with exactly `m` random edges (possibly disconnected).
pub fn random_graph_with_edges<R: Rng>(rng: &mut R, n: usize, m: usize) -> CapacityGraph {
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let mut edges = Vec::new();
    for _ in 0..m.min(pairs.len()) {
        let (i, j) = pairs.swap_remove(rng.random_range(0..pairs.len()));
        edges.push((i, j, rng.random_range(0.1..5.0)));
    }
    CapacityGraph::from_edges(n, &edges).unwrap()
}

/// Minimum over all `S ∋ s`, `d ∉ S` of the capacity leaving `S`.
pub fn brute_force_min_cut(g: &CapacityGraph, s: usize, d: usize) -> f64 {
    let n = g.len();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        if mask & (1 << s) == 0 || mask & (1 << d) != 0 {
            continue;
        }
        let mut cut = 0.0;
        for i in 0..n {
            for j in 0..n {
                if mask & (1 << i) != 0 && mask & (1 << j) == 0 {
                    cut += g.adjacency[(i, j)];
                }
            }
        }
        best = best.min(cut);
    }
    best
}

/// Max concurrent flow as an LP over directed arcs `i→j` of capacity `a_ij`.
pub fn concurrent_flow_lp(g: &CapacityGraph, commodities: &[CommoditySpec]) -> f64 {
    let n = g.len();
    let mut arcs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && g.adjacency[(i, j)] > 0.0 {
                arcs.push((i, j));
            }
        }
    }
    let mut p = Problem::new(OptimizationDirection::Maximize);
    let lambda = p.add_var(1.0, (0.0, f64::INFINITY));
    let vars: Vec<Vec<_>> = commodities
        .iter()
        .map(|_| arcs.iter().map(|_| p.add_var(0.0, (0.0, f64::INFINITY))).collect())
        .collect();
    for (k, c) in commodities.iter().enumerate() {
        for v in 0..n {
            let mut terms = Vec::new();
            for (e, &(i, j)) in arcs.iter().enumerate() {
                if i == v {
                    terms.push((vars[k][e], 1.0));
                }
                if j == v {
                    terms.push((vars[k][e], -1.0));
                }
            }
            let demand = if v == c.source {
                c.demand
            } else if v == c.destination {
                -c.demand
            } else {
                0.0
            };
            terms.push((lambda, -demand));
            p.add_constraint(&terms, ComparisonOp::Eq, 0.0);
        }
    }
    for (e, &(i, j)) in arcs.iter().enumerate() {
        let terms: Vec<_> = vars.iter().map(|vk| (vk[e], 1.0)).collect();
        p.add_constraint(&terms, ComparisonOp::Le, g.adjacency[(i, j)]);
    }
    p.solve().unwrap().objective()
}

/// Written to the stdout handle directly so the line survives test output capture.
pub fn report(name: &str, pass: bool, detail: &str) {
    use std::io::Write;
    let line = format!("[acceptance] {name}: {} | {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
}
