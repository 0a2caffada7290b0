//! Simulated neighbor-only computation of the weighted Fiedler vector.
//!
//! Each node owns one entry of `x` and one row of `L_W = W^{-1/2} L W^{-1/2}`.
//! An outer iteration is one power step on `σI − L_W`: a neighbor exchange for
//! the matrix-vector product, then two gossip aggregates (deflation against
//! `W^{1/2}·1` and normalization). Gossip floods value tables for a fixed
//! number of rounds; a node that has heard from `m` of `N` nodes estimates a
//! global sum as `N/m` times its partial sum, which is exact once the round
//! count reaches the graph diameter.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netgraph::{components, CapacityGraph, WeightMatrix};
use crate::spectral::fiedler_unnormalized_weighted;

pub const DEFAULT_OUTER_ITERS: usize = 200;
pub const DEFAULT_GOSSIP_ROUNDS: usize = 30;
pub const DIVERGENCE_STREAK: usize = 10;
/// Errors below this level are treated as round-off when detecting divergence.
pub const NOISE_FLOOR: f64 = 1e-10;
const INIT_SEED: u64 = 0x5eed;
/// `σ = SHIFT_FACTOR · max_i (L_W)_ii`.
pub const SHIFT_FACTOR: f64 = 2.02;

/// Counts deliveries; each recipient of a payload is one message.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MessageCounter {
    pub sent: u64,
}

/// Delivers `payload` from `node` to every `j` with `a_{node,j} > 0`.
pub fn neighbor_exchange(
    node: usize,
    payload: &[f64],
    g: &CapacityGraph,
    counter: &mut MessageCounter,
) -> BTreeMap<usize, Vec<f64>> {
    let mut out = BTreeMap::new();
    for j in g.neighbors(node) {
        out.insert(j, payload.to_vec());
        counter.sent += 1;
    }
    out
}

/// Records which entries each node reads; a read of a non-neighbor entry is
/// a locality violation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessAudit {
    pub reads: u64,
    pub violations: Vec<(usize, usize)>,
}

struct LocalView<'a> {
    g: &'a CapacityGraph,
    audit: &'a mut AccessAudit,
}

impl LocalView<'_> {
    fn read(&mut self, reader: usize, owner: usize, x: &[f64]) -> f64 {
        self.audit.reads += 1;
        if reader != owner && !(self.g.adjacency[(reader, owner)] > 0.0) {
            self.audit.violations.push((reader, owner));
        }
        x[owner]
    }
}

/// Per-node sum estimates after `rounds` flooding rounds.
struct Gossip {
    /// `balls[i]`: nodes within `rounds` hops of `i`, ascending.
    balls: Vec<Vec<usize>>,
    n: usize,
    messages_per_run: u64,
}

impl Gossip {
    fn new(g: &CapacityGraph, rounds: usize) -> Self {
        let n = g.len();
        let mut balls = Vec::with_capacity(n);
        for i in 0..n {
            let mut hop = vec![usize::MAX; n];
            hop[i] = 0;
            let mut frontier = vec![i];
            for r in 1..=rounds {
                let mut next = Vec::new();
                for &u in &frontier {
                    for v in g.neighbors(u) {
                        if hop[v] == usize::MAX {
                            hop[v] = r;
                            next.push(v);
                        }
                    }
                }
                if next.is_empty() {
                    break;
                }
                frontier = next;
            }
            balls.push((0..n).filter(|&j| hop[j] != usize::MAX).collect());
        }
        let messages_per_run = 2 * g.edge_count() as u64 * rounds as u64;
        Self { balls, n, messages_per_run }
    }

    /// Node `i`'s estimate of `Σ_j values[j]`.
    fn sums(&self, values: &[f64], counter: &mut MessageCounter) -> Vec<f64> {
        counter.sent += self.messages_per_run;
        self.balls
            .iter()
            .map(|ball| {
                let partial: f64 = ball.iter().map(|&j| values[j]).sum();
                partial * self.n as f64 / ball.len() as f64
            })
            .collect()
    }

    fn maxima(&self, values: &[f64], counter: &mut MessageCounter) -> Vec<f64> {
        counter.sent += self.messages_per_run;
        self.balls
            .iter()
            .map(|ball| ball.iter().map(|&j| values[j]).fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DistFiedlerConfig {
    pub outer_iters: usize,
    pub gossip_rounds: usize,
}

impl Default for DistFiedlerConfig {
    fn default() -> Self {
        Self { outer_iters: DEFAULT_OUTER_ITERS, gossip_rounds: DEFAULT_GOSSIP_ROUNDS }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MessageTrace {
    pub iterations: usize,
    /// `‖x_dist − x_cent‖` after sign alignment, one entry per iteration.
    pub per_iteration_error: Vec<f64>,
    /// Cumulative message count at the end of each iteration.
    pub messages_cumulative: Vec<u64>,
    pub messages_sent: u64,
    pub per_node_entries: DVector<f64>,
    /// Rayleigh-quotient estimate of λ2 aggregated by gossip.
    pub lambda2_estimate: f64,
    pub audit: AccessAudit,
}

impl MessageTrace {
    pub fn final_error(&self) -> f64 {
        self.per_iteration_error.last().copied().unwrap_or(f64::INFINITY)
    }

    /// True when the last quarter of the trace never rises by more than `slack`.
    pub fn tail_non_increasing(&self, slack: f64) -> bool {
        let e = &self.per_iteration_error;
        let start = e.len() - e.len() / 4;
        e[start.saturating_sub(1)..].windows(2).all(|w| w[1] <= w[0] + slack)
    }

    /// CSV with columns `iteration,error_norm,messages_cumulative`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["iteration", "error_norm", "messages_cumulative"])?;
        for (k, (e, m)) in self.per_iteration_error.iter().zip(&self.messages_cumulative).enumerate() {
            wtr.write_record([(k + 1).to_string(), e.to_string(), m.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

pub fn distributed_fiedler(
    g: &CapacityGraph,
    w: &WeightMatrix,
    outer_iters: usize,
    gossip_rounds: usize,
) -> Result<MessageTrace> {
    distributed_fiedler_from(g, w, DistFiedlerConfig { outer_iters, gossip_rounds }, None)
}

/// As [`distributed_fiedler`], optionally warm-started from `initial`.
pub fn distributed_fiedler_from(
    g: &CapacityGraph,
    w: &WeightMatrix,
    cfg: DistFiedlerConfig,
    initial: Option<&DVector<f64>>,
) -> Result<MessageTrace> {
    let n = g.len();
    if cfg.outer_iters < 1 || cfg.gossip_rounds < 1 {
        return Err(Error::Invalid("outer_iters and gossip_rounds must be >= 1".into()));
    }
    if w.len() != n {
        return Err(Error::Dimension { expected: n, got: w.len() });
    }
    if n < 2 || components(g) != 1 {
        return Err(Error::Disconnected);
    }
    let central = fiedler_unnormalized_weighted(g, w)?.fiedler_vector;

    let ws = w.as_slice();
    let sqrt_w: Vec<f64> = ws.iter().map(|x| x.sqrt()).collect();
    let diag: Vec<f64> = (0..n).map(|i| g.degrees[i] / ws[i]).collect();
    let mut counter = MessageCounter::default();
    let mut audit = AccessAudit::default();
    let gossip = Gossip::new(g, cfg.gossip_rounds);

    // xᵀL_W x = Σ a_ij (x_i/√w_i − x_j/√w_j)² ≤ 2 Σ x_i² β_i/w_i, so 2·max diag
    // bounds λmax; the margin keeps σ − λ2 > 0 when λ2 = λmax.
    let sigma: Vec<f64> = gossip
        .maxima(&diag, &mut counter)
        .into_iter()
        .map(|m| SHIFT_FACTOR * m)
        .collect();
    let total_w = gossip.sums(ws, &mut counter);

    let mut x: Vec<f64> = match initial {
        Some(v) if v.len() == n => v.iter().cloned().collect(),
        Some(v) => return Err(Error::Dimension { expected: n, got: v.len() }),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(INIT_SEED);
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
        }
    };

    let mut errors = Vec::with_capacity(cfg.outer_iters);
    let mut cumulative = Vec::with_capacity(cfg.outer_iters);
    let mut streak = 0usize;
    for iter in 0..cfg.outer_iters {
        for i in 0..n {
            neighbor_exchange(i, &[x[i]], g, &mut counter);
        }
        // Synchronous round: every update reads the previous `x`.
        let mut y = vec![0.0; n];
        {
            let mut view = LocalView { g, audit: &mut audit };
            for i in 0..n {
                let xi = view.read(i, i, &x);
                let mut acc = diag[i] * xi;
                for j in g.neighbors(i) {
                    acc -= g.adjacency[(i, j)] / (sqrt_w[i] * sqrt_w[j]) * view.read(i, j, &x);
                }
                y[i] = sigma[i] * xi - acc;
            }
        }
        // y ← y − u uᵀy with u = W^{1/2}·1 / ‖W^{1/2}·1‖
        let proj_terms: Vec<f64> = (0..n).map(|i| sqrt_w[i] * y[i]).collect();
        let proj = gossip.sums(&proj_terms, &mut counter);
        for i in 0..n {
            y[i] -= sqrt_w[i] * proj[i] / total_w[i];
        }
        let squares: Vec<f64> = y.iter().map(|v| v * v).collect();
        let norm2 = gossip.sums(&squares, &mut counter);
        for i in 0..n {
            x[i] = if norm2[i] > 0.0 { y[i] / norm2[i].sqrt() } else { 0.0 };
        }

        let xv = DVector::from_column_slice(&x);
        let err = if xv.dot(&central) < 0.0 {
            (&xv + &central).norm()
        } else {
            (&xv - &central).norm()
        };
        if let Some(&prev) = errors.last() {
            if err > prev && err > NOISE_FLOOR {
                streak += 1;
                if streak >= DIVERGENCE_STREAK {
                    return Err(Error::Divergence { iteration: iter + 1, streak });
                }
            } else {
                streak = 0;
            }
        }
        errors.push(err);
        cumulative.push(counter.sent);
    }

    // λ2 ≈ xᵀ L_W x / xᵀx on the final iterate.
    let rq_terms: Vec<f64> = (0..n).map(|i| x[i] * x[i]).collect();
    let nx = gossip.sums(&rq_terms, &mut counter);
    let mut lx_final = vec![0.0; n];
    for i in 0..n {
        neighbor_exchange(i, &[x[i]], g, &mut counter);
    }
    {
        let mut view = LocalView { g, audit: &mut audit };
        for i in 0..n {
            let mut acc = diag[i] * view.read(i, i, &x);
            for j in g.neighbors(i) {
                acc -= g.adjacency[(i, j)] / (sqrt_w[i] * sqrt_w[j]) * view.read(i, j, &x);
            }
            lx_final[i] = acc;
        }
    }
    let q_terms: Vec<f64> = (0..n).map(|i| x[i] * lx_final[i]).collect();
    let q = gossip.sums(&q_terms, &mut counter);
    let lambda2_estimate = q[0] / nx[0];

    Ok(MessageTrace {
        iterations: cfg.outer_iters,
        per_iteration_error: errors,
        messages_cumulative: cumulative,
        messages_sent: counter.sent,
        per_node_entries: DVector::from_vec(x),
        lambda2_estimate,
        audit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize) -> CapacityGraph {
        let e: Vec<_> = (0..n - 1).map(|i| (i, i + 1, 1.0)).collect();
        CapacityGraph::from_edges(n, &e).unwrap()
    }

    #[test]
    fn k2_exact_after_one_iteration() {
        let g = path(2);
        let t = distributed_fiedler(&g, &WeightMatrix::identity(2), 1, 1).unwrap();
        assert!(t.final_error() < 1e-12);
        assert!((t.lambda2_estimate - 2.0).abs() < 1e-12);
    }

    #[test]
    fn p4_converges() {
        let g = path(4);
        let t = distributed_fiedler(&g, &WeightMatrix::identity(4), 200, 30).unwrap();
        assert!(t.final_error() < 1e-6, "{}", t.final_error());
        assert!(t.tail_non_increasing(1e-12));
        assert_eq!(t.per_iteration_error.len(), 200);
        assert!(t.audit.violations.is_empty());
        assert!(t.audit.reads > 0);
        let l2 = 2.0 - 2f64.sqrt();
        assert!((t.lambda2_estimate - l2).abs() < 1e-9);
    }

    #[test]
    fn weighted_converges() {
        let g = CapacityGraph::from_edges(
            5,
            &[(0, 1, 1.0), (1, 2, 0.8), (2, 3, 1.3), (3, 4, 0.9), (0, 2, 0.4), (1, 4, 0.6)],
        )
        .unwrap();
        let w = WeightMatrix::new(vec![1.0, 0.5, 0.4, 0.5, 1.0]).unwrap();
        let t = distributed_fiedler(&g, &w, 400, 10).unwrap();
        assert!(t.final_error() < 1e-6, "{}", t.final_error());
    }

    #[test]
    fn exchange_counts() {
        let g = CapacityGraph::from_edges(4, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        let mut c = MessageCounter::default();
        assert!(neighbor_exchange(3, &[1.0], &g, &mut c).is_empty());
        assert_eq!(c.sent, 0);

        let mut e = vec![];
        for i in 0..5 {
            for j in (i + 1)..5 {
                e.push((i, j, 1.0));
            }
        }
        let k5 = CapacityGraph::from_edges(5, &e).unwrap();
        let got = neighbor_exchange(0, &[2.0], &k5, &mut c);
        assert_eq!(got.len(), 4);
        assert_eq!(c.sent, 4);

        let mut c = MessageCounter::default();
        for i in 0..5 {
            neighbor_exchange(i, &[0.0], &k5, &mut c);
        }
        assert_eq!(c.sent, 2 * k5.edge_count() as u64);
    }

    #[test]
    fn message_accounting_per_iteration() {
        let g = path(4);
        let rounds = 3;
        let t = distributed_fiedler(&g, &WeightMatrix::identity(4), 2, rounds).unwrap();
        let e2 = 2 * g.edge_count() as u64;
        let per_iter = e2 + 2 * e2 * rounds as u64;
        assert_eq!(t.messages_cumulative[1] - t.messages_cumulative[0], per_iter);
    }

    #[test]
    fn rejects_disconnected() {
        let g = CapacityGraph::from_edges(4, &[(0, 1, 1.0), (2, 3, 1.0)]).unwrap();
        assert!(matches!(
            distributed_fiedler(&g, &WeightMatrix::identity(4), 10, 3),
            Err(Error::Disconnected)
        ));
    }

    #[test]
    fn csv_export() {
        let t = distributed_fiedler(&path(3), &WeightMatrix::identity(3), 3, 2).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("iteration,error_norm,messages_cumulative\n"));
        assert_eq!(s.lines().count(), 4);
    }
}
