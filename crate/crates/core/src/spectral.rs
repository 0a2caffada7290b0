//! Fiedler pairs and exact Cheeger-type constants.
//!
//! Fiedler pairs come from a dense symmetric eigendecomposition after
//! deflating the known null direction. The exact constants enumerate every
//! bipartition, so they are limited to small graphs; they serve as oracles
//! for the λ2 bounds.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{
    components, laplacian, normalized_laplacian, unnormalized_weighted_laplacian, weighted,
    CapacityGraph, WeightMatrix,
};

pub const CHEEGER_MAX_NODES: usize = 20;
pub const MULTI_CHEEGER_MAX_NODES: usize = 16;
pub const DEFAULT_P: f64 = 0.5;

const EIGEN_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LaplacianVariant {
    /// `L = D − A`
    Unnormalized,
    /// `D^{-1/2} L D^{-1/2}`
    Normalized,
    /// `W^{-1/2} D^{-1/2} L D^{-1/2} W^{-1/2}`
    Weighted,
    /// `W^{-1/2} L W^{-1/2}`
    UnnormalizedWeighted,
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralResult {
    pub lambda2: f64,
    /// Next eigenvalue on the deflated subspace, when `n ≥ 3`.
    pub lambda3: Option<f64>,
    pub fiedler_vector: DVector<f64>,
    pub variant: LaplacianVariant,
}

impl SpectralResult {
    pub fn gap(&self) -> Option<f64> {
        self.lambda3.map(|l3| l3 - self.lambda2)
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Dimension { expected: n, got: m.ncols() });
    }
    let tol = 1e-9 * m.abs().max().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let diff = (m[(i, j)] - m[(j, i)]).abs();
            if diff > tol {
                return Err(Error::NotSymmetric { i, j, diff });
            }
        }
    }
    Ok(())
}

/// Second-smallest eigenpair of `matrix` restricted to the orthogonal
/// complement of `null_direction`.
pub fn fiedler(matrix: &DMatrix<f64>, null_direction: &DVector<f64>) -> Result<SpectralResult> {
    fiedler_variant(matrix, null_direction, LaplacianVariant::Custom)
}

pub fn fiedler_variant(
    matrix: &DMatrix<f64>,
    null_direction: &DVector<f64>,
    variant: LaplacianVariant,
) -> Result<SpectralResult> {
    check_symmetric(matrix)?;
    let n = matrix.nrows();
    if null_direction.len() != n {
        return Err(Error::Dimension { expected: n, got: null_direction.len() });
    }
    if n < 2 {
        return Err(Error::Invalid("fiedler needs at least 2 nodes".into()));
    }
    let norm = null_direction.norm();
    if !(norm > 0.0) {
        return Err(Error::Invalid("null direction must be nonzero".into()));
    }
    let u = null_direction / norm;
    let sym = (matrix + matrix.transpose()) * 0.5;
    let proj = DMatrix::identity(n, n) - &u * u.transpose();
    let deflated = &proj * &sym * &proj;
    // Lift the null direction above the whole spectrum.
    let lift = 2.0 * sym.norm() + 1.0;
    let lifted = &deflated + &u * u.transpose() * lift;
    let lifted = (&lifted + lifted.transpose()) * 0.5;

    let eig = SymmetricEigen::try_new(lifted, f64::EPSILON, EIGEN_MAX_ITER)
        .ok_or(Error::NoConvergence(EIGEN_MAX_ITER))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let lambda2 = eig.eigenvalues[order[0]];
    let lambda3 = if n >= 3 { Some(eig.eigenvalues[order[1]]) } else { None };
    let mut v: DVector<f64> = eig.eigenvectors.column(order[0]).into_owned();
    v -= &u * u.dot(&v);
    let vn = v.norm();
    if !(vn > 0.0) {
        return Err(Error::NoConvergence(EIGEN_MAX_ITER));
    }
    v /= vn;
    apply_sign_convention(&mut v);

    let residual = (&deflated * &v - &v * lambda2).norm();
    if residual > 1e-8 * sym.norm().max(f64::MIN_POSITIVE) {
        return Err(Error::NoConvergence(EIGEN_MAX_ITER));
    }
    Ok(SpectralResult {
        lambda2: lambda2.max(0.0),
        lambda3,
        fiedler_vector: v,
        variant,
    })
}

/// Flips `v` so that its first component of largest magnitude is positive.
pub fn apply_sign_convention(v: &mut DVector<f64>) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = max * 1e-9;
    if let Some(first) = v.iter().find(|x| x.abs() >= max - tol) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
}

/// All eigenvalues in ascending order.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_symmetric(m)?;
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, EIGEN_MAX_ITER)
        .ok_or(Error::NoConvergence(EIGEN_MAX_ITER))?;
    let mut ev: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    Ok(ev)
}

pub fn fiedler_unnormalized(g: &CapacityGraph) -> Result<SpectralResult> {
    let n = g.len();
    fiedler_variant(&laplacian(g), &DVector::from_element(n, 1.0), LaplacianVariant::Unnormalized)
}

/// Fiedler pair of `D^{-1/2} L D^{-1/2}`; its null direction is `D^{1/2}·1`.
pub fn fiedler_normalized(g: &CapacityGraph) -> Result<SpectralResult> {
    let m = normalized_laplacian(g)?;
    let null = g.degrees.map(|b| b.sqrt());
    fiedler_variant(&m, &null, LaplacianVariant::Normalized)
}

/// Fiedler pair of `W^{-1/2} D^{-1/2} L D^{-1/2} W^{-1/2}`, null direction `W^{1/2} D^{1/2}·1`.
pub fn fiedler_weighted(g: &CapacityGraph, w: &WeightMatrix) -> Result<SpectralResult> {
    let m = weighted(&normalized_laplacian(g)?, w)?;
    let null = DVector::from_iterator(
        g.len(),
        g.degrees.iter().zip(w.as_slice()).map(|(b, wi)| (b * wi).sqrt()),
    );
    fiedler_variant(&m, &null, LaplacianVariant::Weighted)
}

/// Fiedler pair of `W^{-1/2} L W^{-1/2}`, null direction `W^{1/2}·1`.
pub fn fiedler_unnormalized_weighted(g: &CapacityGraph, w: &WeightMatrix) -> Result<SpectralResult> {
    let m = unnormalized_weighted_laplacian(g, w)?;
    fiedler_variant(&m, &w.sqrt_ones(), LaplacianVariant::UnnormalizedWeighted)
}

/// One commodity: a source/destination pair with its demand and weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommoditySpec {
    pub source: usize,
    pub destination: usize,
    pub demand: f64,
    pub weights: WeightMatrix,
}

impl CommoditySpec {
    pub fn new(source: usize, destination: usize, demand: f64, weights: WeightMatrix) -> Result<Self> {
        if source == destination {
            return Err(Error::Invalid(format!("commodity source == destination ({source})")));
        }
        if !(demand > 0.0) {
            return Err(Error::Invalid(format!("commodity demand must be > 0, got {demand}")));
        }
        Ok(Self { source, destination, demand, weights })
    }

    /// Weight 1 on this commodity's endpoints and `relay_weight` elsewhere.
    pub fn with_endpoint_weights(
        n: usize,
        source: usize,
        destination: usize,
        demand: f64,
        endpoint_weight: f64,
        relay_weight: f64,
    ) -> Result<Self> {
        let w = (0..n)
            .map(|i| if i == source || i == destination { endpoint_weight } else { relay_weight })
            .collect();
        Self::new(source, destination, demand, WeightMatrix::new(w)?)
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.source >= n {
            return Err(Error::NodeOutOfRange(self.source));
        }
        if self.destination >= n {
            return Err(Error::NodeOutOfRange(self.destination));
        }
        if self.weights.len() != n {
            return Err(Error::Dimension { expected: n, got: self.weights.len() });
        }
        Ok(())
    }
}

/// A minimizing bipartition side, node indices ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct CutOptimum {
    pub value: f64,
    pub subset: Vec<usize>,
}

/// Walks every nonempty proper subset `S` not containing the last node, in
/// Gray-code order, tracking `cut(S, S̄)` and `Σ_{i∈S} x_i` for each tracked
/// vector `x`. All objectives here are symmetric under `S ↔ S̄`.
fn enumerate_cuts<F>(g: &CapacityGraph, tracked: &[&[f64]], mut visit: F)
where
    F: FnMut(u64, f64, &[f64]),
{
    let n = g.len();
    let bits = n - 1;
    let mut in_s = vec![false; n];
    let mut cut = 0.0;
    let mut sums = vec![0.0; tracked.len()];
    for k in 1u64..(1u64 << bits) {
        let v = k.trailing_zeros() as usize;
        let adding = !in_s[v];
        let mut delta = 0.0;
        for u in 0..n {
            if u == v {
                continue;
            }
            let a = g.adjacency[(v, u)];
            if in_s[u] {
                delta -= a;
            } else {
                delta += a;
            }
        }
        in_s[v] = adding;
        if adding {
            cut += delta;
            for (s, x) in sums.iter_mut().zip(tracked) {
                *s += x[v];
            }
        } else {
            cut -= delta;
            for (s, x) in sums.iter_mut().zip(tracked) {
                *s -= x[v];
            }
        }
        let gray = k ^ (k >> 1);
        visit(gray, cut, &sums);
    }
}

fn mask_members(mask: u64, n: usize) -> Vec<usize> {
    (0..n).filter(|&i| mask >> i & 1 == 1).collect()
}

fn exact_cut(g: &CapacityGraph, mask: u64) -> f64 {
    let n = g.len();
    let mut c = 0.0;
    for i in 0..n {
        if mask >> i & 1 == 1 {
            for j in 0..n {
                if mask >> j & 1 == 0 {
                    c += g.adjacency[(i, j)];
                }
            }
        }
    }
    c
}

fn require_small_connected(g: &CapacityGraph, limit: usize) -> Result<()> {
    let n = g.len();
    if n > limit {
        return Err(Error::TooLarge { n, limit });
    }
    if n < 2 {
        return Err(Error::Invalid("need at least 2 nodes".into()));
    }
    if components(g) != 1 {
        return Err(Error::Disconnected);
    }
    Ok(())
}

/// Generic minimizer: `ratio(mask, cut, sums)` returns `None` to skip a subset.
/// Ties keep the first subset in enumeration order; the reported value is
/// recomputed exactly for the winning subset.
fn minimize<R, E>(g: &CapacityGraph, tracked: &[&[f64]], ratio: R, exact: E) -> Option<CutOptimum>
where
    R: Fn(f64, &[f64]) -> Option<f64>,
    E: Fn(u64) -> f64,
{
    let mut best: Option<(f64, u64)> = None;
    enumerate_cuts(g, tracked, |mask, cut, sums| {
        if let Some(r) = ratio(cut, sums) {
            if best.map_or(true, |(b, _)| r < b) {
                best = Some((r, mask));
            }
        }
    });
    best.map(|(_, mask)| CutOptimum { value: exact(mask), subset: mask_members(mask, g.len()) })
}

fn side_sums(mask: u64, x: &[f64]) -> (f64, f64) {
    let mut a = 0.0;
    let mut b = 0.0;
    for (i, v) in x.iter().enumerate() {
        if mask >> i & 1 == 1 {
            a += v;
        } else {
            b += v;
        }
    }
    (a, b)
}

/// `min_S cut(S,S̄) / min(vol S, vol S̄)`.
pub fn cheeger_exact(g: &CapacityGraph) -> Result<f64> {
    cheeger_exact_argmin(g).map(|c| c.value)
}

pub fn cheeger_exact_argmin(g: &CapacityGraph) -> Result<CutOptimum> {
    require_small_connected(g, CHEEGER_MAX_NODES)?;
    let vol: Vec<f64> = g.degrees.iter().cloned().collect();
    let total: f64 = vol.iter().sum();
    minimize(
        g,
        &[&vol],
        |cut, s| Some(cut / s[0].min(total - s[0])),
        |mask| {
            let (a, b) = side_sums(mask, &vol);
            exact_cut(g, mask) / a.min(b)
        },
    )
    .ok_or(Error::NoSeparatingCut)
}

/// `min_S cut(S,S̄) / min(|S|_W, |S̄|_W)`.
pub fn weighted_cheeger_exact(g: &CapacityGraph, w: &WeightMatrix) -> Result<f64> {
    weighted_cheeger_exact_argmin(g, w).map(|c| c.value)
}

pub fn weighted_cheeger_exact_argmin(g: &CapacityGraph, w: &WeightMatrix) -> Result<CutOptimum> {
    require_small_connected(g, CHEEGER_MAX_NODES)?;
    if w.len() != g.len() {
        return Err(Error::Dimension { expected: g.len(), got: w.len() });
    }
    let ws = w.as_slice();
    let total: f64 = ws.iter().sum();
    minimize(
        g,
        &[ws],
        |cut, s| Some(cut / s[0].min(total - s[0])),
        |mask| {
            let (a, b) = side_sums(mask, ws);
            exact_cut(g, mask) / a.min(b)
        },
    )
    .ok_or(Error::NoSeparatingCut)
}

/// All quantities of both Cheeger sandwiches for one graph.
///
/// The weighted sandwich is checked for `L_W = W^{-1/2} L W^{-1/2}`; with the
/// degree-normalized form λ2 is scale free while `h_W` is not, so no
/// capacity-independent lower bound can hold.
#[derive(Debug, Clone, Serialize)]
pub struct CheegerReport {
    pub lambda2_normalized: f64,
    pub h: f64,
    pub lambda2_weighted: f64,
    pub h_weighted: f64,
    pub delta_max: f64,
    pub w_min: f64,
    pub violations: Vec<String>,
    /// JSON dump of the adjacency and weights when a bound fails.
    pub graph_json: Option<String>,
}

impl CheegerReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn verify_cheeger_bounds(g: &CapacityGraph, w: &WeightMatrix) -> Result<CheegerReport> {
    let h = cheeger_exact(g)?;
    let h_w = weighted_cheeger_exact(g, w)?;
    let l2n = fiedler_normalized(g)?.lambda2;
    let l2w = fiedler_unnormalized_weighted(g, w)?.lambda2;
    let delta_max = g.max_degree();
    let w_min = w.min();

    let tol = |x: f64| 1e-9 * x.abs().max(1e-12);
    let mut violations = Vec::new();
    let mut check = |name: &str, lo: f64, hi: f64| {
        if lo > hi + tol(hi) {
            violations.push(format!("{name}: {lo} > {hi}"));
        }
    };
    check("lambda2(L_norm)/2 <= h", l2n / 2.0, h);
    check("h <= sqrt(2 lambda2(L_norm))", h, (2.0 * l2n).sqrt());
    check("lambda2(L_W)/2 <= h_W", l2w / 2.0, h_w);
    check(
        "h_W <= sqrt(2 delta_max lambda2(L_W) / w_min)",
        h_w,
        (2.0 * delta_max * l2w / w_min).sqrt(),
    );
    let graph_json = if violations.is_empty() {
        None
    } else {
        let rows: Vec<Vec<f64>> = (0..g.len())
            .map(|i| g.adjacency.row(i).iter().cloned().collect())
            .collect();
        serde_json::to_string(&serde_json::json!({
            "adjacency": rows,
            "weights": w.as_slice(),
        }))
        .ok()
    };
    Ok(CheegerReport {
        lambda2_normalized: l2n,
        h,
        lambda2_weighted: l2w,
        h_weighted: h_w,
        delta_max,
        w_min,
        violations,
        graph_json,
    })
}

/// `w̄_i = Σ_k (w_i^(k))^{1−p}`.
pub fn aggregate_weights(commodities: &[CommoditySpec], p: f64) -> Result<WeightMatrix> {
    let first = commodities
        .first()
        .ok_or_else(|| Error::Invalid("need at least one commodity".into()))?;
    let n = first.weights.len();
    let mut agg = vec![0.0; n];
    for c in commodities {
        if c.weights.len() != n {
            return Err(Error::Dimension { expected: n, got: c.weights.len() });
        }
        for (a, w) in agg.iter_mut().zip(c.weights.as_slice()) {
            *a += w.powf(1.0 - p);
        }
    }
    WeightMatrix::new(agg)
}

/// `W̄^{-1/2} D^{-1/2} L D^{-1/2} W̄^{-1/2}` for the aggregate weights.
pub fn multi_weighted_laplacian(
    g: &CapacityGraph,
    commodities: &[CommoditySpec],
    p: f64,
) -> Result<DMatrix<f64>> {
    weighted(&normalized_laplacian(g)?, &aggregate_weights(commodities, p)?)
}

/// `min_S cut / Σ_k γ_k min(|S|_k, |S̄|_k)` with `γ_k = min(|S|_k, |S̄|_k)^{-p}`
/// evaluated per subset.
pub fn multi_weighted_cheeger_exact(
    g: &CapacityGraph,
    commodities: &[CommoditySpec],
    p: f64,
) -> Result<f64> {
    multi_weighted_cheeger_exact_argmin(g, commodities, p).map(|c| c.value)
}

pub fn multi_weighted_cheeger_exact_argmin(
    g: &CapacityGraph,
    commodities: &[CommoditySpec],
    p: f64,
) -> Result<CutOptimum> {
    require_small_connected(g, MULTI_CHEEGER_MAX_NODES)?;
    if commodities.is_empty() {
        return Err(Error::Invalid("need at least one commodity".into()));
    }
    for c in commodities {
        c.check(g.len())?;
    }
    let tracked: Vec<&[f64]> = commodities.iter().map(|c| c.weights.as_slice()).collect();
    let totals: Vec<f64> = tracked.iter().map(|w| w.iter().sum()).collect();
    // γ_k · m_k = m_k^{1−p}
    let denom = |mins: &mut dyn Iterator<Item = f64>| mins.map(|m| m.powf(1.0 - p)).sum::<f64>();
    minimize(
        g,
        &tracked,
        |cut, s| {
            let d = denom(&mut s.iter().zip(&totals).map(|(a, t)| a.min(t - a)));
            Some(cut / d)
        },
        |mask| {
            let d = denom(&mut tracked.iter().map(|w| {
                let (a, b) = side_sums(mask, w);
                a.min(b)
            }));
            exact_cut(g, mask) / d
        },
    )
    .ok_or(Error::NoSeparatingCut)
}

/// `min_S cut(S,S̄) / Σ_{k separated by S} D(k)`; subsets separating no
/// commodity are skipped.
pub fn min_multicut_exact(g: &CapacityGraph, commodities: &[CommoditySpec]) -> Result<f64> {
    min_multicut_exact_argmin(g, commodities).map(|c| c.value)
}

pub fn min_multicut_exact_argmin(
    g: &CapacityGraph,
    commodities: &[CommoditySpec],
) -> Result<CutOptimum> {
    let n = g.len();
    if n > MULTI_CHEEGER_MAX_NODES {
        return Err(Error::TooLarge { n, limit: MULTI_CHEEGER_MAX_NODES });
    }
    if n < 2 {
        return Err(Error::Invalid("need at least 2 nodes".into()));
    }
    for c in commodities {
        c.check(n)?;
    }
    // Separation depends only on S, so the demand sum is computed from the mask.
    let separated = |mask: u64| -> f64 {
        commodities
            .iter()
            .filter(|c| (mask >> c.source & 1) != (mask >> c.destination & 1))
            .map(|c| c.demand)
            .sum()
    };
    let mut best: Option<(f64, u64)> = None;
    enumerate_cuts(g, &[], |mask, cut, _| {
        let d = separated(mask);
        if d > 0.0 {
            let r = cut / d;
            if best.map_or(true, |(b, _)| r < b) {
                best = Some((r, mask));
            }
        }
    });
    best.map(|(_, mask)| CutOptimum {
        value: exact_cut(g, mask) / separated(mask),
        subset: mask_members(mask, n),
    })
    .ok_or(Error::NoSeparatingCut)
}
