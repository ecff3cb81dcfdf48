//! Empirical probability measures and Wasserstein-2 distances.
//!
//! All mean-field interaction terms in this crate are conditional laws
//! approximated by within-scenario empirical measures: weighted point clouds
//! over a state (or state×control) slice. Path-space measures are represented
//! by their time-grid slices; every shipped benchmark interacts with the
//! population only through slice moments or slice measures.
//!
//! The Wasserstein-2 distance is computed exactly where tests need it:
//! - dimension 1: sorted quantile coupling;
//! - dimension > 1, at most 256 atoms per side: successive-shortest-path
//!   min-cost flow on the bipartite transportation graph;
//! - larger instances: entropic (Sinkhorn) approximation with a reported
//!   duality gap, `ε = 1e-3 ×` mean pairwise cost.

use crate::error::{Error, Result};
use crate::simulator::ParticleEnsemble;
use serde::{Deserialize, Serialize};

/// Atoms above this count (per side) switch the multi-dimensional solver
/// from exact min-cost flow to the entropic approximation.
pub const EXACT_ATOM_LIMIT: usize = 256;

/// A weighted point cloud over ℝ^k. Weights are normalized at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Build a measure from atoms; `None` weights means uniform.
    pub fn new(points: Vec<Vec<f64>>, weights: Option<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("empirical measure needs at least one atom"));
        }
        let dim = points[0].len();
        for p in &points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "empirical measure atoms",
                    expected: dim,
                    got: p.len(),
                });
            }
        }
        let weights = match weights {
            None => vec![1.0 / points.len() as f64; points.len()],
            Some(w) => {
                if w.len() != points.len() {
                    return Err(Error::DimensionMismatch {
                        context: "weights",
                        expected: points.len(),
                        got: w.len(),
                    });
                }
                for (i, &wi) in w.iter().enumerate() {
                    if wi < 0.0 || !wi.is_finite() {
                        return Err(Error::NegativeWeight {
                            index: i,
                            weight: wi,
                        });
                    }
                }
                let total: f64 = w.iter().sum();
                if total <= 0.0 {
                    return Err(Error::InvalidArgument(
                        "weights sum to zero".to_string(),
                    ));
                }
                w.into_iter().map(|wi| wi / total).collect()
            }
        };
        Ok(EmpiricalMeasure { points, weights })
    }

    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(points, None)
    }

    pub fn dirac(point: Vec<f64>) -> Result<Self> {
        Self::new(vec![point], None)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weighted raw moment `Σ w_i x_i[coord]^order` for order in 1..=4.
    pub fn moment(&self, coord: usize, order: u32) -> Result<f64> {
        if coord >= self.dim() {
            return Err(Error::IndexOutOfRange {
                context: "moment coordinate",
                index: coord,
                len: self.dim(),
            });
        }
        if !(1..=4).contains(&order) {
            return Err(Error::InvalidArgument(format!(
                "moment order must be 1..=4, got {order}"
            )));
        }
        Ok(self
            .points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * p[coord].powi(order as i32))
            .sum())
    }

    pub fn mean(&self, coord: usize) -> Result<f64> {
        self.moment(coord, 1)
    }

    /// Weighted central second moment (population variance).
    pub fn central_second(&self, coord: usize) -> Result<f64> {
        let m = self.mean(coord)?;
        Ok(self
            .points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| {
                let d = p[coord] - m;
                w * d * d
            })
            .sum())
    }

    /// Drop coordinates `keep..` producing the marginal over the first
    /// `keep` coordinates; weights are preserved exactly.
    pub fn project(&self, keep: usize) -> Result<EmpiricalMeasure> {
        if keep == 0 || keep > self.dim() {
            return Err(Error::IndexOutOfRange {
                context: "projection width",
                index: keep,
                len: self.dim(),
            });
        }
        Ok(EmpiricalMeasure {
            points: self.points.iter().map(|p| p[..keep].to_vec()).collect(),
            weights: self.weights.clone(),
        })
    }

    /// Check the normalization invariant (weights sum to 1 within 1e-12).
    pub fn check_normalized(&self) -> bool {
        (self.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12
    }
}

/// `empirical_from_points(points, weights?)`: the spec-level constructor.
pub fn empirical_from_points(
    points: &[Vec<f64>],
    weights: Option<&[f64]>,
) -> Result<EmpiricalMeasure> {
    EmpiricalMeasure::new(points.to_vec(), weights.map(|w| w.to_vec()))
}

/// How a transport cost was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransportMethod {
    Quantile1d,
    ExactFlow,
    Entropic,
}

/// Wasserstein-2 result with solver metadata. `cost` is the squared
/// distance; `duality_gap` is zero on exact paths and the primal-dual gap
/// (in squared units) on the entropic path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransportReport {
    pub distance: f64,
    pub cost: f64,
    pub method: TransportMethod,
    pub duality_gap: f64,
}

/// Exact (or, above [`EXACT_ATOM_LIMIT`] atoms, entropic) Wasserstein-2
/// distance between two empirical measures of equal dimension.
pub fn wasserstein2(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    Ok(wasserstein2_report(mu, nu)?.distance)
}

pub fn wasserstein2_report(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<TransportReport> {
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            context: "wasserstein2",
            expected: mu.dim(),
            got: nu.dim(),
        });
    }
    if mu.dim() == 1 {
        let cost = quantile_cost_1d(mu, nu);
        return Ok(TransportReport {
            distance: cost.max(0.0).sqrt(),
            cost,
            method: TransportMethod::Quantile1d,
            duality_gap: 0.0,
        });
    }
    if mu.len() <= EXACT_ATOM_LIMIT && nu.len() <= EXACT_ATOM_LIMIT {
        let cost = flow::transport_cost(mu, nu);
        Ok(TransportReport {
            distance: cost.max(0.0).sqrt(),
            cost,
            method: TransportMethod::ExactFlow,
            duality_gap: 0.0,
        })
    } else {
        let (cost, gap) = sinkhorn_cost(mu, nu);
        Ok(TransportReport {
            distance: cost.max(0.0).sqrt(),
            cost,
            method: TransportMethod::Entropic,
            duality_gap: gap,
        })
    }
}

/// Force the exact min-cost-flow solver regardless of dimension; used by
/// tests that cross-check the 1-d quantile formula.
pub fn wasserstein2_exact_flow(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            context: "wasserstein2",
            expected: mu.dim(),
            got: nu.dim(),
        });
    }
    Ok(flow::transport_cost(mu, nu).max(0.0).sqrt())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// 1-d squared W2 by the sorted quantile coupling: walk the two weighted
/// order statistics and pair off mass greedily.
fn quantile_cost_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    let mut a: Vec<(f64, f64)> = mu
        .points()
        .iter()
        .zip(mu.weights())
        .map(|(p, &w)| (p[0], w))
        .collect();
    let mut b: Vec<(f64, f64)> = nu
        .points()
        .iter()
        .zip(nu.weights())
        .map(|(p, &w)| (p[0], w))
        .collect();
    a.sort_by(|x, y| x.0.total_cmp(&y.0));
    b.sort_by(|x, y| x.0.total_cmp(&y.0));

    let mut cost = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    loop {
        let m = ra.min(rb);
        let d = a[i].0 - b[j].0;
        cost += m * d * d;
        ra -= m;
        rb -= m;
        if ra <= 1e-18 {
            i += 1;
            if i >= a.len() {
                break;
            }
            ra = a[i].1;
        }
        if rb <= 1e-18 {
            j += 1;
            if j >= b.len() {
                break;
            }
            rb = b[j].1;
        }
    }
    cost
}

mod flow {
    //! Successive-shortest-path min-cost flow specialised to the
    //! transportation polytope with real-valued supplies.

    use super::{sq_dist, EmpiricalMeasure};

    const EPS: f64 = 1e-14;

    struct Arc {
        to: usize,
        rev: usize,
        cap: f64,
        cost: f64,
    }

    struct Graph {
        adj: Vec<Vec<Arc>>,
    }

    impl Graph {
        fn new(n: usize) -> Self {
            Graph {
                adj: (0..n).map(|_| Vec::new()).collect(),
            }
        }

        fn add_edge(&mut self, from: usize, to: usize, cap: f64, cost: f64) {
            let rev_from = self.adj[to].len();
            let rev_to = self.adj[from].len();
            self.adj[from].push(Arc {
                to,
                rev: rev_from,
                cap,
                cost,
            });
            self.adj[to].push(Arc {
                to: from,
                rev: rev_to,
                cap: 0.0,
                cost: -cost,
            });
        }
    }

    /// Exact optimal transport cost (squared-distance ground cost) between
    /// two weighted atom clouds.
    pub fn transport_cost(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
        let m = mu.len();
        let n = nu.len();
        let source = m + n;
        let sink = m + n + 1;
        let nodes = m + n + 2;
        let mut g = Graph::new(nodes);
        for (i, &w) in mu.weights().iter().enumerate() {
            g.add_edge(source, i, w, 0.0);
        }
        for (j, &v) in nu.weights().iter().enumerate() {
            g.add_edge(m + j, sink, v, 0.0);
        }
        for i in 0..m {
            for j in 0..n {
                let c = sq_dist(&mu.points()[i], &nu.points()[j]);
                g.add_edge(i, m + j, f64::INFINITY, c);
            }
        }

        // Dijkstra with Johnson potentials; all original costs are >= 0.
        let mut potential = vec![0.0f64; nodes];
        let mut total_cost = 0.0;
        let mut remaining = 1.0f64;
        let max_rounds = 4 * (m + n) + 16;
        for _ in 0..max_rounds {
            if remaining <= 1e-12 {
                break;
            }
            let mut dist = vec![f64::INFINITY; nodes];
            let mut prev: Vec<Option<(usize, usize)>> = vec![None; nodes];
            let mut done = vec![false; nodes];
            dist[source] = 0.0;
            let mut heap = std::collections::BinaryHeap::new();
            heap.push(std::cmp::Reverse((ordered(0.0), source)));
            while let Some(std::cmp::Reverse((d, u))) = heap.pop() {
                if done[u] {
                    continue;
                }
                done[u] = true;
                let du = f64::from_bits(d.0);
                for (k, arc) in g.adj[u].iter().enumerate() {
                    if arc.cap <= EPS {
                        continue;
                    }
                    let nd = du + arc.cost + potential[u] - potential[arc.to];
                    if nd < dist[arc.to] - 1e-15 {
                        dist[arc.to] = nd;
                        prev[arc.to] = Some((u, k));
                        heap.push(std::cmp::Reverse((ordered(nd), arc.to)));
                    }
                }
            }
            if dist[sink].is_infinite() {
                break;
            }
            for v in 0..nodes {
                if dist[v].is_finite() {
                    potential[v] += dist[v];
                }
            }
            // Bottleneck along the shortest path.
            let mut bott = remaining;
            let mut v = sink;
            while let Some((u, k)) = prev[v] {
                bott = bott.min(g.adj[u][k].cap);
                v = u;
            }
            if bott <= EPS {
                break;
            }
            let mut v = sink;
            while let Some((u, k)) = prev[v] {
                let rev = g.adj[u][k].rev;
                g.adj[u][k].cap -= bott;
                total_cost += bott * g.adj[u][k].cost;
                g.adj[v][rev].cap += bott;
                v = u;
            }
            remaining -= bott;
        }
        total_cost
    }

    /// Total-order wrapper so f64 distances can live in a BinaryHeap.
    #[derive(PartialEq, Eq, PartialOrd, Ord)]
    struct OrderedBits(u64);

    fn ordered(x: f64) -> OrderedBits {
        // Non-negative finite distances only; bit order matches value order.
        OrderedBits(x.max(0.0).to_bits())
    }
}

/// Sinkhorn approximation for large clouds. Returns `(primal cost of the
/// rounded feasible plan, duality gap vs. an unregularized dual bound)`.
fn sinkhorn_cost(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> (f64, f64) {
    let m = mu.len();
    let n = nu.len();
    let mut cost_mat = vec![0.0f64; m * n];
    let mut mean_cost = 0.0;
    for i in 0..m {
        for j in 0..n {
            let c = sq_dist(&mu.points()[i], &nu.points()[j]);
            cost_mat[i * n + j] = c;
            mean_cost += c;
        }
    }
    mean_cost /= (m * n) as f64;
    let eps = (1e-3 * mean_cost).max(1e-12);

    let w = mu.weights();
    let v = nu.weights();
    // Log-domain Sinkhorn iterations on dual potentials f, g.
    let mut f = vec![0.0f64; m];
    let mut g = vec![0.0f64; n];
    for _ in 0..500 {
        let mut delta = 0.0f64;
        for (i, fi) in f.iter_mut().enumerate() {
            let mut acc = f64::NEG_INFINITY;
            for j in 0..n {
                let t = (g[j] - cost_mat[i * n + j]) / eps + v[j].ln();
                acc = logaddexp(acc, t);
            }
            let new = -eps * acc;
            delta = delta.max((new - *fi).abs());
            *fi = new;
        }
        for (j, gj) in g.iter_mut().enumerate() {
            let mut acc = f64::NEG_INFINITY;
            for (i, fi) in f.iter().enumerate() {
                let t = (fi - cost_mat[i * n + j]) / eps + w[i].ln();
                acc = logaddexp(acc, t);
            }
            let new = -eps * acc;
            delta = delta.max((new - *gj).abs());
            *gj = new;
        }
        if delta < 1e-10 {
            break;
        }
    }

    // Primal plan, rounded onto the marginals to get a feasible coupling.
    let mut plan = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            plan[i * n + j] =
                w[i] * v[j] * ((f[i] + g[j] - cost_mat[i * n + j]) / eps).exp();
        }
    }
    round_to_marginals(&mut plan, w, v);
    let primal: f64 = plan
        .iter()
        .zip(&cost_mat)
        .map(|(p, c)| p * c)
        .sum();

    // Unregularized dual bound via the c-transform of g.
    let mut dual = 0.0;
    for i in 0..m {
        let mut best = f64::INFINITY;
        for j in 0..n {
            best = best.min(cost_mat[i * n + j] - g[j]);
        }
        dual += w[i] * best;
    }
    for (j, gj) in g.iter().enumerate() {
        dual += v[j] * gj;
    }
    (primal, (primal - dual).max(0.0))
}

fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let hi = a.max(b);
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
}

/// Round a nonnegative matrix onto prescribed row/col sums (Altschuler-style
/// scaling followed by a rank-one correction).
fn round_to_marginals(plan: &mut [f64], w: &[f64], v: &[f64]) {
    let m = w.len();
    let n = v.len();
    for i in 0..m {
        let row: f64 = plan[i * n..(i + 1) * n].iter().sum();
        if row > 0.0 {
            let s = (w[i] / row).min(1.0);
            for x in &mut plan[i * n..(i + 1) * n] {
                *x *= s;
            }
        }
    }
    for j in 0..n {
        let col: f64 = (0..m).map(|i| plan[i * n + j]).sum();
        if col > 0.0 {
            let s = (v[j] / col).min(1.0);
            for i in 0..m {
                plan[i * n + j] *= s;
            }
        }
    }
    let mut row_err = vec![0.0f64; m];
    let mut col_err = vec![0.0f64; n];
    for i in 0..m {
        row_err[i] = w[i] - plan[i * n..(i + 1) * n].iter().sum::<f64>();
    }
    for j in 0..n {
        col_err[j] = v[j] - (0..m).map(|i| plan[i * n + j]).sum::<f64>();
    }
    let total: f64 = row_err.iter().map(|x| x.max(0.0)).sum();
    if total > 1e-15 {
        for i in 0..m {
            for j in 0..n {
                plan[i * n + j] += row_err[i].max(0.0) * col_err[j].max(0.0) / total;
            }
        }
    }
}

/// Per-scenario conditional law flow over a grid: one state-slice measure and
/// one joint state×control measure per grid time.
#[derive(Debug, Clone)]
pub struct ConditionalFlow {
    pub scenario_index: usize,
    pub times: Vec<f64>,
    pub state_measures: Vec<EmpiricalMeasure>,
    pub joint_measures: Vec<EmpiricalMeasure>,
}

impl ConditionalFlow {
    /// Projection consistency: dropping the control coordinates of each
    /// joint measure must reproduce the state measure exactly.
    pub fn projection_consistent(&self) -> bool {
        self.state_measures
            .iter()
            .zip(&self.joint_measures)
            .all(|(s, j)| match j.project(s.dim()) {
                Ok(p) => p == *s,
                Err(_) => false,
            })
    }
}

/// Conditional slices at one grid time: scenario `j`'s measures are built
/// only from scenario `j`'s inner particles, with uniform weights. The joint
/// measure at the final grid index reuses the last step's controls (controls
/// are piecewise constant on cells).
pub fn conditional_slices(
    ensemble: &ParticleEnsemble,
    time_index: usize,
) -> Result<Vec<(EmpiricalMeasure, EmpiricalMeasure)>> {
    let times = ensemble.steps() + 1;
    if time_index >= times {
        return Err(Error::IndexOutOfRange {
            context: "conditional_slices time index",
            index: time_index,
            len: times,
        });
    }
    let n = ensemble.particles();
    let sd = ensemble.state_dim();
    let cd = ensemble.control_dim();
    let control_step = time_index.min(ensemble.steps().saturating_sub(1));
    let mut out = Vec::with_capacity(ensemble.scenarios());
    for j in 0..ensemble.scenarios() {
        let mut state_pts = Vec::with_capacity(n);
        let mut joint_pts = Vec::with_capacity(n);
        for i in 0..n {
            let x = ensemble.state(time_index, j, i).to_vec();
            let mut xu = x.clone();
            if cd > 0 && ensemble.steps() > 0 {
                xu.extend_from_slice(ensemble.control(control_step, j, i));
            }
            state_pts.push(x);
            joint_pts.push(xu);
        }
        debug_assert!(state_pts.iter().all(|p| p.len() == sd));
        out.push((
            EmpiricalMeasure::uniform(state_pts)?,
            EmpiricalMeasure::uniform(joint_pts)?,
        ));
    }
    Ok(out)
}

/// Full conditional flow for one scenario across all grid times.
pub fn conditional_flow(ensemble: &ParticleEnsemble, scenario: usize) -> Result<ConditionalFlow> {
    if scenario >= ensemble.scenarios() {
        return Err(Error::IndexOutOfRange {
            context: "conditional_flow scenario",
            index: scenario,
            len: ensemble.scenarios(),
        });
    }
    let mut state_measures = Vec::new();
    let mut joint_measures = Vec::new();
    for k in 0..=ensemble.steps() {
        let slices = conditional_slices(ensemble, k)?;
        let (s, j) = slices.into_iter().nth(scenario).expect("scenario checked");
        state_measures.push(s);
        joint_measures.push(j);
    }
    Ok(ConditionalFlow {
        scenario_index: scenario,
        times: ensemble.times().to_vec(),
        state_measures,
        joint_measures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Role, Stream};

    fn m1(points: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(points.iter().map(|&x| vec![x]).collect()).unwrap()
    }

    #[test]
    fn single_atom_has_weight_one() {
        let m = empirical_from_points(&[vec![1.0]], None).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.weights(), &[1.0]);
    }

    #[test]
    fn weights_normalize() {
        let m = empirical_from_points(&[vec![0.0], vec![2.0]], Some(&[2.0, 2.0])).unwrap();
        assert_eq!(m.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn duplicate_atoms_mean_and_variance() {
        let m = empirical_from_points(&[vec![0.0], vec![0.0]], None).unwrap();
        assert_eq!(m.mean(0).unwrap(), 0.0);
        assert_eq!(m.central_second(0).unwrap(), 0.0);
    }

    #[test]
    fn constructor_errors() {
        assert!(empirical_from_points(&[], None).is_err());
        assert!(empirical_from_points(&[vec![1.0]], Some(&[-1.0])).is_err());
        assert!(empirical_from_points(&[vec![1.0], vec![1.0, 2.0]], None).is_err());
    }

    #[test]
    fn moment_examples() {
        let pm = m1(&[-1.0, 1.0]);
        assert_eq!(pm.moment(0, 1).unwrap(), 0.0);
        assert_eq!(pm.moment(0, 2).unwrap(), 1.0);
        let tri = m1(&[0.0, 1.0, 2.0]);
        assert!((tri.central_second(0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(tri.moment(0, 5).is_err());
        assert!(tri.moment(3, 2).is_err());
    }

    #[test]
    fn w2_identity_and_diracs() {
        let m = m1(&[0.3, -1.2, 4.0]);
        assert!(wasserstein2(&m, &m).unwrap() < 1e-15);
        let a = m1(&[0.0]);
        let b = m1(&[3.0]);
        assert!((wasserstein2(&a, &b).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn w2_two_by_two_couplings() {
        // uniform{0,2} vs uniform{1,3}: monotone coupling costs
        // sqrt((1+1)/2) = 1, the crossing coupling costs sqrt((9+1)/2);
        // the optimum is the monotone one.
        let a = m1(&[0.0, 2.0]);
        let b = m1(&[1.0, 3.0]);
        let monotone = (0.5f64 * (1.0 + 1.0)).sqrt();
        let crossing = (0.5f64 * (9.0 + 1.0)).sqrt();
        let d = wasserstein2(&a, &b).unwrap();
        assert!((d - monotone.min(crossing)).abs() < 1e-12);
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn w2_dimension_mismatch() {
        let a = m1(&[0.0]);
        let b = EmpiricalMeasure::uniform(vec![vec![0.0, 0.0]]).unwrap();
        assert!(wasserstein2(&a, &b).is_err());
    }

    fn random_measure(stream: &Stream, base: u64, atoms: usize, dim: usize) -> EmpiricalMeasure {
        let pts: Vec<Vec<f64>> = (0..atoms)
            .map(|i| {
                (0..dim)
                    .map(|c| stream.normal(base + (i * dim + c) as u64))
                    .collect()
            })
            .collect();
        let ws: Vec<f64> = (0..atoms)
            .map(|i| 0.05 + stream.uniform(base + 10_000 + i as u64))
            .collect();
        EmpiricalMeasure::new(pts, Some(ws)).unwrap()
    }

    #[test]
    fn quantile_matches_exact_flow_in_1d() {
        let s = Stream::new(99, Role::Validator, &[1]);
        for rep in 0..40u64 {
            let a = random_measure(&s, rep * 100_000, 2 + (rep % 31) as usize, 1);
            let b = random_measure(&s, rep * 100_000 + 50_000, 2 + (rep % 17) as usize, 1);
            let q = wasserstein2(&a, &b).unwrap();
            let f = wasserstein2_exact_flow(&a, &b).unwrap();
            assert!(
                (q - f).abs() < 1e-10,
                "quantile {q} vs flow {f} at rep {rep}"
            );
        }
    }

    #[test]
    fn symmetry_and_triangle() {
        let s = Stream::new(7, Role::Validator, &[2]);
        for rep in 0..25u64 {
            let dim = 2;
            let a = random_measure(&s, rep * 300_000, 3 + (rep % 13) as usize, dim);
            let b = random_measure(&s, rep * 300_000 + 100_000, 3 + (rep % 11) as usize, dim);
            let c = random_measure(&s, rep * 300_000 + 200_000, 3 + (rep % 7) as usize, dim);
            let dab = wasserstein2(&a, &b).unwrap();
            let dba = wasserstein2(&b, &a).unwrap();
            assert!((dab - dba).abs() < 1e-10);
            let dac = wasserstein2(&a, &c).unwrap();
            let dcb = wasserstein2(&c, &b).unwrap();
            assert!(dab <= dac + dcb + 1e-9, "triangle violated at rep {rep}");
        }
    }

    #[test]
    fn entropic_path_reports_gap() {
        let s = Stream::new(3, Role::Validator, &[4]);
        let a = random_measure(&s, 0, 300, 2);
        let b = random_measure(&s, 5_000_000, 280, 2);
        let rep = wasserstein2_report(&a, &b).unwrap();
        assert_eq!(rep.method, TransportMethod::Entropic);
        assert!(rep.duality_gap >= 0.0);
        // The gap bounds the suboptimality of the returned plan.
        assert!(rep.duality_gap < 0.5 * rep.cost.max(1e-6));
    }

    #[test]
    fn projection_drops_control_coordinates_exactly() {
        let joint =
            EmpiricalMeasure::new(vec![vec![1.0, 9.0], vec![2.0, 8.0]], Some([1.0, 3.0].to_vec()))
                .unwrap();
        let state = joint.project(1).unwrap();
        assert_eq!(state.points(), &[vec![1.0], vec![2.0]]);
        assert_eq!(state.weights(), joint.weights());
    }
}
