//! Optimal-transport distances and the similarity kernel.
//!
//! [`emd`] solves the discrete transportation problem exactly with the
//! transportation simplex (MODI potentials, stepping-stone pivots) started
//! from the north-west corner solution.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{doc_to_nbow, EmbedError, EmbeddingTable, WeightedPointCloud};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("distance must be finite and nonnegative, got {0}")]
    InvalidDistance(f64),
    #[error("unsupported norm order {0}; expected 1 or 2")]
    UnsupportedNormOrder(u8),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Exponent `p` of the Wasserstein-p distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum NormOrder {
    #[default]
    One,
    Two,
}

impl NormOrder {
    fn cost(self, d: f64) -> f64 {
        match self {
            NormOrder::One => d,
            NormOrder::Two => d * d,
        }
    }

    fn root(self, c: f64) -> f64 {
        match self {
            NormOrder::One => c,
            NormOrder::Two => c.sqrt(),
        }
    }
}

impl TryFrom<u8> for NormOrder {
    type Error = TransportError;

    fn try_from(p: u8) -> Result<Self, Self::Error> {
        match p {
            1 => Ok(NormOrder::One),
            2 => Ok(NormOrder::Two),
            other => Err(TransportError::UnsupportedNormOrder(other)),
        }
    }
}

impl From<NormOrder> for u8 {
    fn from(p: NormOrder) -> u8 {
        match p {
            NormOrder::One => 1,
            NormOrder::Two => 2,
        }
    }
}

/// Optimal flows `T[k][l]` and the total cost `Σ T·c`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub flows: Vec<Vec<f64>>,
    pub cost: f64,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Solves `min Σ T_kl c_kl` over `T ≥ 0` with row sums `supply` and column
/// sums `demand`. Both marginals must carry the same total mass.
pub fn solve_transport(supply: &[f64], demand: &[f64], cost: &[Vec<f64>]) -> TransportPlan {
    Simplex::new(supply, demand, cost).solve()
}

struct Simplex<'a> {
    n: usize,
    m: usize,
    cost: &'a [Vec<f64>],
    flow: Vec<Vec<f64>>,
    basic: Vec<Vec<bool>>,
    basis: Vec<(usize, usize)>,
}

impl<'a> Simplex<'a> {
    fn new(supply: &[f64], demand: &[f64], cost: &'a [Vec<f64>]) -> Self {
        let (n, m) = (supply.len(), demand.len());
        let mut flow = vec![vec![0.0; m]; n];
        let mut basic = vec![vec![false; m]; n];
        let mut basis = Vec::with_capacity(n + m - 1);
        let mut rs = supply.to_vec();
        let mut rd = demand.to_vec();
        let (mut i, mut j) = (0, 0);
        // North-west corner: n + m - 1 cells forming a staircase spanning tree.
        loop {
            let f = rs[i].min(rd[j]).max(0.0);
            flow[i][j] = f;
            basic[i][j] = true;
            basis.push((i, j));
            rs[i] -= f;
            rd[j] -= f;
            if i == n - 1 && j == m - 1 {
                break;
            }
            if j == m - 1 || (i < n - 1 && rs[i] <= rd[j]) {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self {
            n,
            m,
            cost,
            flow,
            basic,
            basis,
        }
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n + self.m];
        for &(i, j) in &self.basis {
            adj[i].push(self.n + j);
            adj[self.n + j].push(i);
        }
        adj
    }

    fn potentials(&self, adj: &[Vec<usize>]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let mut pot = vec![0.0; n + self.m];
        let mut seen = vec![false; n + self.m];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(node) = queue.pop_front() {
            for &next in &adj[node] {
                if seen[next] {
                    continue;
                }
                seen[next] = true;
                pot[next] = if node < n {
                    self.cost[node][next - n] - pot[node]
                } else {
                    self.cost[next][node - n] - pot[node]
                };
                queue.push_back(next);
            }
        }
        let v = pot.split_off(n);
        (pot, v)
    }

    /// Tree path from row node `i` to column node `n + j`, as basic cells.
    fn path(&self, adj: &[Vec<usize>], i: usize, j: usize) -> Vec<(usize, usize)> {
        let n = self.n;
        let target = n + j;
        let mut parent = vec![usize::MAX; n + self.m];
        parent[i] = i;
        let mut queue = VecDeque::from([i]);
        while let Some(node) = queue.pop_front() {
            if node == target {
                break;
            }
            for &next in &adj[node] {
                if parent[next] == usize::MAX {
                    parent[next] = node;
                    queue.push_back(next);
                }
            }
        }
        let mut cells = Vec::new();
        let mut node = target;
        while node != i {
            let prev = parent[node];
            let cell = if prev < n {
                (prev, node - n)
            } else {
                (node, prev - n)
            };
            cells.push(cell);
            node = prev;
        }
        cells
    }

    fn solve(mut self) -> TransportPlan {
        let scale = self
            .cost
            .iter()
            .flatten()
            .fold(1.0_f64, |acc, &c| acc.max(c.abs()));
        let tol = 1e-12 * scale;
        let max_iter = 10_000 + 50 * self.n * self.m;
        let mut degenerate_streak = 0usize;

        for _ in 0..max_iter {
            let adj = self.adjacency();
            let (u, v) = self.potentials(&adj);
            // Dantzig's rule, switching to Bland's rule during degenerate runs.
            let bland = degenerate_streak > self.n + self.m;
            let mut entering = None;
            let mut best = -tol;
            'scan: for i in 0..self.n {
                for j in 0..self.m {
                    if self.basic[i][j] {
                        continue;
                    }
                    let reduced = self.cost[i][j] - u[i] - v[j];
                    if reduced < best {
                        entering = Some((i, j));
                        if bland {
                            break 'scan;
                        }
                        best = reduced;
                    }
                }
            }
            let Some((ei, ej)) = entering else {
                break;
            };

            // path runs from the entering column back to its row; signs
            // alternate starting with "-" next to the entering cell.
            let path = self.path(&adj, ei, ej);
            let mut theta = f64::INFINITY;
            let mut leaving = (usize::MAX, usize::MAX);
            for &(pi, pj) in path.iter().step_by(2) {
                let f = self.flow[pi][pj];
                if f < theta || (f == theta && (pi, pj) < leaving) {
                    theta = f;
                    leaving = (pi, pj);
                }
            }
            let theta = theta.max(0.0);
            if theta == 0.0 {
                degenerate_streak += 1;
            } else {
                degenerate_streak = 0;
            }
            for (k, &(pi, pj)) in path.iter().enumerate() {
                if k % 2 == 0 {
                    self.flow[pi][pj] = (self.flow[pi][pj] - theta).max(0.0);
                } else {
                    self.flow[pi][pj] += theta;
                }
            }
            self.flow[ei][ej] = theta;
            self.flow[leaving.0][leaving.1] = 0.0;
            self.basic[leaving.0][leaving.1] = false;
            self.basic[ei][ej] = true;
            let slot = self
                .basis
                .iter()
                .position(|&c| c == leaving)
                .expect("leaving cell is basic");
            self.basis[slot] = (ei, ej);
        }

        let cost = self
            .flow
            .iter()
            .zip(self.cost)
            .flat_map(|(fr, cr)| fr.iter().zip(cr).map(|(f, c)| f * c))
            .sum::<f64>()
            .max(0.0);
        TransportPlan {
            flows: self.flow,
            cost,
        }
    }
}

/// Point indices ordered lexicographically by (coordinates, weight).
fn canonical_order(cloud: &WeightedPointCloud) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..cloud.len()).collect();
    idx.sort_by(|&x, &y| {
        cloud.points()[x]
            .partial_cmp(&cloud.points()[y])
            .unwrap()
            .then(cloud.weights()[x].total_cmp(&cloud.weights()[y]))
    });
    idx
}

/// If the clouds hold the same weighted points, the zero-cost plan that
/// matches them up.
fn identity_plan(a: &WeightedPointCloud, b: &WeightedPointCloud) -> Option<TransportPlan> {
    if a.len() != b.len() {
        return None;
    }
    let (oa, ob) = (canonical_order(a), canonical_order(b));
    let same = oa.iter().zip(&ob).all(|(&i, &j)| {
        a.points()[i] == b.points()[j] && a.weights()[i] == b.weights()[j]
    });
    if !same {
        return None;
    }
    let mut flows = vec![vec![0.0; b.len()]; a.len()];
    for (&i, &j) in oa.iter().zip(&ob) {
        flows[i][j] = a.weights()[i];
    }
    Some(TransportPlan { flows, cost: 0.0 })
}

/// Exact earth mover's distance with Euclidean ground metric raised to `p`.
/// Returns `(optimal cost)^(1/p)` and the optimal plan.
pub fn emd(
    a: &WeightedPointCloud,
    b: &WeightedPointCloud,
    p: NormOrder,
) -> Result<(f64, TransportPlan), TransportError> {
    if a.dim() != b.dim() {
        return Err(TransportError::DimensionMismatch(a.dim(), b.dim()));
    }
    if let Some(plan) = identity_plan(a, b) {
        return Ok((0.0, plan));
    }
    let cost: Vec<Vec<f64>> = a
        .points()
        .iter()
        .map(|x| b.points().iter().map(|y| p.cost(euclidean(x, y))).collect())
        .collect();
    let plan = solve_transport(a.weights(), b.weights(), &cost);
    Ok((p.root(plan.cost), plan))
}

/// Word Mover's Distance between two token lists.
pub fn wmd<S: AsRef<str>, T: AsRef<str>>(
    tokens_a: &[S],
    tokens_b: &[T],
    table: &EmbeddingTable,
) -> Result<f64, TransportError> {
    let a = doc_to_nbow(tokens_a, table)?;
    let b = doc_to_nbow(tokens_b, table)?;
    Ok(emd(&a, &b, NormOrder::One)?.0)
}

/// Closed-form Wasserstein-p distance between two empirical distributions on
/// the real line, integrating the gap between their quantile functions.
pub fn wasserstein_1d(xs: &[f64], ys: &[f64], p: NormOrder) -> Result<f64, TransportError> {
    if xs.is_empty() || ys.is_empty() {
        return Err(TransportError::EmptyInput);
    }
    let mut xs = xs.to_vec();
    let mut ys = ys.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len(), ys.len());
    // Quantile breakpoints k/n and l/m, kept on the integer grid 1/(n·m).
    let total = (n * m) as f64;
    let (mut i, mut j, mut at) = (0usize, 0usize, 0usize);
    let mut acc = 0.0;
    while i < n && j < m {
        let next_x = (i + 1) * m;
        let next_y = (j + 1) * n;
        let next = next_x.min(next_y);
        acc += p.cost((xs[i] - ys[j]).abs()) * ((next - at) as f64 / total);
        at = next;
        if next_x == next {
            i += 1;
        }
        if next_y == next {
            j += 1;
        }
    }
    Ok(p.root(acc))
}

/// Gaussian similarity `exp(-(delta/sigma)^2)`.
pub fn gaussian_weight(delta: f64, sigma: f64) -> Result<f64, TransportError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(TransportError::NonPositiveSigma(sigma));
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(TransportError::InvalidDistance(delta));
    }
    let r = delta / sigma;
    Ok((-(r * r)).exp())
}

/// Median of the strictly positive distances; `1.0` if there are none.
pub fn median_sigma(deltas: &[f64]) -> Result<f64, TransportError> {
    if deltas.is_empty() {
        return Err(TransportError::EmptyInput);
    }
    let mut positive: Vec<f64> = deltas.iter().copied().filter(|&d| d > 0.0).collect();
    if positive.is_empty() {
        return Ok(1.0);
    }
    positive.sort_by(f64::total_cmp);
    let k = positive.len();
    Ok(if k % 2 == 1 {
        positive[k / 2]
    } else {
        (positive[k / 2 - 1] + positive[k / 2]) / 2.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cloud(points: &[&[f64]], weights: &[f64]) -> WeightedPointCloud {
        WeightedPointCloud::new(points.iter().map(|p| p.to_vec()).collect(), weights.to_vec())
            .unwrap()
    }

    fn check_plan(a: &WeightedPointCloud, b: &WeightedPointCloud, plan: &TransportPlan) {
        for (row, &w) in plan.flows.iter().zip(a.weights()) {
            assert!(row.iter().all(|&f| f >= 0.0));
            assert_abs_diff_eq!(row.iter().sum::<f64>(), w, epsilon = 1e-9);
        }
        for (l, &w) in b.weights().iter().enumerate() {
            let col: f64 = plan.flows.iter().map(|r| r[l]).sum();
            assert_abs_diff_eq!(col, w, epsilon = 1e-9);
        }
    }

    #[test]
    fn identical_clouds_are_zero() {
        let a = cloud(&[&[0.0, 1.0], &[2.0, 3.0]], &[0.3, 0.7]);
        let b = cloud(&[&[2.0, 3.0], &[0.0, 1.0]], &[0.7, 0.3]);
        let (d, plan) = emd(&a, &b, NormOrder::One).unwrap();
        assert_eq!(d, 0.0);
        check_plan(&a, &b, &plan);
    }

    #[test]
    fn single_mass_translation() {
        let a = cloud(&[&[0.0]], &[1.0]);
        let b = cloud(&[&[3.0]], &[1.0]);
        assert_eq!(emd(&a, &b, NormOrder::One).unwrap().0, 3.0);
        assert_eq!(emd(&a, &b, NormOrder::Two).unwrap().0, 3.0);
    }

    #[test]
    fn shifted_pair() {
        let a = cloud(&[&[0.0], &[1.0]], &[0.5, 0.5]);
        let b = cloud(&[&[1.0], &[2.0]], &[0.5, 0.5]);
        let (d, plan) = emd(&a, &b, NormOrder::One).unwrap();
        assert_abs_diff_eq!(d, 1.0, epsilon = 1e-12);
        check_plan(&a, &b, &plan);
        assert_abs_diff_eq!(
            plan.cost,
            plan.flows
                .iter()
                .enumerate()
                .flat_map(|(k, r)| r.iter().enumerate().map(move |(l, f)| (k, l, *f)))
                .map(|(k, l, f)| f * euclidean(&a.points()[k], &b.points()[l]))
                .sum::<f64>(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn dimension_mismatch() {
        let a = cloud(&[&[0.0]], &[1.0]);
        let b = cloud(&[&[0.0, 1.0]], &[1.0]);
        assert!(matches!(
            emd(&a, &b, NormOrder::One),
            Err(TransportError::DimensionMismatch(1, 2))
        ));
    }

    #[test]
    fn unequal_sizes_and_degenerate_marginals() {
        // Equal partial sums force degenerate NW-corner pivots.
        let a = cloud(&[&[0.0], &[1.0], &[2.0], &[3.0]], &[0.25; 4]);
        let b = cloud(&[&[3.0], &[0.0]], &[0.5, 0.5]);
        let (d, plan) = emd(&a, &b, NormOrder::One).unwrap();
        check_plan(&a, &b, &plan);
        // {0,1} -> 0 costs 0.5 * 0.5, {2,3} -> 3 costs 0.5 * 0.5.
        assert_abs_diff_eq!(d, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn wmd_examples() {
        let table = EmbeddingTable::parse("2 2\na 1 0\nb 0 1", true).unwrap();
        assert_eq!(wmd(&["a", "b"], &["b", "a"], &table).unwrap(), 0.0);
        assert_abs_diff_eq!(
            wmd(&["a"], &["b"], &table).unwrap(),
            2f64.sqrt(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            wmd(&["a", "b"], &["b"], &table).unwrap(),
            2f64.sqrt() / 2.0,
            epsilon = 1e-12
        );
        assert!(matches!(
            wmd(&["zzz"], &["a"], &table),
            Err(TransportError::Embed(EmbedError::AllTokensOov))
        ));
    }

    #[test]
    fn wasserstein_1d_examples() {
        assert_eq!(
            wasserstein_1d(&[3.0, 1.0, 2.0], &[1.0, 2.0, 3.0], NormOrder::One).unwrap(),
            0.0
        );
        assert_eq!(wasserstein_1d(&[0.0], &[1.0], NormOrder::One).unwrap(), 1.0);
        assert_abs_diff_eq!(
            wasserstein_1d(&[0.0, 0.0], &[0.0, 1.0], NormOrder::One).unwrap(),
            0.5,
            epsilon = 1e-15
        );
        // Unequal lengths: quantile steps at 1/3 and 1/2.
        // F_x^-1 = 0 on [0,1/3), 1 on [1/3,2/3), 2 on [2/3,1]; F_y^-1 = 0 then 2.
        // |gap| = 0, 1 on [1/3,1/2), 1 on [1/2,2/3), 0 -> 1/3.
        assert_abs_diff_eq!(
            wasserstein_1d(&[0.0, 1.0, 2.0], &[0.0, 2.0], NormOrder::One).unwrap(),
            1.0 / 3.0,
            epsilon = 1e-15
        );
        assert!(matches!(
            wasserstein_1d(&[], &[1.0], NormOrder::One),
            Err(TransportError::EmptyInput)
        ));
    }

    #[test]
    fn gaussian_weight_values() {
        assert_eq!(gaussian_weight(0.0, 0.3).unwrap(), 1.0);
        assert_abs_diff_eq!(gaussian_weight(1.7, 1.7).unwrap(), (-1f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(gaussian_weight(2.0, 1.0).unwrap(), 0.018315638888734, epsilon = 1e-12);
        assert!(matches!(
            gaussian_weight(1.0, 0.0),
            Err(TransportError::NonPositiveSigma(_))
        ));
        assert!(gaussian_weight(-1.0, 1.0).is_err());
    }

    #[test]
    fn median_sigma_values() {
        assert_eq!(median_sigma(&[0.0, 1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert_eq!(median_sigma(&[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(median_sigma(&[5.0]).unwrap(), 5.0);
        assert_eq!(median_sigma(&[4.0, 0.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
        assert!(median_sigma(&[]).is_err());
    }

    #[test]
    fn norm_order_serde() {
        assert_eq!(serde_json::to_string(&NormOrder::Two).unwrap(), "2");
        assert_eq!(serde_json::from_str::<NormOrder>("1").unwrap(), NormOrder::One);
        assert!(serde_json::from_str::<NormOrder>("3").is_err());
    }
}
