//! Exact discrete optimal transport.
//!
//! [`wasserstein1`] solves the transportation LP with the primal network
//! simplex on the bipartite supply/demand graph: a spanning-tree basis of
//! `m + n - 1` cells, node potentials from the tree, entering cells by reduced
//! cost, and ratio tests along the unique tree cycle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Marginals may disagree in total mass by at most this much.
pub const MASS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    /// `plan[i][j]` mass moved from source `i` to target `j`.
    pub plan: Vec<Vec<f64>>,
    pub cost: f64,
}

impl Coupling {
    pub fn row_marginals(&self) -> Vec<f64> {
        self.plan.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_marginals(&self) -> Vec<f64> {
        let cols = self.plan.first().map_or(0, Vec::len);
        (0..cols).map(|j| self.plan.iter().map(|r| r[j]).sum()).collect()
    }
}

/// `W1(d)(p, q) = min_{pi in T(p,q)} sum_ij d(i,j) pi(i,j)`, with an optimal plan.
pub fn wasserstein1(cost: &[Vec<f64>], p: &[f64], q: &[f64]) -> Result<(f64, Coupling)> {
    if cost.len() != p.len() || cost.iter().any(|r| r.len() != q.len()) {
        return Err(Error::Shape(format!(
            "cost matrix is {}x{}, marginals have {} and {} entries",
            cost.len(),
            cost.first().map_or(0, Vec::len),
            p.len(),
            q.len()
        )));
    }
    if p.iter().chain(q).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Invalid("marginals must be finite and nonnegative".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Invalid("cost entries must be finite".into()));
    }
    let (sp, sq) = (p.iter().sum::<f64>(), q.iter().sum::<f64>());
    if (sp - sq).abs() > MASS_TOL {
        return Err(Error::Infeasible { source_mass: sp, target_mass: sq });
    }

    let rows: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
    let cols: Vec<usize> = (0..q.len()).filter(|&j| q[j] > 0.0).collect();
    let mut plan = vec![vec![0.0; q.len()]; p.len()];
    if rows.is_empty() || cols.is_empty() {
        return Ok((0.0, Coupling { plan, cost: 0.0 }));
    }

    let supply: Vec<f64> = rows.iter().map(|&i| p[i]).collect();
    let demand: Vec<f64> = cols.iter().map(|&j| q[j]).collect();
    let reduced: Vec<Vec<f64>> = rows
        .iter()
        .map(|&i| cols.iter().map(|&j| cost[i][j]).collect())
        .collect();
    let flows = TransportSimplex::new(&reduced, &supply, &demand).solve();
    let mut total = 0.0;
    for (&(r, c), &f) in flows.cells.iter().zip(&flows.flow) {
        plan[rows[r]][cols[c]] += f;
        total += f * reduced[r][c];
    }
    Ok((total, Coupling { plan, cost: total }))
}

/// Convenience: the optimal value only.
pub fn w1_value(cost: &[Vec<f64>], p: &[f64], q: &[f64]) -> Result<f64> {
    wasserstein1(cost, p, q).map(|(v, _)| v)
}

struct TransportSimplex<'a> {
    cost: &'a [Vec<f64>],
    m: usize,
    n: usize,
    /// Basic cells (row, col) and their flows; always `m + n - 1` of them.
    cells: Vec<(usize, usize)>,
    flow: Vec<f64>,
}

struct Basis {
    cells: Vec<(usize, usize)>,
    flow: Vec<f64>,
}

impl<'a> TransportSimplex<'a> {
    /// Northwest-corner start; on simultaneous exhaustion only the row advances,
    /// leaving a zero-flow basic cell so the basis stays a spanning tree.
    fn new(cost: &'a [Vec<f64>], supply: &[f64], demand: &[f64]) -> Self {
        let (m, n) = (supply.len(), demand.len());
        let mut s = supply.to_vec();
        let mut d = demand.to_vec();
        let mut cells = Vec::with_capacity(m + n - 1);
        let mut flow = Vec::with_capacity(m + n - 1);
        let (mut i, mut j) = (0, 0);
        loop {
            let amount = s[i].min(d[j]);
            cells.push((i, j));
            flow.push(amount);
            s[i] -= amount;
            d[j] -= amount;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if j == n - 1 || (i < m - 1 && s[i] <= d[j]) {
                i += 1;
            } else {
                j += 1;
            }
        }
        debug_assert_eq!(cells.len(), m + n - 1);
        Self { cost, m, n, cells, flow }
    }

    fn potentials(&self) -> (Vec<f64>, Vec<f64>) {
        let (m, n) = (self.m, self.n);
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); m + n];
        for (k, &(i, j)) in self.cells.iter().enumerate() {
            adj[i].push(k);
            adj[m + j].push(k);
        }
        let mut u = vec![f64::NAN; m];
        let mut v = vec![f64::NAN; n];
        u[0] = 0.0;
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            for &k in &adj[node] {
                let (i, j) = self.cells[k];
                let c = self.cost[i][j];
                if node < m {
                    if v[j].is_nan() {
                        v[j] = c - u[i];
                        stack.push(m + j);
                    }
                } else if u[i].is_nan() {
                    u[i] = c - v[j];
                    stack.push(i);
                }
            }
        }
        (u, v)
    }

    /// Tree path from row `i0` to column `j0`, as basis-cell indices.
    fn tree_path(&self, i0: usize, j0: usize) -> Vec<usize> {
        let (m, n) = (self.m, self.n);
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); m + n];
        for (k, &(i, j)) in self.cells.iter().enumerate() {
            adj[i].push(k);
            adj[m + j].push(k);
        }
        let mut via: Vec<Option<usize>> = vec![None; m + n];
        let mut seen = vec![false; m + n];
        let mut queue = std::collections::VecDeque::from([i0]);
        seen[i0] = true;
        while let Some(node) = queue.pop_front() {
            if node == m + j0 {
                break;
            }
            for &k in &adj[node] {
                let (i, j) = self.cells[k];
                let other = if node < m { m + j } else { i };
                if !seen[other] {
                    seen[other] = true;
                    via[other] = Some(k);
                    queue.push_back(other);
                }
            }
        }
        let mut path = Vec::new();
        let mut node = m + j0;
        while node != i0 {
            let k = via[node].expect("basis is a spanning tree");
            path.push(k);
            let (i, j) = self.cells[k];
            node = if node < m { m + j } else { i };
        }
        path.reverse();
        path
    }

    fn solve(mut self) -> Basis {
        let scale = self.cost.iter().flatten().fold(1.0_f64, |a, c| a.max(c.abs()));
        let eps = 1e-12 * scale;
        let cells_total = self.m * self.n;
        // Dantzig pricing, falling back to Bland's rule if degenerate pivots pile up.
        let bland_after = 50 * (self.m + self.n);
        let hard_cap = 100 * cells_total.max(1) * (self.m + self.n) + 1000;
        let mut iter = 0;
        loop {
            let (u, v) = self.potentials();
            let bland = iter >= bland_after;
            let mut entering: Option<(usize, usize)> = None;
            let mut best = -eps;
            'scan: for i in 0..self.m {
                for j in 0..self.n {
                    let rc = self.cost[i][j] - u[i] - v[j];
                    if rc < best {
                        entering = Some((i, j));
                        if bland {
                            break 'scan;
                        }
                        best = rc;
                    }
                }
            }
            let Some((i0, j0)) = entering else { break };
            if self.cells.contains(&(i0, j0)) {
                // Round-off on a basic cell; nothing to gain.
                break;
            }
            let path = self.tree_path(i0, j0);
            // Path edges alternate -, +, -, ... starting next to row i0.
            let mut leave_pos = 0;
            let mut theta = f64::INFINITY;
            for (pos, &k) in path.iter().enumerate().step_by(2) {
                let f = self.flow[k];
                let better = f < theta
                    || (f == theta && bland && self.cells[k] < self.cells[path[leave_pos]]);
                if better {
                    theta = f;
                    leave_pos = pos;
                }
            }
            for (pos, &k) in path.iter().enumerate() {
                if pos % 2 == 0 {
                    self.flow[k] -= theta;
                } else {
                    self.flow[k] += theta;
                }
            }
            let leave = path[leave_pos];
            self.cells[leave] = (i0, j0);
            self.flow[leave] = theta;
            iter += 1;
            if iter > hard_cap {
                break;
            }
        }
        for f in &mut self.flow {
            if *f < 0.0 {
                *f = 0.0;
            }
        }
        Basis { cells: self.cells, flow: self.flow }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abs_cost(a: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
        a.iter().map(|x| b.iter().map(|y| (x - y).abs()).collect()).collect()
    }

    #[test]
    fn identical_marginals_cost_nothing() {
        let p = [0.2, 0.3, 0.5];
        let cost = vec![vec![0.0, 1.0, 4.0], vec![1.0, 0.0, 2.0], vec![4.0, 2.0, 0.0]];
        let (v, c) = wasserstein1(&cost, &p, &p).unwrap();
        assert_eq!(v, 0.0);
        for i in 0..3 {
            assert!((c.plan[i][i] - p[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn point_masses() {
        let cost = vec![vec![0.0, 3.5], vec![3.5, 0.0]];
        let (v, _) = wasserstein1(&cost, &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(v, 3.5);
    }

    #[test]
    fn split_mass_to_midpoint() {
        let cost = abs_cost(&[0.0, 1.0], &[0.5]);
        let (v, c) = wasserstein1(&cost, &[0.5, 0.5], &[1.0]).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        assert_eq!(c.col_marginals(), vec![1.0]);
    }

    #[test]
    fn rejects_mismatched_mass() {
        let cost = vec![vec![0.0]];
        assert!(matches!(wasserstein1(&cost, &[1.0], &[0.9]), Err(Error::Infeasible { .. })));
        assert!(wasserstein1(&cost, &[1.0, 0.0], &[1.0]).is_err());
    }

    #[test]
    fn degenerate_start_reaches_optimum() {
        // Northwest corner ties at every step; the optimum is the anti-diagonal.
        let cost = vec![
            vec![9.0, 9.0, 1.0],
            vec![9.0, 1.0, 9.0],
            vec![1.0, 9.0, 9.0],
        ];
        let third = 1.0 / 3.0;
        let (v, c) = wasserstein1(&cost, &[third; 3], &[third; 3]).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
        for (a, b) in c.row_marginals().iter().zip([third; 3]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
