//! Transportation simplex: northwest-corner start, MODI potentials, stepping-stone pivots.

use super::cost::CostMatrix;
use super::{marginal_violation, Histogram, TransportPlan};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Spanning-tree basis over row nodes `0..n` and column nodes `n..n+m`.
struct Basis {
    n: usize,
    m: usize,
    cells: Vec<(usize, usize)>,
    flows: Vec<f64>,
}

impl Basis {
    fn northwest(a: &[f64], b: &[f64]) -> Basis {
        let (n, m) = (a.len(), b.len());
        let mut ra = a.to_vec();
        let mut rb = b.to_vec();
        let (mut i, mut j) = (0, 0);
        let mut cells = Vec::with_capacity(n + m - 1);
        let mut flows = Vec::with_capacity(n + m - 1);
        while i < n && j < m {
            let advance_row = if i == n - 1 {
                false
            } else if j == m - 1 {
                true
            } else {
                ra[i] < rb[j]
            };
            if advance_row {
                cells.push((i, j));
                flows.push(ra[i]);
                rb[j] -= ra[i];
                i += 1;
            } else {
                cells.push((i, j));
                flows.push(rb[j]);
                ra[i] -= rb[j];
                j += 1;
            }
        }
        debug_assert_eq!(cells.len(), n + m - 1);
        Basis { n, m, cells, flows }
    }

    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.n + self.m];
        for (k, &(i, j)) in self.cells.iter().enumerate() {
            adj[i].push((self.n + j, k));
            adj[self.n + j].push((i, k));
        }
        adj
    }

    /// Dual potentials with `u[0] = 0` and `u_i + v_j = c_ij` on basic cells.
    fn potentials(&self, c: &Tensor, adj: &[Vec<(usize, usize)>]) -> (Vec<f64>, Vec<f64>) {
        let mut pot = vec![f64::NAN; self.n + self.m];
        let mut stack = vec![0usize];
        pot[0] = 0.0;
        while let Some(node) = stack.pop() {
            for &(next, k) in &adj[node] {
                if pot[next].is_nan() {
                    let (i, j) = self.cells[k];
                    pot[next] = c.get(i, j) - pot[node];
                    stack.push(next);
                }
            }
        }
        let u = pot[..self.n].to_vec();
        let v = pot[self.n..].to_vec();
        (u, v)
    }

    /// Basic cells on the tree path from column `j` to row `i`, starting at the column end.
    fn path(&self, adj: &[Vec<(usize, usize)>], i: usize, j: usize) -> Vec<usize> {
        let total = self.n + self.m;
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; total];
        let mut seen = vec![false; total];
        let mut queue = std::collections::VecDeque::new();
        seen[i] = true;
        queue.push_back(i);
        let target = self.n + j;
        while let Some(node) = queue.pop_front() {
            if node == target {
                break;
            }
            for &(next, k) in &adj[node] {
                if !seen[next] {
                    seen[next] = true;
                    parent[next] = Some((node, k));
                    queue.push_back(next);
                }
            }
        }
        let mut cells = Vec::new();
        let mut node = target;
        while let Some((prev, k)) = parent[node] {
            cells.push(k);
            node = prev;
        }
        cells
    }

    /// Flows on the tree for the given marginals, peeling leaves.
    fn tree_flows(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut ra = a.to_vec();
        let mut rb = b.to_vec();
        let mut degree = vec![0usize; self.n + self.m];
        for &(i, j) in &self.cells {
            degree[i] += 1;
            degree[self.n + j] += 1;
        }
        let mut flows = vec![0.0; self.cells.len()];
        let mut done = vec![false; self.cells.len()];
        let mut remaining = self.cells.len();
        while remaining > 0 {
            let mut progressed = false;
            for (k, &(i, j)) in self.cells.iter().enumerate() {
                if done[k] {
                    continue;
                }
                let ci = self.n + j;
                let f = if degree[i] == 1 {
                    ra[i]
                } else if degree[ci] == 1 {
                    rb[j]
                } else {
                    continue;
                };
                flows[k] = f;
                ra[i] -= f;
                rb[j] -= f;
                degree[i] -= 1;
                degree[ci] -= 1;
                done[k] = true;
                remaining -= 1;
                progressed = true;
            }
            if !progressed {
                break;
            }
        }
        flows
    }
}

/// Exact balanced optimal transport.
///
/// Degenerate pivots are avoided by perturbing the supplies by a small `ε`
/// (with `n·ε` added to the last demand); the final flows are recomputed on the
/// optimal basis from the unperturbed marginals.
pub fn exact_ot(a: &Histogram, b: &Histogram, c: &CostMatrix) -> Result<TransportPlan> {
    let (n, m) = (a.len(), b.len());
    if c.rows() != n || c.cols() != m {
        return Err(Error::Dimension(format!(
            "cost {}x{} vs histograms {n} and {m}",
            c.rows(),
            c.cols()
        )));
    }
    let (sa, sb) = (a.total(), b.total());
    if (sa - sb).abs() > 1e-9 * sa.max(sb).max(1.0) {
        return Err(Error::Infeasible(format!("supply {sa} vs demand {sb}")));
    }
    if sa <= 0.0 {
        return Err(Error::Infeasible("zero total mass".into()));
    }

    // Zero-weight rows and columns carry no flow; solve on the support.
    let rows: Vec<usize> = (0..n).filter(|&i| a.weights()[i] > 0.0).collect();
    let cols: Vec<usize> = (0..m).filter(|&j| b.weights()[j] > 0.0).collect();
    let ra: Vec<f64> = rows.iter().map(|&i| a.weights()[i]).collect();
    let mut rb: Vec<f64> = cols.iter().map(|&j| b.weights()[j]).collect();
    // make the reduced problem exactly balanced in floating point
    let drift = ra.iter().sum::<f64>() - rb.iter().sum::<f64>();
    *rb.last_mut().unwrap() += drift;

    let sub = Tensor::new(
        vec![rows.len(), cols.len()],
        rows.iter()
            .flat_map(|&i| cols.iter().map(move |&j| (i, j)))
            .map(|(i, j)| c.values.get(i, j))
            .collect(),
    )?;

    let eps = 1e-11 * sa;
    let pa: Vec<f64> = ra.iter().map(|x| x + eps).collect();
    let mut pb = rb.clone();
    *pb.last_mut().unwrap() += eps * ra.len() as f64;

    let mut basis = Basis::northwest(&pa, &pb);
    let (bn, bm) = (rows.len(), cols.len());
    let scale = sub.max_abs().max(1e-300);
    let tol = 1e-12 * scale;
    let max_pivots = 50 * bn * bm + 1000;
    let mut pivots = 0;
    let mut is_basic = vec![false; bn * bm];
    for &(i, j) in &basis.cells {
        is_basic[i * bm + j] = true;
    }

    loop {
        let adj = basis.adjacency();
        let (u, v) = basis.potentials(&sub, &adj);
        let mut best = -tol;
        let mut entering = None;
        for i in 0..bn {
            for j in 0..bm {
                if is_basic[i * bm + j] {
                    continue;
                }
                let r = sub.get(i, j) - u[i] - v[j];
                if r < best {
                    best = r;
                    entering = Some((i, j));
                }
            }
        }
        let Some((ei, ej)) = entering else { break };
        if pivots >= max_pivots {
            return Err(Error::Numerical(format!(
                "transportation simplex did not terminate after {pivots} pivots"
            )));
        }
        pivots += 1;

        let path = basis.path(&adj, ei, ej);
        debug_assert!(path.len() % 2 == 1);
        let mut theta = f64::INFINITY;
        let mut leave = path[0];
        for &k in path.iter().step_by(2) {
            if basis.flows[k] < theta {
                theta = basis.flows[k];
                leave = k;
            }
        }
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                basis.flows[k] -= theta;
            } else {
                basis.flows[k] += theta;
            }
        }
        let (li, lj) = basis.cells[leave];
        is_basic[li * bm + lj] = false;
        is_basic[ei * bm + ej] = true;
        basis.cells[leave] = (ei, ej);
        basis.flows[leave] = theta;
    }

    let flows = basis.tree_flows(&ra, &rb);
    let mut plan = Tensor::zeros(&[n, m]);
    for (&(i, j), &f) in basis.cells.iter().zip(&flows) {
        plan.set(rows[i], cols[j], f.max(0.0));
    }
    let cost = plan.dot(&c.values);
    let violation = marginal_violation(&plan, a.weights(), b.weights());
    Ok(TransportPlan {
        plan,
        cost,
        marginal_violation: violation,
        iterations: pivots,
        converged: true,
    })
}
