//! Discrete optimal transport between weighted point sets.

pub mod cost;
pub mod exact;
pub mod sinkhorn;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use cost::{cost_matrix, ot_grad_both, ot_grad_features, CostMatrix, Metric};
pub use exact::exact_ot;
pub use sinkhorn::{sinkhorn, uniform_transport, wasserstein_distance, OtMode, SinkhornConfig};

/// Nonnegative mass on `n` support points.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram(Vec<f64>);

impl Histogram {
    pub fn new(weights: Vec<f64>) -> Result<Histogram> {
        if weights.is_empty() {
            return Err(Error::Empty("histogram has no support points".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Infeasible("histogram weights must be finite and nonnegative".into()));
        }
        Ok(Histogram(weights))
    }

    /// Rescales to unit mass.
    pub fn normalized(weights: Vec<f64>) -> Result<Histogram> {
        let h = Histogram::new(weights)?;
        let total = h.total();
        if total <= 0.0 {
            return Err(Error::Infeasible("histogram has zero mass".into()));
        }
        Ok(Histogram(h.0.into_iter().map(|w| w / total).collect()))
    }

    pub fn uniform(n: usize) -> Histogram {
        Histogram(vec![1.0 / n as f64; n])
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// A coupling with its transport cost and solver diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub plan: Tensor,
    pub cost: f64,
    /// Worst absolute deviation of row/column sums from the requested marginals.
    pub marginal_violation: f64,
    /// Scaling sweeps for Sinkhorn, pivots for the simplex.
    pub iterations: usize,
    pub converged: bool,
}

/// JSON summary written next to dumped plans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub cost: f64,
    pub iterations: usize,
    pub marginal_violation: f64,
    pub sigma: f64,
    pub tau: f64,
}

impl TransportPlan {
    pub fn summary(&self, cfg: &SinkhornConfig) -> PlanSummary {
        PlanSummary {
            cost: self.cost,
            iterations: self.iterations,
            marginal_violation: self.marginal_violation,
            sigma: cfg.sigma,
            tau: cfg.tau,
        }
    }
}

pub(crate) fn marginal_violation(plan: &Tensor, a: &[f64], b: &[f64]) -> f64 {
    let rows = plan.row_sums();
    let cols = plan.col_sums();
    rows.iter()
        .zip(a)
        .chain(cols.iter().zip(b))
        .map(|(s, w)| (s - w).abs())
        .fold(0.0, f64::max)
}
