use serde::{Deserialize, Serialize};

use super::cost::{cost_matrix, CostMatrix, Metric};
use super::{marginal_violation, Histogram, TransportPlan};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OtMode {
    /// Hard marginal constraints.
    #[default]
    Balanced,
    /// KL-relaxed marginals weighted by `tau`.
    Unbalanced,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    /// Entropic regularization.
    pub sigma: f64,
    /// Marginal penalization (unbalanced mode only).
    pub tau: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub mode: OtMode,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            sigma: 0.1,
            tau: 0.5,
            max_iter: 500,
            tol: 1e-9,
            mode: OtMode::Balanced,
        }
    }
}

/// Below this regularization the scaling runs on log-potentials.
pub const LOG_DOMAIN_SIGMA: f64 = 0.02;

/// Largest `C/σ` the multiplicative kernel is trusted with before `exp` underflows.
const MAX_KERNEL_EXPONENT: f64 = 600.0;

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !(self.tau > 0.0) || self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(Error::Config(format!(
                "sinkhorn needs sigma > 0, tau > 0, max_iter >= 1, tol > 0 (got {self:?})"
            )));
        }
        Ok(())
    }

    /// Damping exponent `τ/(τ+σ)` of the unbalanced updates.
    pub fn damping(&self) -> f64 {
        match self.mode {
            OtMode::Balanced => 1.0,
            OtMode::Unbalanced => self.tau / (self.tau + self.sigma),
        }
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Entropic optimal transport by alternating scaling.
///
/// Balanced mode stops once the worst marginal error drops below `tol`;
/// unbalanced mode stops once the log-potentials move less than `tol`. Small
/// `sigma` (or a cost range that would underflow `exp(−C/σ)`) switches to
/// log-domain updates. Hitting `max_iter` returns the current plan with
/// `converged = false`.
pub fn sinkhorn(
    a: &Histogram,
    b: &Histogram,
    c: &CostMatrix,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    cfg.validate()?;
    let (n, m) = (a.len(), b.len());
    if c.rows() != n || c.cols() != m {
        return Err(Error::Dimension(format!(
            "cost {}x{} vs histograms {n} and {m}",
            c.rows(),
            c.cols()
        )));
    }
    let (sa, sb) = (a.total(), b.total());
    if sa <= 0.0 || sb <= 0.0 {
        return Err(Error::Infeasible("zero total mass".into()));
    }
    if cfg.mode == OtMode::Balanced && (sa - sb).abs() > 1e-9 * sa.max(sb).max(1.0) {
        return Err(Error::Infeasible(format!("supply {sa} vs demand {sb}")));
    }
    let cmax = c.values.max_abs();
    let log_domain = cfg.sigma < LOG_DOMAIN_SIGMA || cmax / cfg.sigma > MAX_KERNEL_EXPONENT;
    let (plan, iterations, converged) = if log_domain {
        scale_log(a.weights(), b.weights(), &c.values, cfg)
    } else {
        scale_direct(a.weights(), b.weights(), &c.values, cfg)
    };
    let mut plan = plan;
    for v in plan.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    if !plan.all_finite() {
        return Err(Error::Numerical("sinkhorn produced non-finite plan".into()));
    }
    let violation = marginal_violation(&plan, a.weights(), b.weights());
    if !converged {
        log::warn!(
            "sinkhorn hit max_iter={} (sigma={}, violation={violation:.3e})",
            cfg.max_iter,
            cfg.sigma
        );
    }
    Ok(TransportPlan {
        cost: plan.dot(&c.values),
        plan,
        marginal_violation: violation,
        iterations,
        converged,
    })
}

fn scale_direct(a: &[f64], b: &[f64], c: &Tensor, cfg: &SinkhornConfig) -> (Tensor, usize, bool) {
    let (n, m) = (a.len(), b.len());
    let kernel = c.map(|v| (-v / cfg.sigma).exp());
    let lambda = cfg.damping();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..cfg.max_iter {
        iterations = it + 1;
        let kv: Vec<f64> = (0..n)
            .map(|i| kernel.row(i).iter().zip(&v).map(|(k, vv)| k * vv).sum())
            .collect();
        let mut delta: f64 = 0.0;
        if cfg.mode == OtMode::Balanced && it > 0 {
            let err = (0..n).map(|i| (u[i] * kv[i] - a[i]).abs()).fold(0.0, f64::max);
            if err < cfg.tol {
                converged = true;
                iterations = it;
                break;
            }
        }
        for i in 0..n {
            let next = if a[i] == 0.0 { 0.0 } else { (a[i] / kv[i]).powf(lambda) };
            delta = delta.max((next.ln() - u[i].ln()).abs());
            u[i] = next;
        }
        let mut ktu = vec![0.0; m];
        for i in 0..n {
            for (acc, k) in ktu.iter_mut().zip(kernel.row(i)) {
                *acc += k * u[i];
            }
        }
        for j in 0..m {
            let next = if b[j] == 0.0 { 0.0 } else { (b[j] / ktu[j]).powf(lambda) };
            delta = delta.max((next.ln() - v[j].ln()).abs());
            v[j] = next;
        }
        if !u.iter().chain(&v).all(|x| x.is_finite()) {
            break;
        }
        if cfg.mode == OtMode::Unbalanced && it > 0 && delta.is_finite() && delta < cfg.tol {
            converged = true;
            break;
        }
    }
    let mut plan = kernel;
    for i in 0..n {
        for (j, p) in plan.row_mut(i).iter_mut().enumerate() {
            *p *= u[i] * v[j];
        }
    }
    (plan, iterations, converged)
}

fn scale_log(a: &[f64], b: &[f64], c: &Tensor, cfg: &SinkhornConfig) -> (Tensor, usize, bool) {
    let (n, m) = (a.len(), b.len());
    let s = cfg.sigma;
    let lambda = cfg.damping();
    let la: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let lb: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    // f, g are log-scalings (potentials divided by sigma)
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut converged = false;
    let mut iterations = 0;
    let row_lse = |g: &[f64], i: usize| log_sum_exp((0..m).map(|j| g[j] - c.get(i, j) / s));
    let col_lse = |f: &[f64], j: usize| log_sum_exp((0..n).map(|i| f[i] - c.get(i, j) / s));
    for it in 0..cfg.max_iter {
        iterations = it + 1;
        if cfg.mode == OtMode::Balanced && it > 0 {
            let err = (0..n)
                .map(|i| {
                    if a[i] == 0.0 {
                        0.0
                    } else {
                        ((f[i] + row_lse(&g, i)).exp() - a[i]).abs()
                    }
                })
                .fold(0.0, f64::max);
            if err < cfg.tol {
                converged = true;
                iterations = it;
                break;
            }
        }
        let mut delta: f64 = 0.0;
        for i in 0..n {
            let next = if a[i] == 0.0 {
                f64::NEG_INFINITY
            } else {
                lambda * (la[i] - row_lse(&g, i))
            };
            if next.is_finite() {
                delta = delta.max((next - f[i]).abs());
            }
            f[i] = next;
        }
        for j in 0..m {
            let next = if b[j] == 0.0 {
                f64::NEG_INFINITY
            } else {
                lambda * (lb[j] - col_lse(&f, j))
            };
            if next.is_finite() {
                delta = delta.max((next - g[j]).abs());
            }
            g[j] = next;
        }
        if cfg.mode == OtMode::Unbalanced && it > 0 && delta < cfg.tol {
            converged = true;
            break;
        }
    }
    let mut plan = Tensor::zeros(&[n, m]);
    for i in 0..n {
        for j in 0..m {
            plan.set(i, j, (f[i] + g[j] - c.get(i, j) / s).exp());
        }
    }
    (plan, iterations, converged)
}

/// Cost matrix and Sinkhorn plan between two point sets under uniform weights.
pub fn uniform_transport(
    x: &Tensor,
    y: &Tensor,
    metric: Metric,
    cfg: &SinkhornConfig,
) -> Result<(CostMatrix, TransportPlan)> {
    let c = cost_matrix(x, y, metric)?;
    let a = Histogram::uniform(x.rows());
    let b = Histogram::uniform(y.rows());
    let plan = sinkhorn(&a, &b, &c, cfg)?;
    Ok((c, plan))
}

/// `⟨C, P⟩` for the Sinkhorn plan between uniformly weighted point sets.
pub fn wasserstein_distance(
    x: &Tensor,
    y: &Tensor,
    metric: Metric,
    cfg: &SinkhornConfig,
) -> Result<f64> {
    uniform_transport(x, y, metric, cfg).map(|(_, p)| p.cost)
}
