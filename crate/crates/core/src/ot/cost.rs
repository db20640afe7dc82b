use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::softmax_in_place;
use crate::numerics::Tensor;

/// Ground metric between two feature vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L2,
    L1,
    Cosine,
    /// `KL(softmax(x) ‖ softmax(y))`.
    Kl,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::L2, Metric::L1, Metric::Cosine, Metric::Kl];

    pub fn label(self) -> &'static str {
        match self {
            Metric::L2 => "L2",
            Metric::L1 => "L1",
            Metric::Cosine => "Cosine",
            Metric::Kl => "KL",
        }
    }
}

#[derive(Clone, Debug)]
pub struct CostMatrix {
    pub values: Tensor,
    pub metric: Metric,
}

impl CostMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn transpose(&self) -> CostMatrix {
        CostMatrix {
            values: self.values.transpose(),
            metric: self.metric,
        }
    }

    pub fn scaled(&self, s: f64) -> CostMatrix {
        CostMatrix {
            values: self.values.scale(s),
            metric: self.metric,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn softmax_rows_of(x: &Tensor) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|i| {
            let mut r = x.row(i).to_vec();
            softmax_in_place(&mut r);
            r
        })
        .collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| if a > 0.0 { a * (a.ln() - b.ln()) } else { 0.0 })
        .sum::<f64>()
        .max(0.0)
}

/// Pairwise distances between the rows of `x` (n x d) and `y` (m x d).
pub fn cost_matrix(x: &Tensor, y: &Tensor, metric: Metric) -> Result<CostMatrix> {
    if x.cols() != y.cols() {
        return Err(Error::Dimension(format!(
            "feature dims differ: {} vs {}",
            x.cols(),
            y.cols()
        )));
    }
    let (n, m) = (x.rows(), y.rows());
    let mut c = Tensor::zeros(&[n, m]);
    match metric {
        Metric::L2 => {
            for i in 0..n {
                for j in 0..m {
                    let d2: f64 = x
                        .row(i)
                        .iter()
                        .zip(y.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    c.set(i, j, d2.sqrt());
                }
            }
        }
        Metric::L1 => {
            for i in 0..n {
                for j in 0..m {
                    let d: f64 = x.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b).abs()).sum();
                    c.set(i, j, d);
                }
            }
        }
        Metric::Cosine => {
            let nx: Vec<f64> = (0..n).map(|i| norm(x.row(i))).collect();
            let ny: Vec<f64> = (0..m).map(|j| norm(y.row(j))).collect();
            for i in 0..n {
                for j in 0..m {
                    let v = if nx[i] == 0.0 || ny[j] == 0.0 {
                        1.0
                    } else {
                        let dot: f64 = x.row(i).iter().zip(y.row(j)).map(|(a, b)| a * b).sum();
                        (1.0 - dot / (nx[i] * ny[j])).max(0.0)
                    };
                    c.set(i, j, v);
                }
            }
        }
        Metric::Kl => {
            let p = softmax_rows_of(x);
            let q = softmax_rows_of(y);
            for i in 0..n {
                for j in 0..m {
                    c.set(i, j, kl(&p[i], &q[j]));
                }
            }
        }
    }
    Ok(CostMatrix { values: c, metric })
}

/// Gradient of `⟨C(x, y), P⟩` with the plan held fixed, for both point sets.
///
/// Returns `(d/dx, d/dy)`. L2 divides by `max(‖x−y‖, 1e-12)`; L1 uses a zero
/// subgradient at ties; cosine against a zero-norm row contributes nothing.
pub fn ot_grad_both(
    x: &Tensor,
    y: &Tensor,
    plan: &Tensor,
    metric: Metric,
) -> Result<(Tensor, Tensor)> {
    let (n, m, d) = (x.rows(), y.rows(), x.cols());
    if y.cols() != d {
        return Err(Error::Dimension("feature dims differ".into()));
    }
    if plan.rows() != n || plan.cols() != m {
        return Err(Error::Dimension(format!(
            "plan {:?} does not match {n} x {m}",
            plan.shape()
        )));
    }
    let mut gx = Tensor::zeros(&[n, d]);
    let mut gy = Tensor::zeros(&[m, d]);
    match metric {
        Metric::L2 => {
            for i in 0..n {
                for j in 0..m {
                    let p = plan.get(i, j);
                    if p == 0.0 {
                        continue;
                    }
                    let (xi, yj) = (x.row(i), y.row(j));
                    let dist = xi
                        .iter()
                        .zip(yj)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                        .max(1e-12);
                    let s = p / dist;
                    for k in 0..d {
                        let g = s * (xi[k] - yj[k]);
                        gx.row_mut(i)[k] += g;
                        gy.row_mut(j)[k] -= g;
                    }
                }
            }
        }
        Metric::L1 => {
            for i in 0..n {
                for j in 0..m {
                    let p = plan.get(i, j);
                    if p == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        let diff = x.get(i, k) - y.get(j, k);
                        let s = if diff > 0.0 {
                            p
                        } else if diff < 0.0 {
                            -p
                        } else {
                            0.0
                        };
                        gx.row_mut(i)[k] += s;
                        gy.row_mut(j)[k] -= s;
                    }
                }
            }
        }
        Metric::Cosine => {
            let nx: Vec<f64> = (0..n).map(|i| norm(x.row(i))).collect();
            let ny: Vec<f64> = (0..m).map(|j| norm(y.row(j))).collect();
            for i in 0..n {
                for j in 0..m {
                    let p = plan.get(i, j);
                    if p == 0.0 || nx[i] == 0.0 || ny[j] == 0.0 {
                        continue;
                    }
                    let (xi, yj) = (x.row(i), y.row(j));
                    let dot: f64 = xi.iter().zip(yj).map(|(a, b)| a * b).sum();
                    let nn = nx[i] * ny[j];
                    if 1.0 - dot / nn < 0.0 {
                        // clamped region of the forward pass
                        continue;
                    }
                    for k in 0..d {
                        let dsx = yj[k] / nn - dot * xi[k] / (nx[i].powi(3) * ny[j]);
                        let dsy = xi[k] / nn - dot * yj[k] / (ny[j].powi(3) * nx[i]);
                        gx.row_mut(i)[k] -= p * dsx;
                        gy.row_mut(j)[k] -= p * dsy;
                    }
                }
            }
        }
        Metric::Kl => {
            let ps = softmax_rows_of(x);
            let qs = softmax_rows_of(y);
            for i in 0..n {
                for j in 0..m {
                    let w = plan.get(i, j);
                    if w == 0.0 {
                        continue;
                    }
                    let (p, q) = (&ps[i], &qs[j]);
                    if kl(p, q) == 0.0 {
                        continue;
                    }
                    // dKL/dx = p ⊙ (g − ⟨p, g⟩) with g = log p − log q
                    let g: Vec<f64> = p.iter().zip(q).map(|(a, b)| a.ln() - b.ln()).collect();
                    let pg: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        gx.row_mut(i)[k] += w * p[k] * (g[k] - pg);
                        gy.row_mut(j)[k] += w * (q[k] - p[k]);
                    }
                }
            }
        }
    }
    Ok((gx, gy))
}

/// Envelope gradient of `⟨C, P⟩` with respect to the rows of `x`.
pub fn ot_grad_features(x: &Tensor, y: &Tensor, plan: &Tensor, metric: Metric) -> Result<Tensor> {
    ot_grad_both(x, y, plan, metric).map(|(gx, _)| gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradcheck, Rng};

    fn random(rng: &mut Rng, n: usize, d: usize) -> Tensor {
        Tensor::matrix(n, d, rng.normal_vec(n * d, 1.0)).unwrap()
    }

    #[test]
    fn identical_sets_have_zero_diagonal() {
        let mut rng = Rng::new(4);
        let x = random(&mut rng, 5, 3);
        let c = cost_matrix(&x, &x, Metric::L2).unwrap();
        for i in 0..5 {
            assert_eq!(c.values.get(i, i), 0.0);
        }
    }

    #[test]
    fn orthogonal_unit_vectors_cosine_one() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let y = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let c = cost_matrix(&x, &y, Metric::Cosine).unwrap();
        assert!((c.values.get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_norm_cosine_is_one() {
        let x = Tensor::zeros(&[1, 3]);
        let y = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let c = cost_matrix(&x, &y, Metric::Cosine).unwrap();
        assert_eq!(c.values.data(), &[1.0, 1.0]);
    }

    #[test]
    fn l1_matches_elementwise_loop() {
        let mut rng = Rng::new(5);
        let x = random(&mut rng, 4, 3);
        let y = random(&mut rng, 5, 3);
        let c = cost_matrix(&x, &y, Metric::L1).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += (x.get(i, k) - y.get(j, k)).abs();
                }
                assert!((c.values.get(i, j) - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn kl_of_identical_rows_is_zero() {
        let mut rng = Rng::new(6);
        let x = random(&mut rng, 3, 4);
        let c = cost_matrix(&x, &x, Metric::Kl).unwrap();
        for i in 0..3 {
            assert!(c.values.get(i, i).abs() < 1e-14);
        }
        assert!(c.values.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn dimension_mismatch() {
        let r = cost_matrix(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 4]), Metric::L2);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn grad_zero_at_minimum() {
        let mut rng = Rng::new(7);
        let x = random(&mut rng, 3, 2);
        let plan = Tensor::eye(3).scale(1.0 / 3.0);
        let g = ot_grad_features(&x, &x, &plan, Metric::L2).unwrap();
        assert!(g.max_abs() < 1e-15);
    }

    #[test]
    fn single_pair_l2_grad_is_scaled_unit_vector() {
        let x = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let y = Tensor::zeros(&[1, 2]);
        let plan = Tensor::filled(&[1, 1], 0.5);
        let g = ot_grad_features(&x, &y, &plan, Metric::L2).unwrap();
        assert!((g.get(0, 0) - 0.5 * 0.6).abs() < 1e-15);
        assert!((g.get(0, 1) - 0.5 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn grads_match_frozen_plan_differences() {
        let mut rng = Rng::new(8);
        for metric in Metric::ALL {
            let x = random(&mut rng, 4, 3);
            let y = random(&mut rng, 5, 3);
            let plan = Tensor::matrix(4, 5, (0..20).map(|_| rng.uniform() / 20.0).collect()).unwrap();
            let fx = |x: &Tensor| {
                let c = cost_matrix(x, &y, metric)?;
                Ok((c.values.dot(&plan), ot_grad_both(x, &y, &plan, metric)?.0))
            };
            let err = gradcheck(fx, &x, 1e-6).unwrap();
            assert!(err < 1e-5, "{metric:?} x: {err}");
            let fy = |y: &Tensor| {
                let c = cost_matrix(&x, y, metric)?;
                Ok((c.values.dot(&plan), ot_grad_both(&x, y, &plan, metric)?.1))
            };
            let err = gradcheck(fy, &y, 1e-6).unwrap();
            assert!(err < 1e-5, "{metric:?} y: {err}");
        }
    }
}
