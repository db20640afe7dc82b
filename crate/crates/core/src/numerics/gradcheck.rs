//! Central-difference gradient checking.

use super::kernels;
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compare an analytic gradient with central differences at `point`.
///
/// `f` returns the scalar value and its analytic gradient with respect to its
/// argument. The result is the maximum over coordinates of
/// `|analytic − fd| / max(|analytic|, |fd|, 1e-8)`.
pub fn gradcheck<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    let (value, analytic) = f(point)?;
    if !value.is_finite() || !analytic.all_finite() {
        return Err(Error::Check("non-finite value or gradient".into()));
    }
    if analytic.shape() != point.shape() {
        return Err(Error::Check(format!(
            "gradient shape {:?} differs from point {:?}",
            analytic.shape(),
            point.shape()
        )));
    }
    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for k in 0..point.len() {
        let x0 = point.data()[k];
        probe.data_mut()[k] = x0 + eps;
        let (fp, _) = f(&probe)?;
        probe.data_mut()[k] = x0 - eps;
        let (fm, _) = f(&probe)?;
        probe.data_mut()[k] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Check(format!("non-finite value at coordinate {k}")));
        }
        let fd = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[k];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Scalar probe `⟨w, y⟩` with gradient `w`, used to reduce kernel outputs.
fn project(y: &Tensor, w: &Tensor) -> f64 {
    y.dot(w)
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normal_vec(n, 1.0)).unwrap()
}

/// A differentiable kernel paired with a gradient check at one random point.
pub struct KernelCheck {
    pub name: &'static str,
    pub run: fn(&mut Rng) -> Result<f64>,
}

fn check_matmul_lhs(rng: &mut Rng) -> Result<f64> {
    let b = random(rng, &[4, 3]);
    let w = random(rng, &[5, 3]);
    let a = random(rng, &[5, 4]);
    gradcheck(
        |a| {
            let y = kernels::matmul(a, &b)?;
            let (da, _) = kernels::matmul_backward(a, &b, &w)?;
            Ok((project(&y, &w), da))
        },
        &a,
        1e-5,
    )
}

fn check_matmul_rhs(rng: &mut Rng) -> Result<f64> {
    let a = random(rng, &[5, 4]);
    let w = random(rng, &[5, 3]);
    let b = random(rng, &[4, 3]);
    gradcheck(
        |b| {
            let y = kernels::matmul(&a, b)?;
            let (_, db) = kernels::matmul_backward(&a, b, &w)?;
            Ok((project(&y, &w), db))
        },
        &b,
        1e-5,
    )
}

fn check_softmax(rng: &mut Rng) -> Result<f64> {
    let w = random(rng, &[3, 6]);
    let x = random(rng, &[3, 6]);
    gradcheck(
        |x| {
            let y = kernels::softmax_rows(x);
            Ok((project(&y, &w), kernels::softmax_rows_backward(&y, &w)))
        },
        &x,
        1e-5,
    )
}

fn check_log_softmax(rng: &mut Rng) -> Result<f64> {
    let w = random(rng, &[3, 5]);
    let x = random(rng, &[3, 5]);
    gradcheck(
        |x| {
            let y = kernels::log_softmax_rows(x);
            // d/dx Σ w ⊙ log softmax(x) = w − softmax(x) · Σ_row w
            let s = kernels::softmax_rows(x);
            let mut g = w.clone();
            for i in 0..g.rows() {
                let tot: f64 = w.row(i).iter().sum();
                for (gv, sv) in g.row_mut(i).iter_mut().zip(s.row(i)) {
                    *gv -= sv * tot;
                }
            }
            Ok((project(&y, &w), g))
        },
        &x,
        1e-5,
    )
}

fn check_relu(rng: &mut Rng) -> Result<f64> {
    let w = random(rng, &[4, 4]);
    // keep coordinates away from the kink
    let x = random(rng, &[4, 4]).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    gradcheck(
        |x| {
            let y = kernels::relu(x);
            Ok((project(&y, &w), kernels::relu_backward(x, &w)))
        },
        &x,
        1e-6,
    )
}

fn check_layer_norm_input(rng: &mut Rng) -> Result<f64> {
    let (g, b) = (random(rng, &[6]), random(rng, &[6]));
    let w = random(rng, &[3, 6]);
    let x = random(rng, &[3, 6]);
    gradcheck(
        |x| {
            let (y, cache) = kernels::layer_norm(x, &g, &b, 1e-5);
            let (dx, _, _) = kernels::layer_norm_backward(&cache, &g, &w);
            Ok((project(&y, &w), dx))
        },
        &x,
        1e-5,
    )
}

fn check_layer_norm_gain(rng: &mut Rng) -> Result<f64> {
    let b = random(rng, &[6]);
    let w = random(rng, &[3, 6]);
    let x = random(rng, &[3, 6]);
    let g = random(rng, &[6]);
    gradcheck(
        |g| {
            let (y, cache) = kernels::layer_norm(&x, g, &b, 1e-5);
            let (_, dg, _) = kernels::layer_norm_backward(&cache, g, &w);
            Ok((project(&y, &w), dg))
        },
        &g,
        1e-5,
    )
}

fn check_layer_norm_bias(rng: &mut Rng) -> Result<f64> {
    let g = random(rng, &[6]);
    let w = random(rng, &[3, 6]);
    let x = random(rng, &[3, 6]);
    let b = random(rng, &[6]);
    gradcheck(
        |b| {
            let (y, cache) = kernels::layer_norm(&x, &g, b, 1e-5);
            let (_, _, db) = kernels::layer_norm_backward(&cache, &g, &w);
            Ok((project(&y, &w), db))
        },
        &b,
        1e-5,
    )
}

fn check_add_row(rng: &mut Rng) -> Result<f64> {
    let x = random(rng, &[4, 3]);
    let w = random(rng, &[4, 3]);
    let b = random(rng, &[3]);
    gradcheck(
        |b| {
            let y = kernels::add_row(&x, b);
            let db = Tensor::vector(w.col_sums())?;
            Ok((project(&y, &w), db))
        },
        &b,
        1e-5,
    )
}

/// Every differentiable kernel in [`kernels`].
pub fn registered_kernel_checks() -> Vec<KernelCheck> {
    vec![
        KernelCheck { name: "matmul/lhs", run: check_matmul_lhs },
        KernelCheck { name: "matmul/rhs", run: check_matmul_rhs },
        KernelCheck { name: "softmax_rows", run: check_softmax },
        KernelCheck { name: "log_softmax_rows", run: check_log_softmax },
        KernelCheck { name: "relu", run: check_relu },
        KernelCheck { name: "layer_norm/input", run: check_layer_norm_input },
        KernelCheck { name: "layer_norm/gain", run: check_layer_norm_gain },
        KernelCheck { name: "layer_norm/bias", run: check_layer_norm_bias },
        KernelCheck { name: "add_row", run: check_add_row },
    ]
}
