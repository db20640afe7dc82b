//! Forward and backward kernels over 2-D tensors.

use super::tensor::Tensor;
use crate::error::{Error, Result};

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every strided access for the given extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a (m x k) · b (k x n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if a.ndim() != 2 || b.ndim() != 2 || k != k2 {
        return Err(Error::Dimension(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        m,
        k,
        n,
        a.data(),
        (k as isize, 1),
        b.data(),
        (n as isize, 1),
        0.0,
        out.data_mut(),
    );
    Ok(out)
}

/// `a (m x k) · bᵀ` where `b` is `n x k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_nt {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        m,
        k,
        n,
        a.data(),
        (k as isize, 1),
        b.data(),
        (1, k as isize),
        0.0,
        out.data_mut(),
    );
    Ok(out)
}

/// `aᵀ · b` where `a` is `k x m` and `b` is `k x n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_tn {:?}ᵀ x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        m,
        k,
        n,
        a.data(),
        (1, m as isize),
        b.data(),
        (n as isize, 1),
        0.0,
        out.data_mut(),
    );
    Ok(out)
}

/// Accumulate `aᵀ · b` into `acc`.
pub fn matmul_tn_acc(a: &Tensor, b: &Tensor, acc: &mut Tensor) {
    let (k, m) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(b.rows(), k);
    debug_assert_eq!(acc.len(), m * n);
    gemm(
        m,
        k,
        n,
        a.data(),
        (1, m as isize),
        b.data(),
        (n as isize, 1),
        1.0,
        acc.data_mut(),
    );
}

/// Gradients of `y = a·b`: `(dY·bᵀ, aᵀ·dY)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((matmul_nt(dy, b)?, matmul_tn(a, dy)?))
}

/// Add a length-`n` bias to every row.
pub fn add_row(x: &Tensor, bias: &Tensor) -> Tensor {
    let mut out = x.clone();
    let b = bias.data();
    for i in 0..out.rows() {
        for (o, bb) in out.row_mut(i).iter_mut().zip(b) {
            *o += bb;
        }
    }
    out
}

/// Row-wise softmax with max subtraction. Entries equal to `-inf` get zero weight.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Backward of softmax given its output `y`: `dx = y ⊙ (dy − ⟨y, dy⟩)`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(y.shape());
    for i in 0..y.rows() {
        let (yr, dyr) = (y.row(i), dy.row(i));
        let inner: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dx.row_mut(i).iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - inner);
        }
    }
    dx
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Saved statistics of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Per-row normalization to zero mean and unit variance, then `gain ⊙ x̂ + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> (Tensor, LayerNormCache) {
    let n = x.cols();
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = xhat.row_mut(i);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * is);
        inv_std.push(is);
    }
    let mut y = xhat.clone();
    let (g, b) = (gain.data(), bias.data());
    for i in 0..y.rows() {
        for ((v, gg), bb) in y.row_mut(i).iter_mut().zip(g).zip(b) {
            *v = *v * gg + bb;
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let n = dy.cols();
    let nf = n as f64;
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgain = Tensor::zeros(&[n]);
    let mut dbias = Tensor::zeros(&[n]);
    let g = gain.data();
    for i in 0..dy.rows() {
        let (xh, dyr) = (cache.xhat.row(i), dy.row(i));
        for j in 0..n {
            dgain.data_mut()[j] += dyr[j] * xh[j];
            dbias.data_mut()[j] += dyr[j];
        }
        let dxhat: Vec<f64> = dyr.iter().zip(g).map(|(a, b)| a * b).collect();
        let sum_d: f64 = dxhat.iter().sum();
        let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
        let is = cache.inv_std[i];
        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
            *d = is / nf * (nf * dxhat[j] - sum_d - xh[j] * sum_dx);
        }
    }
    (dx, dgain, dbias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn random(rng: &mut Rng, m: usize, n: usize) -> Tensor {
        Tensor::matrix(m, n, rng.normal_vec(m * n, 1.0)).unwrap()
    }

    #[test]
    fn identity_times_matrix() {
        let b = Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
    }

    #[test]
    fn annihilating_product_is_zero() {
        let a = Tensor::from_rows(&[vec![1., 0.], vec![0., 0.]]).unwrap();
        let b = Tensor::from_rows(&[vec![0., 0.], vec![0., 1.]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(3);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let got = matmul(&a, &b).unwrap();
        assert!(got.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        assert!(matmul_nt(&a, &b.transpose())
            .unwrap()
            .max_abs_diff(&got)
            < 1e-12);
        assert!(matmul_tn(&a.transpose(), &b)
            .unwrap()
            .max_abs_diff(&got)
            < 1e-12);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_uniform_row() {
        let s = softmax_rows(&Tensor::zeros(&[1, 3]));
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let s = softmax_rows(&Tensor::matrix(1, 2, vec![1000.0, 0.0]).unwrap());
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-15);
        assert!(s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let s = softmax_rows(&Tensor::matrix(1, 3, vec![1., 2., 3.]).unwrap());
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        for k in 0..3 {
            assert!((s.data()[k] - ((k + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::filled(&[1, 4], 2.5);
        let (y, _) = layer_norm(&x, &Tensor::filled(&[4], 1.0), &Tensor::zeros(&[4]), 1e-5);
        assert!(y.max_abs() < 1e-12);
    }

    #[test]
    fn layer_norm_two_values() {
        let x = Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap();
        let eps = 1e-5;
        let (y, _) = layer_norm(&x, &Tensor::filled(&[2], 1.0), &Tensor::zeros(&[2]), eps);
        // mean 2, variance 1
        let expect = 1.0 / (1.0 + eps).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12);
        assert!((y.data()[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let mut rng = Rng::new(9);
        let x = random(&mut rng, 5, 7);
        let (y, _) = layer_norm(&x, &Tensor::filled(&[7], 1.0), &Tensor::zeros(&[7]), 1e-12);
        for i in 0..5 {
            let r = y.row(i);
            let mean = r.iter().sum::<f64>() / 7.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }
}
