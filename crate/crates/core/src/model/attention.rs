//! Multi-head attention with optional clipped relative-position embeddings on
//! keys and values.

use crate::error::{Error, Result};
use crate::numerics::kernels::{matmul, matmul_nt, matmul_tn, softmax_rows, softmax_rows_backward};
use crate::numerics::Tensor;

/// `clip(j − i, −k, k) + k`.
pub fn relation_index(i: usize, j: usize, clip: usize) -> usize {
    let k = clip as isize;
    ((j as isize - i as isize).clamp(-k, k) + k) as usize
}

/// Key and value embeddings for the `2k+1` clipped relations, shared across heads.
#[derive(Clone, Copy, Debug)]
pub struct RelPosTable<'a> {
    pub key: &'a Tensor,
    pub value: &'a Tensor,
    pub clip: usize,
}

impl RelPosTable<'_> {
    fn check(&self, head_dim: usize) -> Result<()> {
        let rows = 2 * self.clip + 1;
        for t in [self.key, self.value] {
            if t.rows() != rows || t.cols() != head_dim {
                return Err(Error::Dimension(format!(
                    "relative table {:?}, expected [{rows}, {head_dim}]",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnWeights<'a> {
    pub wq: &'a Tensor,
    pub wk: &'a Tensor,
    pub wv: &'a Tensor,
    pub wo: &'a Tensor,
}

#[derive(Clone, Debug)]
pub struct AttnCache {
    xq: Tensor,
    xkv: Tensor,
    q: Vec<Tensor>,
    k: Vec<Tensor>,
    v: Vec<Tensor>,
    /// Attention weights per head, `Tq × Tk`.
    pub alpha: Vec<Tensor>,
    concat: Tensor,
}

pub struct AttnGrads {
    pub dwq: Tensor,
    pub dwk: Tensor,
    pub dwv: Tensor,
    pub dwo: Tensor,
    pub dxq: Tensor,
    pub dxkv: Tensor,
    pub dkey: Option<Tensor>,
    pub dvalue: Option<Tensor>,
}

/// Relation buckets summed per query row: `out[i][r] = Σ_{j: idx(i,j)=r} m[i][j]`.
fn bucket_sums(m: &Tensor, clip: usize) -> Tensor {
    let mut out = Tensor::zeros(&[m.rows(), 2 * clip + 1]);
    for i in 0..m.rows() {
        for (j, &v) in m.row(i).iter().enumerate() {
            let r = relation_index(i, j, clip);
            out.row_mut(i)[r] += v;
        }
    }
    out
}

pub fn attention_forward(
    xq: &Tensor,
    xkv: &Tensor,
    w: &AttnWeights,
    heads: usize,
    rpe: Option<&RelPosTable>,
    causal: bool,
) -> Result<(Tensor, AttnCache)> {
    let d = w.wq.cols();
    if d % heads != 0 {
        return Err(Error::Dimension(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    if let Some(t) = rpe {
        t.check(dh)?;
    }
    let widths = vec![dh; heads];
    let q = matmul(xq, w.wq)?.split_cols(&widths);
    let k = matmul(xkv, w.wk)?.split_cols(&widths);
    let v = matmul(xkv, w.wv)?.split_cols(&widths);
    let scale = 1.0 / (dh as f64).sqrt();
    let (tq, tk) = (xq.rows(), xkv.rows());
    let mut alpha = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut logits = matmul_nt(&q[h], &k[h])?;
        if let Some(t) = rpe {
            let qa = matmul_nt(&q[h], t.key)?;
            for i in 0..tq {
                let (row, qa_row) = (logits.row_mut(i), qa.row(i));
                for (j, l) in row.iter_mut().enumerate() {
                    *l += qa_row[relation_index(i, j, t.clip)];
                }
            }
        }
        for i in 0..tq {
            let row = logits.row_mut(i);
            for (j, l) in row.iter_mut().enumerate() {
                *l = if causal && j > i { f64::NEG_INFINITY } else { *l * scale };
            }
        }
        let a = softmax_rows(&logits);
        let mut o = matmul(&a, &v[h])?;
        if let Some(t) = rpe {
            o.add_assign(&matmul(&bucket_sums(&a, t.clip), t.value)?);
        }
        debug_assert_eq!(a.cols(), tk);
        alpha.push(a);
        outs.push(o);
    }
    let concat = Tensor::concat_cols(&outs.iter().collect::<Vec<_>>())?;
    let out = matmul(&concat, w.wo)?;
    Ok((
        out,
        AttnCache { xq: xq.clone(), xkv: xkv.clone(), q, k, v, alpha, concat },
    ))
}

pub fn attention_backward(
    cache: &AttnCache,
    w: &AttnWeights,
    rpe: Option<&RelPosTable>,
    dout: &Tensor,
) -> Result<AttnGrads> {
    let heads = cache.q.len();
    let dh = cache.q[0].cols();
    let scale = 1.0 / (dh as f64).sqrt();
    let dwo = matmul_tn(&cache.concat, dout)?;
    let dconcat = matmul_nt(dout, w.wo)?.split_cols(&vec![dh; heads]);
    let mut dq = Vec::with_capacity(heads);
    let mut dk = Vec::with_capacity(heads);
    let mut dv = Vec::with_capacity(heads);
    let mut dkey = rpe.map(|t| Tensor::zeros(t.key.shape()));
    let mut dvalue = rpe.map(|t| Tensor::zeros(t.value.shape()));
    for h in 0..heads {
        let (a, g) = (&cache.alpha[h], &dconcat[h]);
        let mut dalpha = matmul_nt(g, &cache.v[h])?;
        dv.push(matmul_tn(a, g)?);
        if let (Some(t), Some(dval)) = (rpe, dvalue.as_mut()) {
            let ga = matmul_nt(g, t.value)?;
            for i in 0..dalpha.rows() {
                let (row, ga_row) = (dalpha.row_mut(i), ga.row(i));
                for (j, x) in row.iter_mut().enumerate() {
                    *x += ga_row[relation_index(i, j, t.clip)];
                }
            }
            dval.add_assign(&matmul_tn(&bucket_sums(a, t.clip), g)?);
        }
        // masked positions have α = 0 and so receive no gradient
        let ds = softmax_rows_backward(a, &dalpha).scale(scale);
        let mut dqh = matmul(&ds, &cache.k[h])?;
        dk.push(matmul_tn(&ds, &cache.q[h])?);
        if let (Some(t), Some(dkt)) = (rpe, dkey.as_mut()) {
            let buckets = bucket_sums(&ds, t.clip);
            dqh.add_assign(&matmul(&buckets, t.key)?);
            dkt.add_assign(&matmul_tn(&buckets, &cache.q[h])?);
        }
        dq.push(dqh);
    }
    let cat = |parts: &[Tensor]| Tensor::concat_cols(&parts.iter().collect::<Vec<_>>());
    let (dq, dk, dv) = (cat(&dq)?, cat(&dk)?, cat(&dv)?);
    let mut dxkv = matmul_nt(&dk, w.wk)?;
    dxkv.add_assign(&matmul_nt(&dv, w.wv)?);
    Ok(AttnGrads {
        dwq: matmul_tn(&cache.xq, &dq)?,
        dwk: matmul_tn(&cache.xkv, &dk)?,
        dwv: matmul_tn(&cache.xkv, &dv)?,
        dwo,
        dxq: matmul_nt(&dq, w.wq)?,
        dxkv,
        dkey,
        dvalue,
    })
}
