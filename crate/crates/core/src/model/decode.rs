//! Greedy and beam decoding.

use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};
use crate::numerics::kernels::log_softmax_rows;
use crate::numerics::Tensor;
use crate::text::{BOS, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    Greedy,
    /// Beam width; hypotheses are ranked by length-normalized log-probability.
    Beam(usize),
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding::Beam(3)
    }
}

/// Log-probabilities of the next token; PAD and BOS are never emitted.
fn next_log_probs(model: &Model, memory: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
    let logits = model.decoder_forward(memory, prefix)?;
    let last = Tensor::from_rows(&[logits.row(logits.rows() - 1).to_vec()])?;
    let mut lp = log_softmax_rows(&last);
    for t in [PAD, BOS] {
        lp.row_mut(0)[t] = f64::NEG_INFINITY;
    }
    if lp.row(0).iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Numerical("non-finite decoder output".into()));
    }
    Ok(lp.row(0).to_vec())
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(super) fn generate(model: &Model, memory: &Tensor, mode: Decoding, max_len: usize) -> Result<(Vec<usize>, f64)> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be positive".into()));
    }
    let max_len = max_len.min(model.cfg.max_len);
    match mode {
        Decoding::Greedy => greedy(model, memory, max_len),
        Decoding::Beam(0) => Err(Error::Config("beam width must be positive".into())),
        Decoding::Beam(w) => beam(model, memory, w, max_len),
    }
}

fn greedy(model: &Model, memory: &Tensor, max_len: usize) -> Result<(Vec<usize>, f64)> {
    let mut prefix = vec![BOS];
    let mut score = 0.0;
    while prefix.len() <= max_len {
        let lp = next_log_probs(model, memory, &prefix)?;
        let tok = argmax(&lp);
        score += lp[tok];
        if tok == EOS {
            break;
        }
        prefix.push(tok);
    }
    prefix.remove(0);
    Ok((prefix, score))
}

struct Hyp {
    prefix: Vec<usize>,
    score: f64,
}

fn beam(model: &Model, memory: &Tensor, width: usize, max_len: usize) -> Result<(Vec<usize>, f64)> {
    let mut active = vec![Hyp { prefix: vec![BOS], score: 0.0 }];
    // (tokens, score, normalizing length)
    let mut finished: Vec<(Vec<usize>, f64, usize)> = Vec::new();
    for _ in 0..max_len {
        let mut cand: Vec<(f64, usize, usize)> = Vec::new();
        for (b, h) in active.iter().enumerate() {
            let lp = next_log_probs(model, memory, &h.prefix)?;
            cand.extend(lp.iter().enumerate().map(|(t, &l)| (h.score + l, b, t)));
        }
        cand.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut next = Vec::with_capacity(width);
        for &(score, b, tok) in cand.iter().take(width) {
            let mut prefix = active[b].prefix.clone();
            if tok == EOS {
                let len = prefix.len();
                prefix.remove(0);
                finished.push((prefix, score, len));
            } else {
                prefix.push(tok);
                next.push(Hyp { prefix, score });
            }
        }
        active = next;
        if active.is_empty() || finished.len() >= width {
            break;
        }
    }
    for h in active {
        let len = h.prefix.len() - 1;
        finished.push((h.prefix[1..].to_vec(), h.score, len.max(1)));
    }
    let best = finished
        .into_iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| (a.1 / a.2 as f64).total_cmp(&(b.1 / b.2 as f64)).then(j.cmp(i)))
        .map(|(_, h)| h)
        .expect("beam search keeps at least one hypothesis");
    Ok((best.0, best.1))
}
