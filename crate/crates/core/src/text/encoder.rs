use super::{TextPyramid, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Embedding table standing in for a pretrained text encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub table: Tensor,
    pub frozen: bool,
}

impl TextEncoder {
    pub fn new(vocab_size: usize, dim: usize, rng: &mut Rng) -> TextEncoder {
        TextEncoder {
            table: Tensor::new(vec![vocab_size, dim], rng.normal_vec(vocab_size * dim, 0.02))
                .expect("shape"),
            frozen: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }
}

/// Vocabulary ids of every text unit, per granularity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidIds {
    pub paragraph: Vec<usize>,
    pub sentences: Vec<Vec<usize>>,
    pub words: Vec<usize>,
}

impl PyramidIds {
    pub fn new(pyr: &TextPyramid, vocab: &Vocabulary) -> PyramidIds {
        PyramidIds {
            paragraph: vocab.encode(&pyr.paragraph_tokens),
            sentences: pyr.sentences.iter().map(|s| vocab.encode(s)).collect(),
            words: vocab.encode(&pyr.keywords),
        }
    }
}

/// One row per paragraph token, sentence and keyword.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    pub paragraph: Tensor,
    pub sentences: Tensor,
    pub words: Tensor,
}

fn gather(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    if ids.is_empty() {
        return Err(Error::EmptyPyramid("text level has no units".into()));
    }
    let rows: Vec<Vec<f64>> = ids.iter().map(|&i| table.row(i).to_vec()).collect();
    Tensor::from_rows(&rows)
}

impl PyramidIds {
    /// Sentence vectors are means of their token embeddings.
    pub fn encode(&self, table: &Tensor) -> Result<TextFeatures> {
        if let Some(&bad) = self
            .paragraph
            .iter()
            .chain(self.sentences.iter().flatten())
            .chain(&self.words)
            .find(|&&i| i >= table.rows())
        {
            return Err(Error::Dimension(format!("token id {bad} outside embedding table")));
        }
        let d = table.cols();
        if self.sentences.is_empty() || self.sentences.iter().any(|s| s.is_empty()) {
            return Err(Error::EmptyPyramid("empty sentence level".into()));
        }
        let mut sentences = Tensor::zeros(&[self.sentences.len(), d]);
        for (r, s) in self.sentences.iter().enumerate() {
            let out = sentences.row_mut(r);
            for &id in s {
                for (o, v) in out.iter_mut().zip(table.row(id)) {
                    *o += v;
                }
            }
            let n = s.len() as f64;
            out.iter_mut().for_each(|o| *o /= n);
        }
        Ok(TextFeatures {
            paragraph: gather(table, &self.paragraph)?,
            sentences,
            words: gather(table, &self.words)?,
        })
    }

    /// Scatter-add feature gradients back into the embedding table gradient.
    pub fn encode_backward(&self, grads: &TextFeatures, dtable: &mut Tensor) {
        for (r, &id) in self.paragraph.iter().enumerate() {
            add_into(dtable.row_mut(id), grads.paragraph.row(r), 1.0);
        }
        for (r, s) in self.sentences.iter().enumerate() {
            let w = 1.0 / s.len() as f64;
            for &id in s {
                add_into(dtable.row_mut(id), grads.sentences.row(r), w);
            }
        }
        for (r, &id) in self.words.iter().enumerate() {
            add_into(dtable.row_mut(id), grads.words.row(r), 1.0);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], w: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += w * s;
    }
}

pub fn encode_pyramid(pyr: &TextPyramid, vocab: &Vocabulary, enc: &TextEncoder) -> Result<TextFeatures> {
    PyramidIds::new(pyr, vocab).encode(&enc.table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;

    fn table() -> Tensor {
        Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![1.0, 2.0],
            vec![3.0, -2.0],
        ])
        .unwrap()
    }

    #[test]
    fn single_token_sentence_is_its_embedding() {
        let ids = PyramidIds { paragraph: vec![4], sentences: vec![vec![5]], words: vec![4] };
        let f = ids.encode(&table()).unwrap();
        assert_eq!(f.sentences.row(0), &[3.0, -2.0]);
    }

    #[test]
    fn two_token_sentence_is_the_mean() {
        let ids = PyramidIds {
            paragraph: vec![4, 5],
            sentences: vec![vec![4, 5], vec![4, 5]],
            words: vec![5],
        };
        let f = ids.encode(&table()).unwrap();
        assert_eq!(f.sentences.row(0), &[2.0, 0.0]);
        assert_eq!(f.sentences.row(0), f.sentences.row(1));
        assert_eq!(f.paragraph.rows(), 2);
        assert_eq!(f.words.row(0), &[3.0, -2.0]);
    }

    #[test]
    fn empty_level_rejected() {
        let ids = PyramidIds { paragraph: vec![4], sentences: vec![vec![5]], words: vec![] };
        assert!(matches!(ids.encode(&table()), Err(Error::EmptyPyramid(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let t = Tensor::new(vec![8, 3], rng.normal_vec(24, 1.0)).unwrap();
        let ids = PyramidIds {
            paragraph: vec![4, 5, 4, 7],
            sentences: vec![vec![4, 6], vec![7, 7, 5]],
            words: vec![6, 4],
        };
        let probe = ids.encode(&t).unwrap();
        let w = TextFeatures {
            paragraph: Tensor::new(probe.paragraph.shape().to_vec(), rng.normal_vec(probe.paragraph.len(), 1.0)).unwrap(),
            sentences: Tensor::new(probe.sentences.shape().to_vec(), rng.normal_vec(probe.sentences.len(), 1.0)).unwrap(),
            words: Tensor::new(probe.words.shape().to_vec(), rng.normal_vec(probe.words.len(), 1.0)).unwrap(),
        };
        let err = gradcheck(
            |t| {
                let f = ids.encode(t)?;
                let v = f.paragraph.dot(&w.paragraph) + f.sentences.dot(&w.sentences) + f.words.dot(&w.words);
                let mut g = Tensor::zeros(t.shape());
                ids.encode_backward(&w, &mut g);
                Ok((v, g))
            },
            &t,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
