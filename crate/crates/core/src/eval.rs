//! Corpus-level captioning metrics and a lexicon-based clinical efficacy proxy.
//! Inputs are token sequences; [`metric_tokens`] prepares raw text.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::words;

/// Lower-cased word tokens with punctuation removed.
pub fn metric_tokens(text: &str) -> Vec<String> {
    words(text).into_iter().map(|w| w.to_lowercase()).collect()
}

fn check_pairs<T>(cands: &[T], refs: &[T]) -> Result<()> {
    if cands.is_empty() {
        return Err(Error::Empty("no candidates".into()));
    }
    if cands.len() != refs.len() {
        return Err(Error::Dimension(format!("{} candidates for {} references", cands.len(), refs.len())));
    }
    Ok(())
}

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU with uniform weights over orders `1..=n`, no smoothing.
pub fn bleu(cands: &[Vec<String>], refs: &[Vec<String>], n: usize) -> Result<f64> {
    check_pairs(cands, refs)?;
    if n == 0 {
        return Err(Error::Config("BLEU order must be >= 1".into()));
    }
    let mut log_p = 0.0;
    for k in 1..=n {
        let (mut clipped, mut total) = (0usize, 0usize);
        for (c, r) in cands.iter().zip(refs) {
            let rc = ngrams(r, k);
            for (g, cnt) in ngrams(c, k) {
                clipped += cnt.min(rc.get(g).copied().unwrap_or(0));
                total += cnt;
            }
        }
        if clipped == 0 {
            return Ok(0.0);
        }
        log_p += (clipped as f64 / total as f64).ln();
    }
    let c: usize = cands.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * (log_p / n as f64).exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// Mean LCS F-measure with recall weighted by `ROUGE_BETA`.
pub fn rouge_l(cands: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    check_pairs(cands, refs)?;
    let mut sum = 0.0;
    for (c, r) in cands.iter().zip(refs) {
        let l = lcs(c, r);
        if l == 0 {
            continue;
        }
        let p = l as f64 / c.len() as f64;
        let rec = l as f64 / r.len() as f64;
        let b2 = ROUGE_BETA * ROUGE_BETA;
        sum += (1.0 + b2) * p * rec / (rec + b2 * p);
    }
    Ok(sum / cands.len() as f64)
}

pub const CIDER_SIGMA: f64 = 6.0;

/// Reference document frequencies for CIDEr-D.
#[derive(Clone, Debug)]
pub struct DocFreq {
    df: HashMap<Vec<String>, usize>,
    docs: usize,
}

impl DocFreq {
    pub fn from_references(refs: &[Vec<String>]) -> Result<DocFreq> {
        if refs.is_empty() {
            return Err(Error::Empty("no reference documents".into()));
        }
        let mut df = HashMap::new();
        for r in refs {
            let mut seen = HashSet::new();
            for n in 1..=4 {
                for g in ngrams(r, n).into_keys() {
                    if seen.insert(g) {
                        *df.entry(g.to_vec()).or_insert(0) += 1;
                    }
                }
            }
        }
        Ok(DocFreq { df, docs: refs.len() })
    }

    /// Per-order TF-IDF vectors and their norms.
    fn vectors<'a>(&self, tokens: &'a [String]) -> Vec<(BTreeMap<&'a [String], f64>, f64)> {
        let log_docs = (self.docs as f64).ln();
        (1..=4)
            .map(|n| {
                let v: BTreeMap<&[String], f64> = ngrams(tokens, n)
                    .into_iter()
                    .map(|(g, tf)| {
                        let df = self.df.get(g).copied().unwrap_or(0).max(1) as f64;
                        (g, tf as f64 * (log_docs - df.ln()))
                    })
                    .collect();
                let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
                (v, norm)
            })
            .collect()
    }
}

/// CIDEr-D: clipped TF-IDF cosine per order 1..4 with a Gaussian length
/// penalty, averaged over orders and scaled by 10.
pub fn cider_d(cands: &[Vec<String>], refs: &[Vec<String>], df: &DocFreq) -> Result<f64> {
    check_pairs(cands, refs)?;
    let mut total = 0.0;
    for (c, r) in cands.iter().zip(refs) {
        let (vc, vr) = (df.vectors(c), df.vectors(r));
        let delta = c.len() as f64 - r.len() as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut score = 0.0;
        for ((hc, nc), (hr, nr)) in vc.iter().zip(&vr) {
            if *nc == 0.0 || *nr == 0.0 {
                continue;
            }
            let dot: f64 = hc
                .iter()
                .filter_map(|(g, a)| hr.get(g).map(|b| a.min(*b) * b))
                .sum();
            score += dot / (nc * nr) * penalty;
        }
        total += 10.0 * score / 4.0;
    }
    Ok(total / cands.len() as f64)
}

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_GAMMA: f64 = 0.5;
pub const METEOR_BETA: f64 = 3.0;

/// Exact-match alignment: each candidate token takes the first unused equal reference token.
fn align_exact(c: &[String], r: &[String]) -> Vec<(usize, usize)> {
    let mut used = vec![false; r.len()];
    let mut out = Vec::new();
    for (i, t) in c.iter().enumerate() {
        if let Some(j) = (0..r.len()).find(|&j| !used[j] && &r[j] == t) {
            used[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// METEOR restricted to exact unigram matches.
pub fn meteor_lite(cands: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    check_pairs(cands, refs)?;
    let mut sum = 0.0;
    for (c, r) in cands.iter().zip(refs) {
        let a = align_exact(c, r);
        let m = a.len();
        if m == 0 {
            continue;
        }
        let p = m as f64 / c.len() as f64;
        let rec = m as f64 / r.len() as f64;
        let f = p * rec / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * rec);
        let chunks = 1 + a.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
        let pen = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
        sum += f * (1.0 - pen);
    }
    Ok(sum / cands.len() as f64)
}

const NEGATIONS: [&str; 2] = ["no", "without"];
const NEGATION_SCOPE: usize = 3;

/// Lexicon findings mentioned without a negation cue in the three preceding tokens.
pub fn finding_labels(tokens: &[String], lexicon: &[String]) -> HashSet<String> {
    let lex: HashSet<&str> = lexicon.iter().map(String::as_str).collect();
    let mut out = HashSet::new();
    for (i, t) in tokens.iter().enumerate() {
        if !lex.contains(t.as_str()) {
            continue;
        }
        let negated = tokens[i.saturating_sub(NEGATION_SCOPE)..i].iter().any(|p| NEGATIONS.contains(&p.as_str()));
        if !negated {
            out.insert(t.clone());
        }
    }
    out
}

/// Macro-averaged precision, recall and F1 of finding labels over reports
/// where either side mentions a finding; all 1.0 when none does.
pub fn ce_proxy(cands: &[Vec<String>], refs: &[Vec<String>], lexicon: &[String]) -> Result<(f64, f64, f64)> {
    check_pairs(cands, refs)?;
    if lexicon.is_empty() {
        return Err(Error::Empty("finding lexicon is empty".into()));
    }
    let (mut sp, mut sr, mut sf, mut n) = (0.0, 0.0, 0.0, 0usize);
    for (c, r) in cands.iter().zip(refs) {
        let (lc, lr) = (finding_labels(c, lexicon), finding_labels(r, lexicon));
        if lc.is_empty() && lr.is_empty() {
            continue;
        }
        let tp = lc.intersection(&lr).count() as f64;
        let p = if lc.is_empty() { 0.0 } else { tp / lc.len() as f64 };
        let rec = if lr.is_empty() { 0.0 } else { tp / lr.len() as f64 };
        let f = if p + rec > 0.0 { 2.0 * p * rec / (p + rec) } else { 0.0 };
        sp += p;
        sr += rec;
        sf += f;
        n += 1;
    }
    if n == 0 {
        return Ok((1.0, 1.0, 1.0));
    }
    let n = n as f64;
    Ok((sp / n, sr / n, sf / n))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub meteor_lite: f64,
    pub ce_precision: f64,
    pub ce_recall: f64,
    pub ce_f1: f64,
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 10] =
        ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "CIDEr-D", "METEOR*", "CE-P", "CE-R", "CE-F1"];

    pub fn values(&self) -> [f64; 10] {
        [
            self.bleu1,
            self.bleu2,
            self.bleu3,
            self.bleu4,
            self.rouge_l,
            self.cider_d,
            self.meteor_lite,
            self.ce_precision,
            self.ce_recall,
            self.ce_f1,
        ]
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let mut acc = [0.0; 10];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v / n;
            }
        }
        let [bleu1, bleu2, bleu3, bleu4, rouge_l, cider_d, meteor_lite, ce_precision, ce_recall, ce_f1] = acc;
        Some(MetricReport { bleu1, bleu2, bleu3, bleu4, rouge_l, cider_d, meteor_lite, ce_precision, ce_recall, ce_f1 })
    }
}

/// Every metric over one candidate/reference corpus of raw reports.
pub fn evaluate<S: AsRef<str>>(cands: &[S], refs: &[S], lexicon: &[String]) -> Result<MetricReport> {
    let c: Vec<Vec<String>> = cands.iter().map(|s| metric_tokens(s.as_ref())).collect();
    let r: Vec<Vec<String>> = refs.iter().map(|s| metric_tokens(s.as_ref())).collect();
    evaluate_tokens(&c, &r, lexicon)
}

pub fn evaluate_tokens(c: &[Vec<String>], r: &[Vec<String>], lexicon: &[String]) -> Result<MetricReport> {
    let df = DocFreq::from_references(r)?;
    let (ce_precision, ce_recall, ce_f1) = ce_proxy(c, r, lexicon)?;
    Ok(MetricReport {
        bleu1: bleu(c, r, 1)?,
        bleu2: bleu(c, r, 2)?,
        bleu3: bleu(c, r, 3)?,
        bleu4: bleu(c, r, 4)?,
        rouge_l: rouge_l(c, r)?,
        cider_d: cider_d(c, r, &df)?,
        meteor_lite: meteor_lite(c, r)?,
        ce_precision,
        ce_recall,
        ce_f1,
    })
}

/// One table row: a label and either a report or the error that replaced it.
pub type TableRow = (String, std::result::Result<MetricReport, String>);

/// Plain-text table, rows = configurations, columns = metrics.
pub fn render_table(title: &str, rows: &[TableRow]) -> String {
    let width = rows.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(0).max(6);
    let mut out = format!("{title}\n{:<width$}", "Method");
    for c in MetricReport::COLUMNS {
        out += &format!(" {c:>8}");
    }
    out += "\n";
    out += &"-".repeat(width + 9 * MetricReport::COLUMNS.len());
    out += "\n";
    for (label, row) in rows {
        out += &format!("{label:<width$}");
        match row {
            Ok(r) => {
                for v in r.values() {
                    out += &format!(" {v:>8.4}");
                }
            }
            Err(e) => out += &format!(" error: {e}"),
        }
        out += "\n";
    }
    out
}

/// Counts of each metric's inputs, handy for logs.
pub fn corpus_stats(tokens: &[Vec<String>]) -> BTreeMap<&'static str, f64> {
    let n = tokens.len().max(1) as f64;
    let len: usize = tokens.iter().map(Vec::len).sum();
    let vocab: HashSet<&String> = tokens.iter().flatten().collect();
    BTreeMap::from([("reports", tokens.len() as f64), ("mean_length", len as f64 / n), ("vocab", vocab.len() as f64)])
}
