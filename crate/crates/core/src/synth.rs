//! Planted-correspondence corpora: intensity-coded blobs on a noisy
//! background, each paired with a templated sentence naming the finding.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::io::save_tensor;
use crate::numerics::{Rng, Tensor};
use crate::text::{TextRules, DEFAULT_LEXICON};
use crate::visual::Image;

pub const NORMAL_SENTENCE: &str = "the trachea is midline.";

/// One sentence per finding, indexed like the first lexicon entries.
pub const TEMPLATES: [&str; 12] = [
    "there is focal consolidation.",
    "a small pleural effusion is present.",
    "a right pneumothorax is seen.",
    "the heart shows cardiomegaly.",
    "there is basilar atelectasis.",
    "mild pulmonary edema is noted.",
    "a calcified nodule is visible.",
    "a patchy opacity is present.",
    "an old rib fracture is seen.",
    "the lungs show emphysema.",
    "a small granuloma is noted.",
    "there is vascular calcification.",
];

const PLACEMENT_RETRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_findings: usize,
    pub image_size: usize,
    /// Cells per side of the grid findings are planted on.
    pub grid: usize,
    pub blob_radius: f64,
    pub max_findings_per_sample: usize,
    pub background: f64,
    pub noise_std: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_findings: 12,
            image_size: 32,
            grid: 8,
            blob_radius: 3.0,
            max_findings_per_sample: 4,
            background: 0.1,
            noise_std: 0.05,
            n_train: 400,
            n_val: 50,
            n_test: 100,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n_findings == 0 || self.n_findings > TEMPLATES.len() {
            return bad("n_findings must be in 1..=12");
        }
        if self.grid == 0 || self.image_size % self.grid != 0 {
            return bad("image_size must be divisible by grid");
        }
        if self.max_findings_per_sample > self.n_findings {
            return bad("max_findings_per_sample exceeds n_findings");
        }
        if !(self.blob_radius > 0.0) || !(self.noise_std >= 0.0) || !(0.0..=1.0).contains(&self.background) {
            return bad("blob_radius, noise_std or background out of range");
        }
        Ok(())
    }

    /// Gray level that identifies finding `k`.
    pub fn intensity(&self, k: usize) -> f64 {
        0.3 + 0.06 * k as f64
    }
}

/// Finding keyword as it appears in the lexicon.
pub fn finding_keyword(k: usize) -> &'static str {
    DEFAULT_LEXICON.lines().nth(k).expect("lexicon covers every template")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedFinding {
    pub keyword: String,
    pub cell_row: usize,
    pub cell_col: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub image: Image,
    pub report: String,
    /// Finding ids with their cells, in id order.
    pub findings: Vec<(usize, PlantedFinding)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<SynthSample>,
    pub val: Vec<SynthSample>,
    pub test: Vec<SynthSample>,
}

impl SynthCorpus {
    pub fn splits(&self) -> [(&'static str, &[SynthSample]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

fn place(cfg: &SynthConfig, count: usize, rng: &mut Rng) -> Option<Vec<(usize, usize)>> {
    let mut cells: Vec<(usize, usize)> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let c = (rng.below(cfg.grid), rng.below(cfg.grid));
            if cells.iter().all(|&(r, q)| r.abs_diff(c.0).max(q.abs_diff(c.1)) >= 2) {
                cells.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(cells)
}

fn draw_sample(cfg: &SynthConfig, id: String, rng: &mut Rng) -> SynthSample {
    loop {
        let count = rng.below(cfg.max_findings_per_sample + 1);
        let mut ids: Vec<usize> = (0..cfg.n_findings).collect();
        rng.shuffle(&mut ids);
        ids.truncate(count);
        let Some(cells) = place(cfg, count, rng) else { continue };
        let mut findings: Vec<(usize, (usize, usize))> = ids.into_iter().zip(cells).collect();
        findings.sort();

        let n = cfg.image_size;
        let cs = (n / cfg.grid) as f64;
        let mut px = vec![cfg.background; n * n];
        for &(k, (r, c)) in &findings {
            let (cy, cx) = (cs * r as f64 + (cs - 1.0) / 2.0, cs * c as f64 + (cs - 1.0) / 2.0);
            for y in 0..n {
                for x in 0..n {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    if dy * dy + dx * dx <= cfg.blob_radius * cfg.blob_radius {
                        px[y * n + x] = cfg.intensity(k);
                    }
                }
            }
        }
        for p in &mut px {
            *p = (*p + cfg.noise_std * rng.normal()).clamp(0.0, 1.0);
        }
        let mut sentences = vec![NORMAL_SENTENCE];
        sentences.extend(findings.iter().map(|&(k, _)| TEMPLATES[k]));
        return SynthSample {
            id,
            image: Image::new(n, n, px).expect("pixels clamped to [0,1]"),
            report: sentences.join(" "),
            findings: findings
                .into_iter()
                .map(|(k, (r, c))| {
                    (k, PlantedFinding { keyword: finding_keyword(k).to_string(), cell_row: r, cell_col: c })
                })
                .collect(),
        };
    }
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let mut split = |name: &str, n: usize| -> Vec<SynthSample> {
        (0..n).map(|i| draw_sample(cfg, format!("{name}-{i:04}"), &mut rng)).collect()
    };
    let train = split("train", cfg.n_train);
    let val = split("val", cfg.n_val);
    let test = split("test", cfg.n_test);
    Ok(SynthCorpus { train, val, test })
}

/// One corpus line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub report: String,
    pub image: Option<String>,
    pub features: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundingRecord {
    pub id: String,
    pub findings: Vec<PlantedFinding>,
}

/// Writes `{train,val,test}.jsonl`, `grounding.jsonl` and `images/<id>.rihf`.
pub fn write_corpus(corpus: &SynthCorpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut grounding = String::new();
    for (name, samples) in corpus.splits() {
        let mut lines = String::new();
        for s in samples {
            let rel = format!("images/{}.rihf", s.id);
            save_tensor(dir.join(&rel), &s.image.to_tensor())?;
            let rec = CorpusRecord { id: s.id.clone(), report: s.report.clone(), image: Some(rel), features: None };
            lines += &(serde_json::to_string(&rec)? + "\n");
            let g = GroundingRecord { id: s.id.clone(), findings: s.findings.iter().map(|(_, f)| f.clone()).collect() };
            grounding += &(serde_json::to_string(&g)? + "\n");
        }
        let path = dir.join(format!("{name}.jsonl"));
        fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("grounding.jsonl");
    fs::write(&path, grounding).map_err(|e| Error::io(&path, e))
}

/// Fraction of planted findings whose extracted keyword's plan column peaks
/// on the true cell. `plan` is cells × keywords over a `grid × grid` level;
/// `None` when no planted keyword was extracted.
pub fn grounding_accuracy(
    plan: &Tensor,
    findings: &[PlantedFinding],
    keywords: &[String],
    grid: usize,
) -> Result<Option<f64>> {
    if plan.rows() != grid * grid || plan.cols() != keywords.len() {
        return Err(Error::Dimension(format!(
            "plan {:?} for {} cells and {} keywords",
            plan.shape(),
            grid * grid,
            keywords.len()
        )));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for f in findings {
        let Some(j) = keywords.iter().position(|k| k == &f.keyword) else { continue };
        let mut best = 0;
        for i in 1..plan.rows() {
            if plan.get(i, j) > plan.get(best, j) {
                best = i;
            }
        }
        total += 1;
        if best == f.cell_row * grid + f.cell_col {
            hits += 1;
        }
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

/// Every planted keyword survives keyword extraction.
pub fn keywords_consistent(sample: &SynthSample, rules: &TextRules) -> Result<bool> {
    let pyr = crate::text::build_pyramid(&sample.report, rules)?;
    Ok(sample.findings.iter().all(|(_, f)| pyr.keywords.contains(&f.keyword)))
}
