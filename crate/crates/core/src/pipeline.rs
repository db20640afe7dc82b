//! Corpus preparation, training runs and their evaluation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cha::{AlignOptions, AlignmentWeights, Distance};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport};
use crate::model::{Decoding, Example, Model, ModelConfig};
use crate::numerics::io::load_tensor;
use crate::synth::{grounding_accuracy, CorpusRecord, GroundingRecord, PlantedFinding, SynthSample};
use crate::text::{build_pyramid, build_vocab, detokenize, tokenize, PyramidIds, TextPyramid, TextRules, Vocabulary};
use crate::training::{fit, Checkpoint, EpochTiming, TrainConfig, TrainLog, TrainState};
use crate::visual::{extract_patches, GridSpec, Image};

/// A report ready for training and evaluation.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub report: String,
    pub pyramid: TextPyramid,
    pub example: Example,
    pub findings: Vec<PlantedFinding>,
}

/// Vocabulary over the tokens of the given reports.
pub fn corpus_vocab<S: AsRef<str>>(reports: &[S]) -> Vocabulary {
    let tokens: Vec<Vec<String>> = reports.iter().map(|r| tokenize(r.as_ref())).collect();
    build_vocab(&tokens, 1)
}

pub fn prepare(
    id: &str,
    report: &str,
    image: &Image,
    findings: Vec<PlantedFinding>,
    vocab: &Vocabulary,
    rules: &TextRules,
    grid: &GridSpec,
) -> Result<Prepared> {
    let pyramid = build_pyramid(report, rules)?;
    let target = vocab.encode(&tokenize(report));
    Ok(Prepared {
        id: id.to_string(),
        report: detokenize(&tokenize(report)),
        example: Example { patches: extract_patches(image, grid)?, text: PyramidIds::new(&pyramid, vocab), target },
        pyramid,
        findings,
    })
}

pub fn prepare_synth(samples: &[SynthSample], vocab: &Vocabulary, rules: &TextRules, grid: &GridSpec) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            let f = s.findings.iter().map(|(_, f)| f.clone()).collect();
            prepare(&s.id, &s.report, &s.image, f, vocab, rules, grid)
        })
        .collect()
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for it in items {
        out += &(serde_json::to_string(it)? + "\n");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Corpus records with their images; image paths resolve against the file's directory.
pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<(CorpusRecord, Image)>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    read_jsonl::<CorpusRecord>(path)?
        .into_iter()
        .map(|r| {
            let rel = r.image.as_ref().ok_or_else(|| {
                Error::Config(format!("record {} has no image; pixel training needs images", r.id))
            })?;
            let img = Image::from_tensor(&load_tensor(base.join(rel))?)?;
            Ok((r, img))
        })
        .collect()
}

/// Grounding map next to a corpus file, keyed by id; empty when absent.
pub fn load_grounding(dir: impl AsRef<Path>) -> Result<Vec<GroundingRecord>> {
    let path = dir.as_ref().join("grounding.jsonl");
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_jsonl(path)
}

pub fn prepare_records(
    records: &[(CorpusRecord, Image)],
    grounding: &[GroundingRecord],
    vocab: &Vocabulary,
    rules: &TextRules,
    grid: &GridSpec,
) -> Result<Vec<Prepared>> {
    records
        .iter()
        .map(|(r, img)| {
            let f = grounding.iter().find(|g| g.id == r.id).map(|g| g.findings.clone()).unwrap_or_default();
            prepare(&r.id, &r.report, img, f, vocab, rules, grid)
        })
        .collect()
}

pub fn generate_reports(model: &Model, vocab: &Vocabulary, data: &[Prepared], decoding: Decoding) -> Result<Vec<String>> {
    data.iter()
        .map(|p| {
            let memory = model.memory(&p.example.patches)?;
            let ids = model.generate(&memory, decoding, model.cfg.max_len)?;
            Ok(detokenize(&vocab.decode(&ids)))
        })
        .collect()
}

/// Mean word-level grounding accuracy over samples with at least one scorable finding.
/// Always read off the transport plan, whatever distance was trained with.
pub fn grounding(model: &Model, data: &[Prepared], opts: &AlignOptions) -> Result<Option<f64>> {
    let opts = &AlignOptions { distance: Distance::Wasserstein, ..*opts };
    let mut scores = Vec::new();
    let grid = model.cfg.grid.grids[0];
    for p in data {
        if p.findings.is_empty() {
            continue;
        }
        let report = model.alignment(&p.example.patches, &p.example.text, &AlignmentWeights::default(), opts)?;
        let plan = report.plans[2].as_ref().ok_or_else(|| Error::EmptyPyramid("no word-level plan".into()))?;
        if let Some(a) = grounding_accuracy(&plan.plan, &p.findings, &p.pyramid.keywords, grid)? {
            scores.push(a);
        }
    }
    Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub metrics: MetricReport,
    pub grounding: Option<f64>,
    pub final_loss: f64,
}

/// Outcome of one training run evaluated on a held-out split.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub timings: Vec<EpochTiming>,
    pub summary: RunSummary,
    pub generated: Vec<String>,
}

/// Train on `train`, then generate and score on `test`.
#[allow(clippy::too_many_arguments)]
pub fn run(
    train: &[Prepared],
    test: &[Prepared],
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    decoding: Decoding,
    rules: &TextRules,
) -> Result<RunOutcome> {
    let mut model = Model::new(model_cfg.clone(), vocab.len(), train_cfg.seed)?;
    let mut state = TrainState::new(&model);
    let examples: Vec<Example> = train.iter().map(|p| p.example.clone()).collect();
    let (log, timings) = fit(&mut model, &examples, train_cfg, &mut state)?;
    let generated = generate_reports(&model, vocab, test, decoding)?;
    let refs: Vec<&str> = test.iter().map(|p| p.report.as_str()).collect();
    let metrics = evaluate(&generated.iter().map(String::as_str).collect::<Vec<_>>(), &refs, &rules.lexicon)?;
    let grounding = grounding(&model, test, &train_cfg.align_options())?;
    let final_loss = log.records.last().map_or(f64::NAN, |r| r.total);
    Ok(RunOutcome {
        checkpoint: Checkpoint { model, vocab: vocab.clone(), state },
        log,
        timings,
        summary: RunSummary { metrics, grounding, final_loss },
        generated,
    })
}
