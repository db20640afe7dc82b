//! The `hialign` command line: parse, synth, train, generate, eval, align, ablate.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ablation::{run_sweep, Sweep};
use crate::cha::{AlignmentWeights, Distance, Solver};
use crate::error::{Error, Result};
use crate::eval::{evaluate, render_table};
use crate::model::{Decoding, Model, ModelConfig};
use crate::numerics::io::save_tensor;
use crate::ot::{OtMode, PlanSummary};
use crate::pipeline::{
    corpus_vocab, generate_reports, load_grounding, load_records, prepare_records, read_jsonl, write_jsonl,
};
use crate::synth::{generate_corpus, write_corpus, CorpusRecord, SynthConfig};
use crate::text::{build_pyramid, PyramidIds, TextRules, DEFAULT_LEXICON, DEFAULT_STOPWORDS};
use crate::training::{fit, load_checkpoint, save_checkpoint, Checkpoint, TrainConfig, TrainLog, TrainState};
use crate::visual::{extract_patches, load_features, Image};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    /// Word list files; the bundled lists when absent.
    pub lexicon: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub min_sentence_tokens: usize,
    pub max_keywords: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig { lexicon: None, stopwords: None, min_sentence_tokens: 3, max_keywords: 16 }
    }
}

impl TextConfig {
    pub fn rules(&self) -> Result<TextRules> {
        let read = |p: &Option<PathBuf>, fallback: &str| -> Result<String> {
            match p {
                Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e)),
                None => Ok(fallback.to_string()),
            }
        };
        let mut rules = TextRules::new(&read(&self.lexicon, DEFAULT_LEXICON)?, &read(&self.stopwords, DEFAULT_STOPWORDS)?)?;
        if self.min_sentence_tokens == 0 || self.max_keywords == 0 {
            return Err(Error::Config("min_sentence_tokens and max_keywords must be >= 1".into()));
        }
        rules.min_sentence_tokens = self.min_sentence_tokens;
        rules.max_keywords = self.max_keywords;
        Ok(rules)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding `train.jsonl`, `val.jsonl`, `test.jsonl` and `grounding.jsonl`.
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { corpus: "corpus".into(), out: "out".into(), checkpoint: None }
    }
}

/// Everything a command needs; written as `config.json` into each output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decoding: Decoding,
    pub text: TextConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if let Decoding::Beam(0) = self.decoding {
            return Err(Error::Config("beam width must be >= 1".into()));
        }
        Ok(())
    }

    fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase())).map_err(|e| e.to_string())
}

/// Flags shared by every subcommand; each overrides the matching config key.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for corpus generation, initialization and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_visual: Option<f64>,
    #[arg(long)]
    pub lr_model: Option<f64>,
    /// Paragraph loss weight.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Sentence loss weight.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Word loss weight.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Entropic regularization.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Marginal penalization.
    #[arg(long)]
    pub tau: Option<f64>,
    /// balanced | unbalanced
    #[arg(long, value_parser = parse_enum::<OtMode>)]
    pub ot_mode: Option<OtMode>,
    /// wasserstein | l1 | l2 | cosine | kl
    #[arg(long, value_parser = parse_enum::<Distance>)]
    pub distance: Option<Distance>,
    /// sinkhorn | exact
    #[arg(long, value_parser = parse_enum::<Solver>)]
    pub solver: Option<Solver>,
    #[arg(long)]
    pub unfreeze_text: bool,
    /// greedy | beam
    #[arg(long)]
    pub decoding: Option<String>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.synth.seed = s;
            c.train.seed = s;
        }
        let t = &mut c.train;
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.lr_visual, self.lr_visual);
        set(&mut t.lr_model, self.lr_model);
        set(&mut t.weights.alpha, self.alpha);
        set(&mut t.weights.gamma, self.gamma);
        set(&mut t.weights.beta, self.beta);
        set(&mut t.sinkhorn.sigma, self.sigma);
        set(&mut t.sinkhorn.tau, self.tau);
        set(&mut t.sinkhorn.mode, self.ot_mode);
        set(&mut t.distance, self.distance);
        set(&mut t.solver, self.solver);
        if self.unfreeze_text {
            c.model.unfreeze_text = true;
        }
        let width = self.beam_width.or(match c.decoding {
            Decoding::Beam(w) => Some(w),
            Decoding::Greedy => None,
        });
        match self.decoding.as_deref() {
            Some("greedy") => c.decoding = Decoding::Greedy,
            Some("beam") => c.decoding = Decoding::Beam(width.unwrap_or(3)),
            Some(other) => return Err(Error::Config(format!("unknown decoding {other}; use greedy or beam"))),
            None => {
                if let (Some(w), Decoding::Beam(_)) = (self.beam_width, c.decoding) {
                    c.decoding = Decoding::Beam(w);
                }
            }
        }
        set(&mut c.paths.corpus, self.corpus.clone());
        set(&mut c.paths.out, self.out.clone());
        if self.checkpoint.is_some() {
            c.paths.checkpoint = self.checkpoint.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

#[derive(Parser, Debug)]
#[command(name = "hialign", version, about = "Hierarchical report-image alignment and report generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Decompose the reports of a corpus file into paragraph, sentences and keywords.
    Parse {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Write a synthetic planted-correspondence corpus.
    Synth {
        #[command(flatten)]
        o: Overrides,
    },
    /// Train on the corpus train split and write a checkpoint.
    Train {
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Generate reports for a corpus split.
    Generate {
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        o: Overrides,
    },
    /// Score generated reports against references.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// Also print a text table.
        #[arg(long)]
        table: bool,
        #[command(flatten)]
        o: Overrides,
    },
    /// Dump the three transport plans of one sample.
    Align {
        #[arg(long, default_value = "test")]
        split: String,
        /// Sample id; the first sample when absent.
        #[arg(long)]
        id: Option<String>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Train every row of a sweep with shared seeds and tabulate.
    Ablate {
        /// modules | weights | distance
        #[arg(long, value_parser = parse_enum::<Sweep>)]
        sweep: Sweep,
        #[command(flatten)]
        o: Overrides,
    },
}

/// Run with explicit arguments and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Parse { input, o } => cmd_parse(&o.resolve()?, &input),
        Command::Synth { o } => cmd_synth(&o.resolve()?),
        Command::Train { resume, o } => cmd_train(&o.resolve()?, resume.as_deref()),
        Command::Generate { split, o } => cmd_generate(&o.resolve()?, &split),
        Command::Eval { generated, references, table, o } => cmd_eval(&o.resolve()?, &generated, &references, table),
        Command::Align { split, id, o } => cmd_align(&o.resolve()?, &split, id.as_deref()),
        Command::Ablate { sweep, o } => cmd_ablate(&o.resolve()?, sweep),
    }
}

#[derive(Serialize, Deserialize)]
struct ParsedRecord {
    id: String,
    paragraph_tokens: Vec<String>,
    sentences: Vec<Vec<String>>,
    keywords: Vec<String>,
}

pub fn cmd_parse(cfg: &RunConfig, input: &Path) -> Result<()> {
    let rules = cfg.text.rules()?;
    let mut out = Vec::new();
    for r in read_jsonl::<CorpusRecord>(input)? {
        let p = build_pyramid(&r.report, &rules).map_err(|e| Error::Format(format!("record {}: {e}", r.id)))?;
        out.push(ParsedRecord { id: r.id, paragraph_tokens: p.paragraph_tokens, sentences: p.sentences, keywords: p.keywords });
    }
    cfg.write_to(&cfg.paths.out)?;
    write_jsonl(cfg.paths.out.join("pyramids.jsonl"), &out)
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let corpus = generate_corpus(&cfg.synth)?;
    write_corpus(&corpus, &cfg.paths.corpus)?;
    cfg.write_to(&cfg.paths.corpus)
}

fn split_path(cfg: &RunConfig, split: &str) -> PathBuf {
    cfg.paths.corpus.join(format!("{split}.jsonl"))
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let rules = cfg.text.rules()?;
    let records = load_records(split_path(cfg, "train"))?;
    let grounding = load_grounding(&cfg.paths.corpus)?;
    let mut previous = TrainLog::default();
    let (mut model, vocab, mut state) = match resume {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            let log = dir.join("train_log.jsonl");
            if log.exists() {
                previous = TrainLog::from_jsonl(&fs::read_to_string(&log).map_err(|e| Error::io(&log, e))?)?;
            }
            (ck.model, ck.vocab, ck.state)
        }
        None => {
            let reports: Vec<&str> = records.iter().map(|(r, _)| r.report.as_str()).collect();
            let vocab = corpus_vocab(&reports);
            let model = Model::new(cfg.model.clone(), vocab.len(), cfg.train.seed)?;
            let state = TrainState::new(&model);
            (model, vocab, state)
        }
    };
    let data = prepare_records(&records, &grounding, &vocab, &rules, &model.cfg.grid)?;
    let examples: Vec<_> = data.into_iter().map(|p| p.example).collect();
    let (log, timings) = fit(&mut model, &examples, &cfg.train, &mut state)?;
    let out = &cfg.paths.out;
    let mut effective = cfg.clone();
    effective.model = model.cfg.clone();
    effective.write_to(out)?;
    save_checkpoint(out, &Checkpoint { model, vocab, state })?;
    previous.records.extend(log.records);
    let path = out.join("train_log.jsonl");
    fs::write(&path, previous.to_jsonl()).map_err(|e| Error::io(&path, e))?;
    write_jsonl(out.join("timing.jsonl"), &timings)
}

fn checkpoint_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.paths.checkpoint.as_deref().ok_or_else(|| Error::Config("--checkpoint is required".into()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generated {
    pub id: String,
    pub report: String,
}

pub fn cmd_generate(cfg: &RunConfig, split: &str) -> Result<()> {
    let ck = load_checkpoint(checkpoint_dir(cfg)?)?;
    let rules = cfg.text.rules()?;
    let records = load_records(split_path(cfg, split))?;
    let data = prepare_records(&records, &[], &ck.vocab, &rules, &ck.model.cfg.grid)?;
    let reports = generate_reports(&ck.model, &ck.vocab, &data, cfg.decoding)?;
    let out: Vec<Generated> = data.iter().zip(reports).map(|(p, report)| Generated { id: p.id.clone(), report }).collect();
    cfg.write_to(&cfg.paths.out)?;
    write_jsonl(cfg.paths.out.join("generated.jsonl"), &out)
}

/// Id and report of a reference line; other fields are ignored.
#[derive(Deserialize)]
struct Reference {
    id: String,
    report: String,
}

pub fn cmd_eval(cfg: &RunConfig, generated: &Path, references: &Path, table: bool) -> Result<()> {
    let rules = cfg.text.rules()?;
    let gens: Vec<Generated> = read_jsonl(generated)?;
    let refs: Vec<Reference> = read_jsonl(references)?;
    let mut cands = Vec::with_capacity(refs.len());
    for r in &refs {
        let g = gens
            .iter()
            .find(|g| g.id == r.id)
            .ok_or_else(|| Error::Config(format!("no generated report for id {}", r.id)))?;
        cands.push(g.report.as_str());
    }
    let ref_texts: Vec<&str> = refs.iter().map(|r| r.report.as_str()).collect();
    let report = evaluate(&cands, &ref_texts, &rules.lexicon)?;
    let out = &cfg.paths.out;
    cfg.write_to(out)?;
    let path = out.join("metrics.json");
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&path, e))?;
    if table {
        let label = generated.file_stem().map_or("generated".into(), |s| s.to_string_lossy().into_owned());
        let text = render_table("Report generation metrics", &[(label, Ok(report))]);
        print!("{text}");
        let path = out.join("metrics.txt");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct LevelDump {
    level: String,
    shape: Vec<usize>,
    loss: f64,
    plan: PlanSummary,
}

#[derive(Serialize, Deserialize)]
struct AlignDump {
    id: String,
    weights: AlignmentWeights,
    total: f64,
    levels: Vec<LevelDump>,
}

const LEVEL_LABELS: [&str; 3] = ["paragraph", "sentence", "word"];

pub fn cmd_align(cfg: &RunConfig, split: &str, id: Option<&str>) -> Result<()> {
    let ck = load_checkpoint(checkpoint_dir(cfg)?)?;
    let rules = cfg.text.rules()?;
    let path = split_path(cfg, split);
    let records: Vec<CorpusRecord> = read_jsonl(&path)?;
    let rec = match id {
        Some(id) => records.iter().find(|r| r.id == id).ok_or_else(|| Error::Config(format!("no sample {id} in {}", path.display())))?,
        None => records.first().ok_or_else(|| Error::Empty(format!("{} has no samples", path.display())))?,
    };
    let base = path.parent().unwrap_or(Path::new("."));
    let model = &ck.model;
    let pyr = match (&rec.features, &rec.image) {
        (Some(f), _) => load_features(base.join(f))?,
        (None, Some(img)) => {
            let image = Image::from_tensor(&crate::numerics::io::load_tensor(base.join(img))?)?;
            model.pyramid(&extract_patches(&image, &model.cfg.grid)?)?
        }
        (None, None) => return Err(Error::Config(format!("record {} has neither image nor features", rec.id))),
    };
    let text = PyramidIds::new(&build_pyramid(&rec.report, &rules)?, &ck.vocab);
    let opts = cfg.train.align_options();
    let all = AlignmentWeights { alpha: 1.0, gamma: 1.0, beta: 1.0 };
    let report = model.align_pyramid(&pyr, &text, &all, &opts)?;
    let weighted = model.align_pyramid(&pyr, &text, &cfg.train.weights, &opts)?;
    let out = &cfg.paths.out;
    cfg.write_to(out)?;
    let mut levels = Vec::new();
    for (l, label) in LEVEL_LABELS.iter().enumerate() {
        let Some(plan) = &report.plans[l] else { continue };
        save_tensor(out.join(format!("plan_{label}.rihf")), &plan.plan)?;
        levels.push(LevelDump {
            level: label.to_string(),
            shape: plan.plan.shape().to_vec(),
            loss: report.losses()[l],
            plan: plan.summary(&cfg.train.sinkhorn),
        });
    }
    let dump = AlignDump { id: rec.id.clone(), weights: cfg.train.weights, total: weighted.total, levels };
    let path = out.join("plans.json");
    fs::write(&path, serde_json::to_string_pretty(&dump)? + "\n").map_err(|e| Error::io(&path, e))
}

pub fn cmd_ablate(cfg: &RunConfig, sweep: Sweep) -> Result<()> {
    let rules = cfg.text.rules()?;
    let grounding = load_grounding(&cfg.paths.corpus)?;
    let train_records = load_records(split_path(cfg, "train"))?;
    let test_records = load_records(split_path(cfg, "test"))?;
    let reports: Vec<&str> = train_records.iter().map(|(r, _)| r.report.as_str()).collect();
    let vocab = corpus_vocab(&reports);
    let train = prepare_records(&train_records, &grounding, &vocab, &rules, &cfg.model.grid)?;
    let test = prepare_records(&test_records, &grounding, &vocab, &rules, &cfg.model.grid)?;
    let report = run_sweep(sweep, &train, &test, &vocab, &cfg.model, &cfg.train, cfg.decoding, &rules)?;
    let out = &cfg.paths.out;
    cfg.write_to(out)?;
    let json = out.join(format!("ablation_{}.json", sweep.name()));
    fs::write(&json, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&json, e))?;
    let text = report.table();
    print!("{text}");
    let txt = out.join(format!("ablation_{}.txt", sweep.name()));
    fs::write(&txt, text).map_err(|e| Error::io(&txt, e))
}
