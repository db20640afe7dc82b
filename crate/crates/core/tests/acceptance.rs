//! Acceptance criteria 1–9, run sequentially. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails. Positional arguments restrict
//! the run to the listed criterion numbers.

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use hialign::ablation::{module_variant, AblationReport, Sweep};
use hialign::cha::{AlignOptions, AlignmentWeights, Solver};
use hialign::cli::{cmd_ablate, cmd_synth, cmd_train, RunConfig};
use hialign::eval::{bleu, cider_d, metric_tokens, rouge_l, DocFreq};
use hialign::model::attention::{attention_forward, AttnWeights};
use hialign::model::{relation_index, Decoding, Model, ModelConfig, RelPosTable};
use hialign::numerics::gradcheck::{gradcheck, registered_kernel_checks};
use hialign::numerics::rng::Rng;
use hialign::numerics::Tensor;
use hialign::ot::{cost_matrix, exact_ot, ot_grad_both, sinkhorn, Histogram, Metric, SinkhornConfig};
use hialign::pipeline::{corpus_vocab, generate_reports, prepare_synth, run, Prepared};
use hialign::synth::{generate_corpus, SynthConfig};
use hialign::text::{TextRules, Vocabulary, BOS};
use hialign::training::{fit, TrainConfig, TrainState};

/// Epochs for the full-versus-base comparison and the grounding runs.
const LONG_EPOCHS: usize = 80;
const SEEDS: [u64; 3] = [0, 1, 2];
/// Step of the five-point stencil used for the end-to-end check.
const MODEL_STEP: f64 = 1e-4;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn line(text: &str) {
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{text}");
}

fn points(rng: &mut Rng, n: usize, d: usize) -> Tensor {
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.uniform()).collect()).unwrap()
}

fn random_hist(rng: &mut Rng, n: usize) -> Histogram {
    Histogram::normalized((0..n).map(|_| 0.1 + rng.uniform()).collect()).unwrap()
}

fn c1_ot_oracle() -> Verdict {
    let mut rng = Rng::new(101);
    let cfg = SinkhornConfig { sigma: 0.01, max_iter: 20_000, tol: 1e-10, ..Default::default() };
    let started = Instant::now();
    let (mut worst_gap, mut worst_violation) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (n, m, d) = (1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(4));
        let c = cost_matrix(&points(&mut rng, n, d), &points(&mut rng, m, d), Metric::L2).unwrap();
        let (a, b) = (random_hist(&mut rng, n), random_hist(&mut rng, m));
        let exact = exact_ot(&a, &b, &c).unwrap();
        let approx = sinkhorn(&a, &b, &c, &cfg).unwrap();
        worst_gap = worst_gap.max((approx.cost - exact.cost).abs() / exact.cost.abs().max(1e-12));
        worst_violation = worst_violation.max(approx.marginal_violation);
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        worst_gap <= 0.02 && worst_violation < 1e-6 && secs < 5.0,
        format!("max relative gap {worst_gap:.5}, max marginal violation {worst_violation:.2e}, {secs:.2} s"),
    )
}

fn tiny_model_cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        ffn_mult: 2,
        clip_k: 3,
        max_len: 10,
        feature_dim: 6,
        text_dim: 5,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

fn small_corpus(n_train: usize, n_test: usize, seed: u64, grid: &hialign::visual::GridSpec) -> (Vec<Prepared>, Vec<Prepared>, Vocabulary) {
    let corpus = generate_corpus(&SynthConfig { n_train, n_val: 1, n_test, seed, ..Default::default() }).unwrap();
    let reports: Vec<&str> = corpus.train.iter().map(|s| s.report.as_str()).collect();
    let vocab = corpus_vocab(&reports);
    let rules = TextRules::default();
    let train = prepare_synth(&corpus.train, &vocab, &rules, grid).unwrap();
    let test = prepare_synth(&corpus.test, &vocab, &rules, grid).unwrap();
    (train, test, vocab)
}

/// Per-coordinate relative error `|a − fd| / max(|a|, |fd|, 1e-8)` against the
/// fourth-order central difference.
fn stencil_check(f: impl Fn(&Tensor) -> (f64, Tensor), point: &Tensor, h: f64) -> f64 {
    let analytic = f(point).1;
    let mut probe = point.clone();
    let mut at = |k: usize, dx: f64| {
        let x0 = probe.data()[k];
        probe.data_mut()[k] = x0 + dx;
        let v = f(&probe).0;
        probe.data_mut()[k] = x0;
        v
    };
    (0..point.len())
        .map(|k| {
            let fd = (8.0 * (at(k, h) - at(k, -h)) - (at(k, 2.0 * h) - at(k, -2.0 * h))) / (12.0 * h);
            let a = analytic.data()[k];
            (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8)
        })
        .fold(0.0, f64::max)
}

fn c2_gradients() -> Verdict {
    let started = Instant::now();
    let mut rng = Rng::new(7);
    let mut kernel_worst = 0.0f64;
    for check in registered_kernel_checks() {
        for _ in 0..10 {
            kernel_worst = kernel_worst.max((check.run)(&mut rng).unwrap());
        }
    }

    // End-to-end: every trainable parameter of a tiny model, full loss with the exact solver.
    let cfg = tiny_model_cfg();
    let (train, _, vocab) = small_corpus(3, 1, 5, &cfg.grid);
    let mut ex = train[0].example.clone();
    ex.target.truncate(cfg.max_len - 1);
    let model = Model::new(cfg, vocab.len(), 9).unwrap();
    let opts = AlignOptions { solver: Solver::Exact, unit_features: true, ..Default::default() };
    let w = AlignmentWeights::default();
    let (mut model_worst, mut worst_name) = (0.0f64, String::new());
    for id in model.params.ids().collect::<Vec<_>>() {
        if !model.params.param(id).trainable {
            continue;
        }
        let loss = |v: &Tensor| {
            let mut m = model.clone();
            *m.params.value_mut(id) = v.clone();
            let mut g = m.params.grads();
            let loss = m.sample_grads(&ex, &w, &opts, &mut g).unwrap();
            (loss.total(), g.get(id).clone())
        };
        let err = stencil_check(loss, model.params.value(id), MODEL_STEP);
        if err > model_worst {
            model_worst = err;
            worst_name = model.params.name(id).to_string();
        }
    }

    // Transport envelope gradient against frozen-plan differences, both sides, every metric.
    let mut ot_worst = 0.0f64;
    for metric in Metric::ALL {
        for _ in 0..5 {
            let (n, m, d) = (2 + rng.below(4), 2 + rng.below(4), 3);
            let x = Tensor::new(vec![n, d], rng.normal_vec(n * d, 1.0)).unwrap();
            let y = Tensor::new(vec![m, d], rng.normal_vec(m * d, 1.0)).unwrap();
            let c = cost_matrix(&x, &y, metric).unwrap();
            let plan = sinkhorn(&Histogram::uniform(n), &Histogram::uniform(m), &c, &SinkhornConfig::default()).unwrap().plan;
            let value = |x: &Tensor, y: &Tensor| cost_matrix(x, y, metric).unwrap().values.dot(&plan);
            let ex = gradcheck(|xv| Ok((value(xv, &y), ot_grad_both(xv, &y, &plan, metric)?.0)), &x, 1e-6).unwrap();
            let ey = gradcheck(|yv| Ok((value(&x, yv), ot_grad_both(&x, yv, &plan, metric)?.1)), &y, 1e-6).unwrap();
            ot_worst = ot_worst.max(ex).max(ey);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        kernel_worst < 1e-5 && model_worst < 1e-4 && ot_worst < 1e-4 && secs < 60.0,
        format!("kernels {kernel_worst:.2e}, model {model_worst:.2e} ({worst_name}), transport {ot_worst:.2e}, {secs:.1} s"),
    )
}

fn c3_rpe() -> Verdict {
    let mut rng = Rng::new(33);
    let (t, d, heads, clip) = (9, 8, 2, 3);
    let rand = |rng: &mut Rng, r: usize, c: usize| Tensor::new(vec![r, c], rng.normal_vec(r * c, 0.5)).unwrap();
    let w: Vec<Tensor> = (0..4).map(|_| rand(&mut rng, d, d)).collect();
    let weights = AttnWeights { wq: &w[0], wk: &w[1], wv: &w[2], wo: &w[3] };
    let (key, value) = (rand(&mut rng, 2 * clip + 1, d / heads), rand(&mut rng, 2 * clip + 1, d / heads));
    let table = RelPosTable { key: &key, value: &value, clip };

    let mut row_err = 0.0f64;
    for causal in [false, true] {
        let x = rand(&mut rng, t, d);
        let (_, cache) = attention_forward(&x, &x, &weights, heads, Some(&table), causal).unwrap();
        for a in &cache.alpha {
            for i in 0..t {
                row_err = row_err.max((a.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }

    // Beyond the clip distance every relation shares one bucket, so identical
    // content leaves equal weights across the whole clipped range.
    let mut clip_ok = (0..t).all(|i| {
        (0..t).all(|j| {
            let r = relation_index(i, j, clip);
            if j >= i + clip {
                r == 2 * clip
            } else if i >= j + clip {
                r == 0
            } else {
                r == j + clip - i
            }
        })
    });
    let row = rand(&mut rng, 1, d);
    let same = Tensor::from_rows(&vec![row.row(0).to_vec(); t]).unwrap();
    let (_, cache) = attention_forward(&same, &same, &weights, heads, Some(&table), false).unwrap();
    for a in &cache.alpha {
        for i in 0..t {
            for j in 0..t {
                let far = if j >= i + clip { Some(i + clip) } else if i >= j + clip { Some(i - clip) } else { None };
                if let Some(edge) = far {
                    clip_ok &= (a.get(i, j) - a.get(i, edge)).abs() < 1e-12;
                }
            }
        }
    }

    // Logits at a position do not change when later tokens are appended.
    let cfg = ModelConfig { n_layers: 2, d_model: 16, max_len: 20, ..tiny_model_cfg() };
    let model = Model::new(cfg, 30, 4).unwrap();
    let mut prefix_err = 0.0f64;
    for _ in 0..20 {
        let tokens = 4 + rng.below(15);
        let mut full: Vec<usize> = (0..tokens).map(|_| 4 + rng.below(26)).collect();
        full[0] = BOS;
        let memory = rand(&mut rng, 5, 16);
        let cut = 1 + rng.below(tokens);
        let long = model.decoder_forward(&memory, &full).unwrap();
        let short = model.decoder_forward(&memory, &full[..cut]).unwrap();
        for i in 0..cut {
            for (a, b) in long.row(i).iter().zip(short.row(i)) {
                prefix_err = prefix_err.max((a - b).abs());
            }
        }
    }
    verdict(
        row_err <= 1e-9 && clip_ok && prefix_err < 1e-12,
        format!("row-sum error {row_err:.1e}, clipping identity {clip_ok}, prefix drift {prefix_err:.1e}"),
    )
}

struct SeedRun {
    seed: u64,
    full_bleu4: f64,
    base_bleu4: f64,
    grounding: Option<f64>,
    secs: f64,
}

fn long_runs() -> Vec<SeedRun> {
    let model = ModelConfig::default();
    let rules = TextRules::default();
    SEEDS
        .iter()
        .map(|&seed| {
            let started = Instant::now();
            let (train, test, vocab) = {
                let corpus = generate_corpus(&SynthConfig { seed, ..Default::default() }).unwrap();
                let reports: Vec<&str> = corpus.train.iter().map(|s| s.report.as_str()).collect();
                let vocab = corpus_vocab(&reports);
                (
                    prepare_synth(&corpus.train, &vocab, &rules, &model.grid).unwrap(),
                    prepare_synth(&corpus.test, &vocab, &rules, &model.grid).unwrap(),
                    vocab,
                )
            };
            let tc = TrainConfig { epochs: LONG_EPOCHS, seed, ..Default::default() };
            let full = run(&train, &test, &vocab, &model, &tc, Decoding::default(), &rules).unwrap();
            let base_v = module_variant("Base", &model, &tc).unwrap();
            let base = run(&train, &test, &vocab, &base_v.model, &base_v.train, Decoding::default(), &rules).unwrap();
            let r = SeedRun {
                seed,
                full_bleu4: full.summary.metrics.bleu4,
                base_bleu4: base.summary.metrics.bleu4,
                grounding: full.summary.grounding,
                secs: started.elapsed().as_secs_f64(),
            };
            line(&format!(
                "  seed {}: full BLEU-4 {:.4}, base BLEU-4 {:.4}, grounding {:?}, {:.0} s",
                r.seed, r.full_bleu4, r.base_bleu4, r.grounding, r.secs
            ));
            r
        })
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn c4_ablation_direction(runs: &[SeedRun]) -> Verdict {
    let full = mean(runs.iter().map(|r| r.full_bleu4));
    let base = mean(runs.iter().map(|r| r.base_bleu4));
    let slowest = runs.iter().map(|r| r.secs).fold(0.0, f64::max);
    verdict(
        full >= base + 0.02 && slowest <= 15.0 * 60.0,
        format!("mean BLEU-4 full {full:.4} vs base {base:.4} ({LONG_EPOCHS} epochs), slowest seed {slowest:.0} s"),
    )
}

fn c5_grounding(runs: &[SeedRun]) -> Verdict {
    let scores: Vec<f64> = runs.iter().map(|r| r.grounding.unwrap_or(0.0)).collect();
    let m = mean(scores.iter().copied());
    verdict(m >= 0.8, format!("mean grounding {m:.4} (per seed {scores:.4?}, chance 1/64)"))
}

fn c6_metrics() -> Verdict {
    let toks = |s: &[&str]| s.iter().map(|t| metric_tokens(t)).collect::<Vec<_>>();
    let corpus = toks(&[
        "the heart size is normal. there is a small left pleural effusion.",
        "no focal consolidation is seen and the lungs are clear.",
        "mild cardiomegaly with a calcified granuloma in the right upper lobe.",
    ]);
    let self_bleu = (1..=4).map(|n| bleu(&corpus, &corpus, n).unwrap()).collect::<Vec<_>>();
    let self_rouge = rouge_l(&corpus, &corpus).unwrap();
    let equal = toks(&["a b c d", "e f g h", "a c e g"]);
    let cider = cider_d(&equal, &equal, &DocFreq::from_references(&equal).unwrap()).unwrap();
    // Every n-gram matches; only the brevity penalty exp(1 - 7/6) remains.
    let short = toks(&["the cat sat on the mat"]);
    let long = toks(&["the cat sat on the mat today"]);
    let bp = bleu(&short, &long, 4).unwrap();
    let bp_err = (bp - (1.0f64 - 7.0 / 6.0).exp()).abs();
    verdict(
        self_bleu.iter().all(|&b| b == 1.0) && self_rouge == 1.0 && (cider - 10.0).abs() <= 1e-9 && bp_err <= 1e-12,
        format!("self BLEU-1..4 {self_bleu:?}, self ROUGE-L {self_rouge}, self CIDEr-D {cider:.12}, brevity error {bp_err:.1e}"),
    )
}

fn small_run_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth = SynthConfig { n_train: 48, n_val: 2, n_test: 12, seed: 3, ..Default::default() };
    cfg.train.epochs = 3;
    cfg.train.seed = 3;
    cfg.paths.corpus = dir.join("corpus");
    cfg.paths.out = dir.join("out");
    cfg
}

fn c7_ablation_harness() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_run_config(tmp.path());
    cmd_synth(&cfg).unwrap();
    let mut notes = Vec::new();
    let mut pass = true;
    for (sweep, rows) in [(Sweep::Weights, 8), (Sweep::Distance, 5)] {
        cmd_ablate(&cfg, sweep).unwrap();
        let path = cfg.paths.out.join(format!("ablation_{}.json", sweep.name()));
        let report: AblationReport = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        let errors = report.rows.iter().filter(|r| r.error.is_some() || r.metrics.is_none()).count();
        pass &= report.rows.len() == rows && errors == 0 && report.seed == cfg.train.seed;
        notes.push(format!("{} rows {} errors {errors}", sweep.name(), report.rows.len()));
        if sweep == Sweep::Distance {
            match report.solver_check {
                Some(c) => {
                    pass &= c.relative_gap < 0.02;
                    notes.push(format!("exact {:.5} vs sinkhorn {:.5} gap {:.4}", c.exact, c.sinkhorn, c.relative_gap));
                }
                None => {
                    pass = false;
                    notes.push("no solver check".into());
                }
            }
        }
    }
    verdict(pass, notes.join(", "))
}

fn c8_removability() -> Verdict {
    let model_cfg = ModelConfig { n_layers: 1, d_model: 32, feature_dim: 16, text_dim: 16, ..Default::default() };
    let (train, test, vocab) = small_corpus(32, 8, 8, &model_cfg.grid);
    let mut model = Model::new(model_cfg, vocab.len(), 8).unwrap();
    let mut state = TrainState::new(&model);
    let ex: Vec<_> = train.iter().map(|p| p.example.clone()).collect();
    fit(&mut model, &ex, &TrainConfig { epochs: 3, ..Default::default() }, &mut state).unwrap();
    let reference = generate_reports(&model, &vocab, &test, Decoding::default()).unwrap();

    // Run the alignment path, then wreck the alignment-only parameters.
    let opts = TrainConfig::default().align_options();
    for p in &test {
        model.alignment(&p.example.patches, &p.example.text, &AlignmentWeights::default(), &opts).unwrap();
    }
    let mut rng = Rng::new(1);
    for name in ["bridge.proj", "text.embedding"] {
        let id = model.param_id(name).unwrap();
        let t = model.params.value_mut(id);
        let noise = rng.normal_vec(t.len(), 10.0);
        t.data_mut().copy_from_slice(&noise);
    }
    let after = generate_reports(&model, &vocab, &test, Decoding::default()).unwrap();
    let same = after == reference;
    verdict(same, format!("{} test reports identical: {same}", reference.len()))
}

fn c9_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_run_config(tmp.path());
    cmd_synth(&cfg).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    cfg.paths.out = a.clone();
    cmd_train(&cfg, None).unwrap();
    cfg.paths.out = b.clone();
    cmd_train(&cfg, None).unwrap();
    let files = ["checkpoint.json", "checkpoint.rihm", "optimizer.rihm", "train_log.jsonl"];
    let differing: Vec<&str> = files.iter().copied().filter(|f| fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap()).collect();
    verdict(differing.is_empty(), format!("{} files compared, differing {differing:?}", files.len()))
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        }
    }
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut failed = 0;
    let mut report = |n: usize, name: &str, v: Verdict| {
        line(&format!("criterion {n} {name}: {} ({})", if v.pass { "PASS" } else { "FAIL" }, v.detail));
        if !v.pass {
            failed += 1;
        }
    };
    if on(1) {
        report(1, "OT oracle equivalence", guarded(c1_ot_oracle));
    }
    if on(2) {
        report(2, "gradient suite", guarded(c2_gradients));
    }
    if on(3) {
        report(3, "RPE invariants", guarded(c3_rpe));
    }
    if on(4) || on(5) {
        match catch_unwind(long_runs) {
            Ok(runs) => {
                if on(4) {
                    report(4, "ablation direction", guarded(|| c4_ablation_direction(&runs)));
                }
                if on(5) {
                    report(5, "grounding", guarded(|| c5_grounding(&runs)));
                }
            }
            Err(_) => {
                for (n, name) in [(4, "ablation direction"), (5, "grounding")] {
                    if on(n) {
                        report(n, name, verdict(false, "training run panicked".into()));
                    }
                }
            }
        }
    }
    if on(6) {
        report(6, "metric oracles", guarded(c6_metrics));
    }
    if on(7) {
        report(7, "ablation harness fidelity", guarded(c7_ablation_harness));
    }
    if on(8) {
        report(8, "removability", guarded(c8_removability));
    }
    if on(9) {
        report(9, "determinism", guarded(c9_determinism));
    }
    line(&format!("acceptance: {failed} failing"));
    if failed > 0 {
        std::process::exit(1);
    }
}
