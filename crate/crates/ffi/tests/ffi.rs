use std::ffi::{CStr, CString};
use std::ptr;

use hialign::model::{Model, ModelConfig};
use hialign::pipeline::{corpus_vocab, prepare_synth};
use hialign::synth::{generate_corpus, SynthConfig};
use hialign::text::TextRules;
use hialign::training::{fit, save_checkpoint, Checkpoint, TrainConfig, TrainState};
use hialign_ffi::*;

fn last_error() -> String {
    let p = hialign_last_error_message();
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { hialign_string_free(p) };
    s
}

#[test]
fn exact_transport_of_swapped_pairs_is_zero() {
    let x = [0.0, 0.0, 1.0, 1.0];
    let y = [1.0, 1.0, 0.0, 0.0];
    let mut opts = hialign_ot_options_default();
    opts.exact = true;
    let (mut cost, mut plan) = (f64::NAN, [0.0; 4]);
    let st = unsafe { hialign_transport(x.as_ptr(), 2, y.as_ptr(), 2, 2, &opts, &mut cost, plan.as_mut_ptr()) };
    assert_eq!(st, HialignStatus::Ok);
    assert_eq!(cost, 0.0);
    assert_eq!(plan, [0.0, 0.5, 0.5, 0.0]);
}

#[test]
fn sinkhorn_plan_meets_marginals() {
    let x = [0.1, 0.7, 0.3, -0.2, 0.9, 0.4];
    let y = [0.5, 0.5, -0.1, 0.2];
    let opts = hialign_ot_options_default();
    let (mut cost, mut plan) = (0.0, [0.0; 6]);
    let st = unsafe { hialign_transport(x.as_ptr(), 3, y.as_ptr(), 2, 2, &opts, &mut cost, plan.as_mut_ptr()) };
    assert_eq!(st, HialignStatus::Ok);
    assert!(cost > 0.0);
    for r in 0..3 {
        assert!((plan[2 * r] + plan[2 * r + 1] - 1.0 / 3.0).abs() < 1e-6);
    }
    // without a plan buffer only the cost is written
    let mut again = 0.0;
    let st = unsafe { hialign_transport(x.as_ptr(), 3, y.as_ptr(), 2, 2, &opts, &mut again, ptr::null_mut()) };
    assert_eq!(st, HialignStatus::Ok);
    assert_eq!(again, cost);
}

#[test]
fn null_and_invalid_arguments_report_codes() {
    let opts = hialign_ot_options_default();
    let mut cost = 0.0;
    let st = unsafe { hialign_transport(ptr::null(), 1, [0.0].as_ptr(), 1, 1, &opts, &mut cost, ptr::null_mut()) };
    assert_eq!(st, HialignStatus::NullPointer);
    assert!(last_error().contains('x'));
    let st = unsafe { hialign_transport([0.0].as_ptr(), 0, [0.0].as_ptr(), 1, 1, &opts, &mut cost, ptr::null_mut()) };
    assert_eq!(st, HialignStatus::InvalidArgument);
    let mut bad = opts;
    bad.sigma = -1.0;
    let st = unsafe { hialign_transport([0.0].as_ptr(), 1, [1.0].as_ptr(), 1, 1, &bad, &mut cost, ptr::null_mut()) };
    assert_eq!(st, HialignStatus::InvalidArgument);
    assert!(last_error().contains("sigma"));
}

#[test]
fn self_evaluation_scores_one() {
    let reports = [CString::new("the trachea is midline. a small granuloma is noted.").unwrap(), CString::new("there is focal consolidation.").unwrap()];
    let ptrs: Vec<_> = reports.iter().map(|s| s.as_ptr()).collect();
    let mut m = HialignMetrics::default();
    let st = unsafe { hialign_evaluate(ptrs.as_ptr(), ptrs.as_ptr(), 2, &mut m) };
    assert_eq!(st, HialignStatus::Ok);
    assert_eq!((m.bleu1, m.bleu4, m.rouge_l), (1.0, 1.0, 1.0));
    let st = unsafe { hialign_evaluate(ptrs.as_ptr(), ptrs.as_ptr(), 0, ptr::null_mut()) };
    assert_eq!(st, HialignStatus::NullPointer);
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = CString::new("/nonexistent/checkpoint").unwrap();
    let mut h = ptr::null_mut();
    let st = unsafe { hialign_model_load(dir.as_ptr(), &mut h) };
    assert_eq!(st, HialignStatus::Io);
    assert!(h.is_null());
    assert!(last_error().contains("checkpoint.json"));
}

#[test]
fn loaded_model_generates_like_the_library() {
    let synth = SynthConfig { n_train: 12, n_val: 1, n_test: 2, ..Default::default() };
    let corpus = generate_corpus(&synth).unwrap();
    let rules = TextRules::default();
    let reports: Vec<&str> = corpus.train.iter().map(|s| s.report.as_str()).collect();
    let vocab = corpus_vocab(&reports);
    let cfg = ModelConfig { n_layers: 1, d_model: 16, feature_dim: 8, text_dim: 8, max_len: 20, ..Default::default() };
    let mut model = Model::new(cfg.clone(), vocab.len(), 3).unwrap();
    let data = prepare_synth(&corpus.train, &vocab, &rules, &cfg.grid).unwrap();
    let ex: Vec<_> = data.into_iter().map(|p| p.example).collect();
    let mut state = TrainState::new(&model);
    fit(&mut model, &ex, &TrainConfig { epochs: 2, ..Default::default() }, &mut state).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint { model, vocab, state };
    save_checkpoint(dir.path(), &ck).unwrap();

    let img = &corpus.test[0].image;
    let expected = {
        let patches = hialign::visual::extract_patches(img, &cfg.grid).unwrap();
        let ids = ck.model.generate(&ck.model.memory(&patches).unwrap(), hialign::model::Decoding::Beam(2), cfg.max_len).unwrap();
        hialign::text::detokenize(&ck.vocab.decode(&ids))
    };
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { hialign_model_load(path.as_ptr(), &mut h) }, HialignStatus::Ok);
    assert_eq!(unsafe { hialign_model_vocab_size(h) }, ck.vocab.len());
    let mut out = ptr::null_mut();
    let st = unsafe { hialign_model_generate(h, img.pixels.as_ptr(), img.height, img.width, 2, &mut out) };
    assert_eq!(st, HialignStatus::Ok);
    let got = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_owned();
    unsafe { hialign_string_free(out) };
    assert_eq!(got, expected);

    let st = unsafe { hialign_model_generate(h, img.pixels.as_ptr(), 30, 30, 0, &mut out) };
    assert_eq!(st, HialignStatus::Dimension);
    assert!(out.is_null());
    unsafe { hialign_model_free(h) };
}

#[test]
fn header_declares_the_exported_functions() {
    let header = include_str!("../include/hialign.h");
    for f in ["hialign_transport", "hialign_evaluate", "hialign_model_load", "hialign_model_generate", "hialign_model_free", "hialign_string_free", "hialign_last_error_message", "HIALIGN_STATUS_OK"] {
        assert!(header.contains(f), "{f}");
    }
    let v = unsafe { CStr::from_ptr(hialign_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
