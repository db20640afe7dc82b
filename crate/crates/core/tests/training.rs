use std::fs;

use hialign::cha::{AlignmentWeights, Distance};
use hialign::error::Error;
use hialign::model::{Decoding, Model, ModelConfig};
use hialign::ot::OtMode;
use hialign::pipeline::{corpus_vocab, generate_reports, prepare_synth, Prepared};
use hialign::synth::{generate_corpus, SynthConfig};
use hialign::text::{TextRules, Vocabulary};
use hialign::training::{fit, load_checkpoint, save_checkpoint, Checkpoint, TrainConfig, TrainState};

fn small_model() -> ModelConfig {
    ModelConfig { n_layers: 1, d_model: 16, feature_dim: 8, text_dim: 8, max_len: 24, ..Default::default() }
}

fn data() -> (Vec<Prepared>, Vec<Prepared>, Vocabulary) {
    let corpus = generate_corpus(&SynthConfig { n_train: 24, n_val: 1, n_test: 5, seed: 4, ..Default::default() }).unwrap();
    let reports: Vec<&str> = corpus.train.iter().map(|s| s.report.as_str()).collect();
    let vocab = corpus_vocab(&reports);
    let rules = TextRules::default();
    let grid = small_model().grid;
    let train = prepare_synth(&corpus.train, &vocab, &rules, &grid).unwrap();
    let test = prepare_synth(&corpus.test, &vocab, &rules, &grid).unwrap();
    (train, test, vocab)
}

fn train(cfg: &ModelConfig, tc: &TrainConfig, vocab: &Vocabulary, data: &[Prepared]) -> (Model, TrainState, hialign::training::TrainLog) {
    let mut model = Model::new(cfg.clone(), vocab.len(), tc.seed).unwrap();
    let mut state = TrainState::new(&model);
    let ex: Vec<_> = data.iter().map(|p| p.example.clone()).collect();
    let (log, _) = fit(&mut model, &ex, tc, &mut state).unwrap();
    (model, state, log)
}

fn quick() -> TrainConfig {
    TrainConfig { epochs: 2, batch_size: 8, ..Default::default() }
}

#[test]
fn checkpoint_roundtrip_preserves_generation_and_resume() {
    let (tr, te, vocab) = data();
    let (model, state, _) = train(&small_model(), &quick(), &vocab, &tr);
    let before = generate_reports(&model, &vocab, &te, Decoding::Greedy).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint { model, vocab: vocab.clone(), state };
    save_checkpoint(dir.path(), &ck).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.model.params.named_values(), ck.model.params.named_values());
    assert_eq!(back.state, ck.state);
    assert_eq!(back.vocab, ck.vocab);
    assert_eq!(generate_reports(&back.model, &back.vocab, &te, Decoding::Greedy).unwrap(), before);

    // two epochs then one more equals three straight
    let ex: Vec<_> = tr.iter().map(|p| p.example.clone()).collect();
    let (mut resumed, mut rs) = (back.model, back.state);
    let (log, _) = fit(&mut resumed, &ex, &TrainConfig { epochs: 1, ..quick() }, &mut rs).unwrap();
    assert_eq!(log.records[0].epoch, 3);
    let (straight, _, _) = train(&small_model(), &TrainConfig { epochs: 3, ..quick() }, &vocab, &tr);
    assert_eq!(resumed.params.named_values(), straight.params.named_values());
}

#[test]
fn corrupted_checkpoint_is_a_format_error() {
    let (tr, _, vocab) = data();
    let (model, state, _) = train(&small_model(), &TrainConfig { epochs: 1, ..quick() }, &vocab, &tr);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &Checkpoint { model, vocab, state }).unwrap();
    let params = dir.path().join("checkpoint.rihm");
    let mut bytes = fs::read(&params).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&params, bytes).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format(_))));
}

#[test]
fn same_seed_trains_bit_identically() {
    let (tr, _, vocab) = data();
    let a = train(&small_model(), &quick(), &vocab, &tr);
    let b = train(&small_model(), &quick(), &vocab, &tr);
    assert_eq!(a.0.params.named_values(), b.0.params.named_values());
    assert_eq!(a.2.to_jsonl(), b.2.to_jsonl());
    let c = train(&small_model(), &TrainConfig { seed: 1, ..quick() }, &vocab, &tr);
    assert_ne!(a.0.params.named_values(), c.0.params.named_values());
}

#[test]
fn zero_weights_make_alignment_settings_irrelevant() {
    let (tr, _, vocab) = data();
    let zero = TrainConfig { weights: AlignmentWeights::ZERO, ..quick() };
    let (a, _, la) = train(&small_model(), &zero, &vocab, &tr);
    let mut other = zero.clone();
    other.distance = Distance::Cosine;
    other.sinkhorn.mode = OtMode::Balanced;
    other.sinkhorn.sigma = 0.3;
    other.unit_features = false;
    let (b, _, lb) = train(&small_model(), &other, &vocab, &tr);
    assert_eq!(a.params.named_values(), b.params.named_values());
    assert_eq!(la, lb);
    assert!(la.records.iter().all(|r| r.l_align == 0.0 && r.total == r.l_ce));
}

#[test]
fn frozen_text_table_never_moves() {
    let (tr, _, vocab) = data();
    let init = Model::new(small_model(), vocab.len(), 0).unwrap();
    let (trained, _, log) = train(&small_model(), &quick(), &vocab, &tr);
    assert_eq!(trained.text_table(), init.text_table());
    assert!(log.records.iter().all(|r| r.l_align > 0.0));
    let thawed = ModelConfig { unfreeze_text: true, ..small_model() };
    let (moved, _, _) = train(&thawed, &quick(), &vocab, &tr);
    assert_ne!(moved.text_table(), init.text_table());
}
