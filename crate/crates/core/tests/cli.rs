use std::fs;
use std::path::Path;
use std::process::Command;

use hialign::cli::{main_with_args, Generated, RunConfig};
use hialign::model::ModelConfig;
use hialign::synth::SynthConfig;
use hialign::training::TrainLog;

fn write_config(dir: &Path) -> String {
    let mut cfg = RunConfig::default();
    cfg.synth = SynthConfig { n_train: 16, n_val: 2, n_test: 3, ..Default::default() };
    cfg.model = ModelConfig { n_layers: 1, d_model: 16, feature_dim: 8, text_dim: 8, max_len: 24, ..Default::default() };
    cfg.train.epochs = 1;
    cfg.train.batch_size = 8;
    cfg.paths.corpus = dir.join("corpus");
    cfg.paths.out = dir.join("out");
    cfg.paths.checkpoint = Some(dir.join("out"));
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("hialign").chain(args.iter().copied()))
}

#[test]
fn full_command_cycle() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_config(d);
    let c = cfg.as_str();

    assert_eq!(run(&["synth", "--config", c]), 0);
    let train_jsonl = fs::read(d.join("corpus/train.jsonl")).unwrap();
    assert_eq!(run(&["synth", "--config", c]), 0);
    assert_eq!(fs::read(d.join("corpus/train.jsonl")).unwrap(), train_jsonl);
    assert!(d.join("corpus/config.json").exists());

    assert_eq!(run(&["train", "--config", c]), 0);
    for f in ["config.json", "checkpoint.json", "checkpoint.rihm", "optimizer.rihm", "train_log.jsonl", "timing.jsonl"] {
        assert!(d.join("out").join(f).exists(), "{f}");
    }
    let out = d.join("out");
    let o = out.to_str().unwrap();
    assert_eq!(run(&["train", "--config", c, "--resume", o]), 0);
    let log = TrainLog::from_jsonl(&fs::read_to_string(out.join("train_log.jsonl")).unwrap()).unwrap();
    assert_eq!(log.records.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2]);

    assert_eq!(run(&["generate", "--config", c, "--decoding", "beam", "--beam-width", "2"]), 0);
    let text = fs::read_to_string(out.join("generated.jsonl")).unwrap();
    let generated: Vec<Generated> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(generated.len(), 3);

    let refs = d.join("corpus/test.jsonl");
    let r = refs.to_str().unwrap();
    let eval_out = d.join("self");
    assert_eq!(run(&["eval", "--config", c, "--generated", r, "--references", r, "--out", eval_out.to_str().unwrap(), "--table"]), 0);
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval_out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["bleu4"], 1.0);
    assert!(eval_out.join("metrics.txt").exists());
    let g = out.join("generated.jsonl");
    assert_eq!(run(&["eval", "--config", c, "--generated", g.to_str().unwrap(), "--references", r]), 0);

    let align_out = d.join("align");
    assert_eq!(run(&["align", "--config", c, "--out", align_out.to_str().unwrap()]), 0);
    for f in ["plan_paragraph.rihf", "plan_sentence.rihf", "plan_word.rihf", "plans.json", "config.json"] {
        assert!(align_out.join(f).exists(), "{f}");
    }

    let parse_out = d.join("parsed");
    assert_eq!(run(&["parse", "--config", c, "--input", r, "--out", parse_out.to_str().unwrap()]), 0);
    assert_eq!(fs::read_to_string(parse_out.join("pyramids.jsonl")).unwrap().lines().count(), 3);

    let ab = d.join("ablate");
    assert_eq!(run(&["ablate", "--config", c, "--sweep", "modules", "--out", ab.to_str().unwrap()]), 0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ab.join("ablation_modules.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
    assert!(ab.join("ablation_modules.txt").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let c = cfg.as_str();
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&["synth", "--config", c, "--sigma=-1"]), 1);
    // no corpus yet
    assert_eq!(run(&["train", "--config", c]), 3);
    assert_eq!(run(&["synth", "--config", c]), 0);
    assert_eq!(run(&["train", "--config", c, "--lr-model", "1e200"]), 2);
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\"nonsense\": 1}").unwrap();
    assert_eq!(run(&["synth", "--config", bad.to_str().unwrap()]), 1);
}

#[test]
fn binary_reports_errors_on_stderr() {
    let out = Command::new(env!("CARGO_BIN_EXE_hialign"))
        .args(["generate", "--checkpoint", "/nonexistent/ck"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
