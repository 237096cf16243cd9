use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gummp::checkpoint::Checkpoint;
use gummp::data::{ingest, Limits};
use gummp::experiment::prepare_for_inference;
use gummp::{Ablation, ExperimentConfig, ModelConfig, TrainConfig};
use tempfile::TempDir;

fn gummp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gummp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = gummp(args);
    assert!(
        out.status.success(),
        "gummp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        Fixture { dir: TempDir::new().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn synth(&self, name: &str, examples: usize, seed: u64) -> PathBuf {
        let p = self.path(name);
        ok(&["synth", "--out", s(&p), "--examples", &examples.to_string(), "--seed", &seed.to_string()]);
        p
    }

    fn config(&self, lr: f64, batch: usize, epochs: usize) -> PathBuf {
        let cfg = ExperimentConfig {
            model: ModelConfig {
                max_passage_len: 12,
                ..ModelConfig::desk()
            },
            train: TrainConfig {
                learning_rate: lr,
                batch_size: batch,
                epochs,
                ..Default::default()
            },
        };
        let p = self.path("config.json");
        fs::write(&p, cfg.to_json()).unwrap();
        p
    }
}

#[test]
fn synth_is_deterministic_per_seed() {
    let f = Fixture::new();
    let a = fs::read(f.synth("a.jsonl", 10, 4)).unwrap();
    let b = fs::read(f.synth("b.jsonl", 10, 4)).unwrap();
    let c = fs::read(f.synth("c.jsonl", 10, 5)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 10);
}

#[test]
fn overrides_reach_the_checkpoint() {
    let f = Fixture::new();
    let data = f.synth("d.jsonl", 6, 1);
    let ck = f.path("m.ckpt");
    ok(&[
        "train", "--data", s(&data), "--checkpoint", s(&ck), "--epochs", "1",
        "--ablation", "no-um", "--pam-width", "30", "--seed", "9",
    ]);
    let meta = Checkpoint::load(&ck).unwrap().metadata;
    assert_eq!(meta.config.model.ablation, Ablation::NoUm);
    assert_eq!(meta.config.model.pam_width, 30);
    assert_eq!(meta.config.train.seed, 9);
    assert_eq!(meta.epoch, 1);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let f = Fixture::new();
    let data = f.synth("d.jsonl", 8, 2);
    let cfg = f.config(0.01, 4, 4);
    let straight = f.path("straight.ckpt");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&straight)]);

    let half = f.path("half.ckpt");
    let resumed = f.path("resumed.ckpt");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&half), "--epochs", "2"]);
    ok(&[
        "train", "--data", s(&data), "--checkpoint", s(&resumed), "--resume", s(&half), "--epochs", "4",
    ]);
    assert_eq!(fs::read(&straight).unwrap(), fs::read(&resumed).unwrap());
}

#[test]
fn overfit_then_eval_and_generate() {
    let f = Fixture::new();
    let data = f.synth("d.jsonl", 32, 3);
    let cfg = f.config(0.01, 4, 25);
    let ck = f.path("m.ckpt");
    let log = f.path("log.jsonl");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&ck), "--log", s(&log)]);
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 25);

    let out = ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--beam-size", "4", "--max-len", "10"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["bleu1"].as_f64().unwrap() >= 0.95, "{}", report["bleu1"]);
    assert_eq!(report["n_examples"], 32);

    let answers = f.path("answers.jsonl");
    let max_len = 6;
    ok(&[
        "generate", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&answers),
        "--beam-size", "1", "--max-len", &max_len.to_string(),
    ]);

    // beam 1 must agree with the library's greedy decoder
    let checkpoint = Checkpoint::load(&ck).unwrap();
    let model = checkpoint.to_model().unwrap();
    let examples = ingest(&data, &Limits::from(&model.config)).unwrap();
    let prepared = prepare_for_inference(&model, &examples, checkpoint.metadata.config.train.seed).unwrap();
    let lines: Vec<serde_json::Value> = fs::read_to_string(&answers)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), examples.len());
    for (line, p) in lines.iter().zip(&prepared) {
        let ids = model.greedy(p, max_len).unwrap();
        assert_eq!(line["answer"].as_str().unwrap(), model.detokenize(p, &ids).join(" "));
    }

    let mut trace_path = answers.into_os_string();
    trace_path.push(".trace.jsonl");
    for (line, answer) in fs::read_to_string(trace_path).unwrap().lines().zip(&lines) {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        let steps = row["steps"].as_array().unwrap();
        // every answer ends with EOS or stops at the length limit
        assert!(answer["finished"].as_bool().unwrap() || steps.len() == max_len);
        for step in steps {
            for gates in step["gates"].as_array().unwrap() {
                let sum: f64 = gates.as_array().unwrap().iter().map(|g| g.as_f64().unwrap()).sum();
                assert!((sum - 1.0).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    let bad = f.path("bad.jsonl");
    fs::write(&bad, "{\"id\":\"a\",\"question\":\"q\",\"passages\":[\"p\"]}\n").unwrap();
    let out = gummp(&["train", "--data", s(&bad), "--checkpoint", s(&f.path("x.ckpt"))]);
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("answer") && msg.contains("line 1"), "{msg}");

    assert_eq!(gummp(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(gummp(&["synth", "--out", s(&f.path("s")), "--cooccurrence", "9"]).status.code(), Some(1));

    let not_ck = f.synth("d.jsonl", 4, 1);
    assert_eq!(gummp(&["eval", "--checkpoint", s(&not_ck), "--data", s(&not_ck)]).status.code(), Some(1));

    let missing = f.path("missing.jsonl");
    assert_eq!(
        gummp(&["eval", "--checkpoint", s(&missing), "--data", s(&missing)]).status.code(),
        Some(2)
    );
}
