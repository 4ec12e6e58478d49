use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
enc_layers = 2
enc_dim = 32
enc_heads = 4
enc_kv_heads = 2
enc_max_len = 64
groups = 2
dec_layers = 1
dec_dim = 16
dec_heads = 2
n_enc = 1
adaptor_heads = 2
max_target_len = 48
max_sents = 2
lm_steps = 20
lm_batch = 8
lm_micro_batch = 8
s1_steps = 20
s1_batch = 16
s1_micro_batch = 8
s1_lr = 0.005
s2_steps = 10
s2_batch = 8
s2_micro_batch = 8
s2_lr = 0.002
gen_max_len = 20
"#;

fn lamate(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lamate")).arg("--run-dir").arg(dir).args(args).output().expect("spawn lamate")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lamate(dir, args);
    assert!(
        out.status.success(),
        "{args:?} exited with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_pipeline_runs_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("tiny.toml"), TINY).unwrap();
    let cfg = dir.join("tiny.toml");
    let c = cfg.to_str().unwrap();
    ok(dir, &["--config", c, "gen-data", "--task", "lm", "--n", "200", "--seed", "1", "--out", "data/lm.txt"]);
    ok(
        dir,
        &["--config", c, "gen-data", "--task", "general", "--n", "300", "--seed", "2", "--out", "data/train.jsonl"],
    );
    ok(dir, &["--config", c, "gen-data", "--task", "mix", "--n", "300", "--seed", "3", "--out", "data/mix.jsonl"]);
    ok(dir, &["--config", c, "gen-data", "--task", "mix", "--n", "200", "--seed", "4", "--out", "data/test.jsonl"]);
    ok(dir, &["--config", c, "pretrain-lm"]);
    ok(dir, &["--config", c, "train", "--stage", "1"]);
    ok(dir, &["--config", c, "train", "--stage", "2"]);
    ok(dir, &["--config", c, "generate", "--input", "data/test.jsonl", "--beam", "2", "--out", "beam.txt"]);
    let table = ok(
        dir,
        &["--config", c, "eval", "--data", "data/test.jsonl", "--predictions", "beam.txt", "--out", "eval.json"],
    );
    assert!(table.contains("all"), "{table}");
    assert_eq!(std::fs::read_to_string(dir.join("beam.txt")).unwrap().lines().count(), 200);

    for f in [
        "lm/theta.ckpt",
        "stage1/phi.ckpt",
        "stage2/omega.ckpt",
        "stage1/losses.csv",
        "stage2/config.toml",
        "eval.json",
    ] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let losses = std::fs::read_to_string(dir.join("stage1/losses.csv")).unwrap();
    assert!(losses.starts_with("step,lr,loss,task"));

    // Same seed, same corpus and same samples.
    ok(dir, &["--config", c, "gen-data", "--task", "mix", "--n", "50", "--seed", "9", "--out", "a.jsonl"]);
    ok(dir, &["--config", c, "gen-data", "--task", "mix", "--n", "50", "--seed", "9", "--out", "b.jsonl"]);
    assert_eq!(std::fs::read(dir.join("a.jsonl")).unwrap(), std::fs::read(dir.join("b.jsonl")).unwrap());
    let sample = ["--config", c, "generate", "--input", "a.jsonl", "--sample", "--top-k", "5", "--seed", "3"];
    ok(dir, &[&sample[..], &["--out", "s1.txt"]].concat());
    ok(dir, &[&sample[..], &["--out", "s2.txt"]].concat());
    assert_eq!(std::fs::read(dir.join("s1.txt")).unwrap(), std::fs::read(dir.join("s2.txt")).unwrap());

    let snap = std::fs::read_to_string(dir.join("train.config.toml")).unwrap();
    assert!(snap.contains("s2_lr = 0.002"), "{snap}");
}

#[test]
fn kv_report_prints_published_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["kv-report"]);
    for v in ["524", "131", "819", "32", "98", "196"] {
        assert!(out.contains(v), "{v} missing from\n{out}");
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(lamate(dir, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(lamate(dir, &["--set", "bogus_key=1", "kv-report"]).status.code(), Some(1));
    assert_eq!(lamate(dir, &["gen-data", "--task", "poetry", "--n", "3", "--out", "x"]).status.code(), Some(1));

    std::fs::write(dir.join("bad.jsonl"), "{\"task\": \"general\"}\n").unwrap();
    std::fs::write(dir.join("p.txt"), "\n").unwrap();
    let out = lamate(dir, &["eval", "--data", "bad.jsonl", "--predictions", "p.txt"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("eval") && err.contains("bad.jsonl") && err.contains("line 1"), "{err}");

    // A diverged LM corpus run: an enormous learning rate overflows.
    ok(dir, &["gen-data", "--task", "lm", "--n", "20", "--out", "lm.txt"]);
    let out = lamate(
        dir,
        &[
            "--set",
            "enc_layers=2",
            "--set",
            "enc_dim=16",
            "--set",
            "enc_heads=2",
            "--set",
            "enc_kv_heads=2",
            "--set",
            "groups=1",
            "--set",
            "lm_steps=30",
            "--set",
            "lm_batch=4",
            "--set",
            "lm_micro_batch=4",
            "--set",
            "lm_lr=1e30",
            "--set",
            "warmup_ratio=0",
            "pretrain-lm",
            "--data",
            "lm.txt",
        ],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
