use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
name = "cli-tiny"
scenes = 90
active_sets = [0]
seeds = [1]
eval_limit = 8
retrieval_gallery = 8

[model]
embed_dim = 8
hidden_dim = 12

[ranker]
embed_dim = 8

[train]
max_epochs = 1
refs_per_scene = 1

[decode]
beam = 3
top_k = 2
"#;

fn capplan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capplan"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn stepwise_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    let c = ["--config", "tiny.toml"];
    ok(&capplan(d, &[&["gen-data"][..], &c, &["--out", "data/corpus.jsonl"]].concat()));
    let out = ok(&capplan(
        d,
        &[&["build-splits"][..], &c, &["--corpus", "data/corpus.jsonl", "--heldout", "1", "--out-dir", "data"]].concat(),
    ));
    assert!(out.contains("vocabulary"), "{out}");
    assert!(d.join("data/set1.vocab.tsv").exists());
    let data = ["--corpus", "data/corpus.jsonl", "--split", "data/set1.jsonl"];
    ok(&capplan(
        d,
        &[&["train"][..], &c, &data, &["--approach", "interleave", "--tagset", "pos", "--out", "m/model.ckpt"]].concat(),
    ));
    ok(&capplan(
        d,
        &[&["decode"][..], &c, &data, &["--model", "m/model.ckpt", "--limit", "5", "--out", "m/decode.jsonl"]].concat(),
    ));
    let lines = std::fs::read_to_string(d.join("m/decode.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 10);
    let out = ok(&capplan(
        d,
        &[
            &["evaluate"][..],
            &c,
            &data,
            &["--model", "m/model.ckpt", "--decode", "m/decode.jsonl", "--out", "m/metrics.json"],
        ]
        .concat(),
    ));
    assert!(out.contains("BLEU"), "{out}");
    assert!(d.join("m/metrics.json").exists());
}

#[test]
fn experiment_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(&capplan(d, &["experiment", "--config", "tiny.toml", "--output-dir", "run"]));
    let out = ok(&capplan(d, &["report", "--run", "run", "--out", "rep"]));
    assert!(out.contains("paired gain"), "{out}");
    for f in ["report.txt", "curve.csv", "summary.json"] {
        assert!(d.join("rep").join(f).exists());
    }

    // a different config cannot be aggregated with the first run
    ok(&capplan(
        d,
        &["experiment", "--config", "tiny.toml", "--param", "seeds=[2]", "--output-dir", "run2"],
    ));
    let o = capplan(d, &["report", "--run", "run", "--run", "run2", "--out", "rep2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage `report`"));
}

#[test]
fn failures_name_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = capplan(d, &["gen-data", "--param", "scenes=0", "--out", "c.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage `config`"));

    let o = capplan(d, &["build-splits", "--corpus", "missing.jsonl", "--out-dir", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage `splits`"));
}
