use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowtts::data::{read_tensor_file, write_tensor_file};
use flowtts::numerics::Tensor;

fn flowtts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowtts"))
        .args(args)
        .output()
        .expect("spawn flowtts")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str =
    "[train]\nbatch_size = 4\nmax_updates = 4\ncheckpoint_every = 2\n[data]\nsynthetic_utts = 8\n";

fn train_small(dir: &Path, name: &str) -> PathBuf {
    let cfg = dir.join("small.ini");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.join(name);
    let o = flowtts(&[
        "train",
        "--config",
        p(&cfg),
        "--synthetic",
        "--out",
        p(&out),
        "--seed",
        "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn train_writes_checkpoints_and_a_row_per_update() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_small(dir.path(), "a");
    for f in [
        "ckpt_000002.ckpt",
        "ckpt_000004.ckpt",
        "last.ckpt",
        "corpus/manifest.jsonl",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "update,prior,duration,cfm,total");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0,") && lines[4].starts_with("3,"));

    let again = train_small(dir.path(), "b");
    assert_eq!(csv, fs::read_to_string(again.join("loss.csv")).unwrap());
}

#[test]
fn train_on_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let o = flowtts(&[
        "synth-corpus",
        "--out",
        p(&corpus),
        "--utts",
        "6",
        "--seed",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("run");
    let manifest = corpus.join("manifest.jsonl");
    let o = flowtts(&[
        "train",
        "--data",
        p(&manifest),
        "--out",
        p(&out),
        "--max-updates",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(out.join("loss.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.ini");
    fs::write(&cfg, "[model]\npreset = toy\ndecoder.widht = 3\n").unwrap();
    let o = flowtts(&[
        "train",
        "--config",
        p(&cfg),
        "--synthetic",
        "--out",
        p(&dir.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1);
    assert!(
        err.starts_with("error[unknown_config_key]:") && err.contains("model.decoder.widht"),
        "{err}"
    );
}

#[test]
fn synth_reports_nfe_and_writes_mtf() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path(), "run");
    let ckpt = run.join("last.ckpt");
    let frames = dir.path().join("out.mtf");
    let o = flowtts(&[
        "synth",
        "--ckpt",
        p(&ckpt),
        "--text",
        "hello there",
        "--steps",
        "4",
        "--out",
        p(&frames),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("nfe=4"), "{s}");
    let t = read_tensor_file(&frames).unwrap();
    assert_eq!(t.dim(0), 20);
    assert!(s.contains(&format!("frames={}", t.dim(1))));

    let o = flowtts(&[
        "synth",
        "--ckpt",
        p(&ckpt),
        "--text",
        "hi",
        "--steps",
        "0",
        "--out",
        p(&frames),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn align_dumps_and_continues_past_bad_items() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path(), "run");
    let ckpt = run.join("last.ckpt");
    let data = dir.path().join("data");
    fs::create_dir(&data).unwrap();
    write_tensor_file(data.join("one.mtf"), &Tensor::<f32>::zeros([20, 5])).unwrap();
    write_tensor_file(data.join("short.mtf"), &Tensor::<f32>::zeros([20, 2])).unwrap();
    let manifest = data.join("manifest.jsonl");
    fs::write(
        &manifest,
        "{\"id\":\"one\",\"text\":\"a\",\"frames\":\"one.mtf\"}\n\
         {\"id\":\"short\",\"text\":\"abc\",\"frames\":\"short.mtf\"}\n",
    )
    .unwrap();
    let out = dir.path().join("al");
    let o = flowtts(&[
        "align",
        "--ckpt",
        p(&ckpt),
        "--manifest",
        p(&manifest),
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("aligned=1 failed=1"));
    let dump = fs::read_to_string(out.join("one.align")).unwrap();
    assert_eq!(dump, "0 0\n1 0\n2 0\n3 0\n4 0\n");
    assert!(fs::read_to_string(out.join("errors.csv"))
        .unwrap()
        .contains("short,"));

    let corpus = run.join("corpus/manifest.jsonl");
    let a = dir.path().join("a1");
    let b = dir.path().join("a2");
    for d in [&a, &b] {
        let o = flowtts(&[
            "align",
            "--ckpt",
            p(&ckpt),
            "--manifest",
            p(&corpus),
            "--out",
            p(d),
        ]);
        assert!(o.status.success());
        assert!(stdout(&o).contains("duration_agreement="));
    }
    let csv = fs::read_to_string(a.join("durations.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(b.join("durations.csv")).unwrap());
    assert!(csv.starts_with("id,token_index,token,duration,true_duration\n"));
}

#[test]
fn bench_rows_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path(), "run");
    let ckpt = run.join("last.ckpt");
    let csv = dir.path().join("bench.csv");
    let o = flowtts(&[
        "bench",
        "--ckpt",
        p(&ckpt),
        "--lengths",
        "3,6",
        "--steps-list",
        "1,2,3",
        "--repeats",
        "2",
        "--out",
        p(&csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "id,tokens,frames,steps,wall_s,nfe,rtf_proxy");
    assert_eq!(lines.len(), 1 + 2 * 3 * 2);
    for row in &lines[1..] {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[3], f[5], "nfe must equal steps: {row}");
        assert!(f[4].parse::<f64>().unwrap() > 0.0);
    }
    assert!(stdout(&o).contains("steps=3: wall_s ="));

    for (lengths, steps) in [("", "2"), ("3", ""), ("3,0", "2")] {
        let o = flowtts(&[
            "bench",
            "--ckpt",
            p(&ckpt),
            "--out",
            p(&csv),
            "--lengths",
            lengths,
            "--steps-list",
            steps,
        ]);
        assert_eq!(o.status.code(), Some(2));
        assert!(stderr(&o).contains("invalid value"), "{}", stderr(&o));
    }
}

#[test]
fn verify_suites() {
    for suite in ["mas", "flow", "rope"] {
        let o = flowtts(&["verify", "--suite", suite]);
        assert!(o.status.success(), "{}", stdout(&o));
        assert!(!stdout(&o).contains("FAIL"));
    }
    let o = flowtts(&["verify", "--suite", "mas"]);
    assert!(stdout(&o).contains("dp optimum equals brute force (100/100)"));
    assert_eq!(
        flowtts(&["verify", "--suite", "nope"]).status.code(),
        Some(2)
    );
}

#[test]
fn missing_checkpoint_is_a_one_line_error() {
    let o = flowtts(&[
        "synth",
        "--ckpt",
        "/nonexistent/x.ckpt",
        "--text",
        "hi",
        "--out",
        "/tmp/never.mtf",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[io]:"), "{err}");
}
