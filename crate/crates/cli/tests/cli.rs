use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hwlm::network::load_checkpoint_any;
use hwlm::cells::CellKind;

fn hwlm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hwlm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

/// Parses `key=value` pairs from a one-line report.
fn field(line: &str, key: &str) -> String {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {line:?}"))
        .to_string()
}

fn corpus(dir: &Path) -> PathBuf {
    let subjects = ["the cat", "a dog", "the bird", "my friend"];
    let verbs = ["sees", "likes", "finds", "follows"];
    let objects = ["the ball", "a tree", "the house", "some food"];
    let mut lines = Vec::new();
    for i in 0..120 {
        lines.push(format!("{} {} {}", subjects[i % 4], verbs[(i / 4) % 4], objects[(i * 7) % 4]));
    }
    let p = dir.join("corpus.txt");
    fs::write(&p, lines.join("\n") + "\n").unwrap();
    p
}

const TRAIN: &[&str] = &[
    "--deterministic",
    "--precision",
    "f64",
    "train",
    "--corpus",
    "corpus.txt",
    "--vocab",
    "vocab.txt",
    "--heldout-lines",
    "20",
    "--embedding-dim",
    "6",
    "--hidden-dim",
    "8",
    "--layers",
    "2",
    "--epochs",
    "2",
    "--batch-size",
    "4",
    "--bptt",
    "6",
    "--dropout",
    "0.1",
    "--lr",
    "0.01",
];

fn prepare(dir: &Path) {
    corpus(dir);
    let out = ok(hwlm(dir, &["vocab", "--corpus", "corpus.txt", "--max-size", "50", "--heldout-lines", "20", "--out", "vocab.txt"]));
    assert!(out.starts_with("tokens="));
    let mut args = TRAIN.to_vec();
    args.extend(["--out", "lstm.ckpt", "--log", "train.log"]);
    ok(hwlm(dir, &args));
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    prepare(d);

    let log = fs::read_to_string(d.join("train.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert!(lines[0].starts_with("# manifest {"));
    let data: Vec<&str> = lines.iter().copied().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data.len(), 3);
    assert!(data.iter().all(|l| l.split('\t').count() == 4));

    fs::write(d.join("held.txt"), "the cat sees the ball\na dog likes a tree\nthe zebra sees\n").unwrap();
    let ppl = ok(hwlm(d, &["ppl", "--model", "lstm.ckpt", "--text", "held.txt", "--dump-probs", "lstm.probs", "--label", "lstm"]));
    assert_eq!(ppl.lines().count(), 1);
    assert!(ppl.starts_with("ppl="));
    assert_eq!(field(&ppl, "tokens"), "16");
    let lstm_ppl: f64 = field(&ppl, "ppl").parse().unwrap();

    let conv = ok(hwlm(d, &["convert", "--in", "lstm.ckpt", "--variant", "H", "--depth", "2", "--bias", "-3", "--out", "hw.ckpt"]));
    assert!(conv.contains("variant=hw-lstm-h depth=2"));
    let ck = load_checkpoint_any(&d.join("hw.ckpt"), None).unwrap();
    assert_eq!(ck.model.arch().cell_kind, CellKind::HwH);
    assert_eq!(ck.model.arch().depth, 2);

    let mut ft = vec!["--deterministic", "finetune", "--in", "hw.ckpt", "--corpus", "corpus.txt", "--heldout-lines", "20", "--out", "hw-ft.ckpt"];
    ft.extend(["--epochs", "1", "--batch-size", "4", "--bptt", "6", "--lr", "0.01", "--log", "ft.log", "--batching", "sentences"]);
    ok(hwlm(d, &ft));
    let ppl2 = ok(hwlm(d, &["ppl", "--model", "hw-ft.ckpt", "--text", "held.txt", "--dump-probs", "hw.probs", "--label", "hw"]));
    let hw_ppl: f64 = field(&ppl2, "ppl").parse().unwrap();

    let w = ok(hwlm(d, &["weights", "--stream", "lstm.probs", "--stream", "hw.probs", "--out", "w.txt"]));
    let mixed: f64 = field(&w, "ppl").parse().unwrap();
    assert!(mixed <= lstm_ppl.min(hw_ppl) + 1e-6);
    let weights = fs::read_to_string(d.join("w.txt")).unwrap();
    let interp = ok(hwlm(d, &["interp", "--stream", "lstm.probs", "--stream", "hw.probs", "--weights", weights.trim()]));
    assert_eq!(field(&interp, "ppl"), field(&w, "ppl"));
    let corner = ok(hwlm(d, &["interp", "--stream", "lstm.probs", "--stream", "hw.probs", "--weights", "1,0"]));
    assert_eq!(field(&corner, "ppl").parse::<f64>().unwrap(), lstm_ppl);

    fs::write(
        d.join("nbest.txt"),
        "u1\t1\t-10\t0\tthe cat sees\nu1\t2\t-10.5\t0\tthe cat sees the ball\n\
         u2\t1\t-3\t0\ta dog\nu2\t2\t-3.1\t0\ta dog likes a tree\nu2\t3\t-9\t0\t\n",
    )
    .unwrap();
    fs::write(d.join("ref.txt"), "u1\tthe cat sees the ball\nu2\ta dog likes a tree\n").unwrap();
    let r = ok(hwlm(d, &["rescore", "--nbest", "nbest.txt", "--model", "lstm.ckpt", "--model", "hw-ft.ckpt", "--lm-weight", "0", "--out", "base.txt"]));
    assert_eq!(field(&r, "utterances"), "2");
    ok(hwlm(
        d,
        &["rescore", "--nbest", "nbest.txt", "--model", "lstm.ckpt", "--dev-nbest", "nbest.txt", "--dev-ref", "ref.txt", "--out", "tuned.txt", "--scores", "scores.tsv"],
    ));
    assert_eq!(fs::read_to_string(d.join("scores.tsv")).unwrap().lines().count(), 6);
    let base = ok(hwlm(d, &["wer", "--hyp", "base.txt", "--ref", "ref.txt"]));
    assert_eq!(field(&base, "del"), "5");
    assert_eq!(field(&base, "ref_words"), "10");
    let tuned = ok(hwlm(d, &["wer", "--hyp", "tuned.txt", "--ref", "ref.txt"]));
    assert!(field(&tuned, "wer").parse::<f64>().unwrap() <= 0.5);
    let same = ok(hwlm(d, &["mpt", "--a", "base.txt", "--b", "base.txt", "--ref", "ref.txt"]));
    assert_eq!(field(&same, "p"), "1");
}

#[test]
fn deterministic_training_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    prepare(d);
    let mut args = TRAIN.to_vec();
    args.extend(["--out", "again.ckpt", "--log", "again.log"]);
    ok(hwlm(d, &args));
    assert_eq!(fs::read(d.join("lstm.ckpt")).unwrap(), fs::read(d.join("again.ckpt")).unwrap());
    let strip = |s: String| s.lines().skip(1).collect::<Vec<_>>().join("\n");
    assert_eq!(
        strip(fs::read_to_string(d.join("train.log")).unwrap()),
        strip(fs::read_to_string(d.join("again.log")).unwrap())
    );
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(hwlm(tmp.path(), &["gradcheck", "--cell", "hw-lstm-ch", "--depth", "3"]));
    let e: f64 = field(&out, "max_rel_error").parse().unwrap();
    assert!(e < 1e-5);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = hwlm(d, &["ppl", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(hwlm(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(hwlm(d, &["--help"]).status.code(), Some(0));
    assert_eq!(hwlm(d, &["wer", "--hyp", "missing.txt", "--ref", "missing.txt"]).status.code(), Some(2));
    fs::write(d.join("bad.ckpt"), b"NOPE").unwrap();
    fs::write(d.join("t.txt"), "a b\n").unwrap();
    assert_eq!(hwlm(d, &["ppl", "--model", "bad.ckpt", "--text", "t.txt"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_code_three() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    prepare(d);
    let args = [
        "--precision", "f32", "train", "--corpus", "corpus.txt", "--vocab", "vocab.txt", "--heldout-lines", "20", "--embedding-dim", "4",
        "--hidden-dim", "4", "--layers", "2", "--epochs", "3", "--lr", "1e36", "--clip-norm", "1e30", "--batch-size", "4", "--bptt", "5",
        "--out", "boom.ckpt",
    ];
    let o = hwlm(d, &args);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(load_checkpoint_any(&d.join("boom.ckpt"), None).is_ok());
}

#[test]
fn writes_only_named_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    prepare(d);
    let before: Vec<_> = fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
    ok(hwlm(d, &["convert", "--in", "lstm.ckpt", "--variant", "C", "--out", "c.ckpt"]));
    let mut after: Vec<_> = fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
    after.retain(|n| !before.contains(n));
    assert_eq!(after, ["c.ckpt"]);
}
