use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tdam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdam"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str, counts: &str) {
    let o = tdam(&["synth", "--out", s(dir), "--seed", seed, "--counts", counts, "--dim", "8"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_writes_three_manifests_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), "7", "6,3,4");
    synth(b.path(), "7", "6,3,4");
    for (name, n) in [("train.csv", 6), ("val.csv", 3), ("eval.csv", 4)] {
        let text = fs::read_to_string(a.path().join(name)).unwrap();
        assert_eq!(text.lines().count(), n + 1, "{name}");
        assert_eq!(text, fs::read_to_string(b.path().join(name)).unwrap());
    }
    assert_eq!(
        fs::read(a.path().join("annotations.csv")).unwrap(),
        fs::read(b.path().join("annotations.csv")).unwrap()
    );
    assert_eq!(
        fs::read(a.path().join("emb/train_00000.tde")).unwrap(),
        fs::read(b.path().join("emb/train_00000.tde")).unwrap()
    );
}

#[test]
fn analyze_reports_every_utterance() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1", "4,2,2");
    let o = tdam(&["analyze", "--manifest", s(&dir.path().join("train.csv"))]);
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("id,label,mu,sigma,raw_diff_mean,skips"));
    assert_eq!(out.lines().filter(|l| l.starts_with("train_")).count(), 4);
    assert!(out.lines().any(|l| l.starts_with('#')));
}

#[test]
fn train_eval_score_heatmap_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "3", "8,4,4");
    let ckpt = d.join("m.tdm");
    let o = tdam(&[
        "train",
        "--manifest",
        s(&d.join("train.csv")),
        "--val-manifest",
        s(&d.join("val.csv")),
        "--ckpt",
        s(&ckpt),
        "--epochs",
        "1",
        "--tprime",
        "20",
        "--seed",
        "5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("m.cfg").exists());
    let log = fs::read_to_string(d.join("m.log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_loss,val_eer\n1,"));

    let eval = |out: &Path| {
        let o = tdam(&["eval", "--ckpt", s(&ckpt), "--manifest", s(&d.join("eval.csv")), "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    let report = eval(&d.join("s1.csv"));
    assert!(report.starts_with("EER=") && report.contains("% AUC="), "{report}");
    eval(&d.join("s2.csv"));
    assert_eq!(fs::read(d.join("s1.csv")).unwrap(), fs::read(d.join("s2.csv")).unwrap());

    let utt = d.join("emb/eval_00000.tde");
    let o = tdam(&["score", "--ckpt", s(&ckpt), "--input", s(&utt)]);
    assert!(o.status.success());
    let score: f64 = String::from_utf8(o.stdout).unwrap().trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&score));

    let pgm = d.join("h.pgm");
    let o = tdam(&["heatmap", "--ckpt", s(&ckpt), "--input", s(&utt), "--pgm", s(&pgm)]);
    assert!(o.status.success());
    let csv = String::from_utf8(o.stdout).unwrap();
    assert_eq!(csv.trim().split(',').count(), 20);
    let img = fs::read(&pgm).unwrap();
    assert!(img.starts_with(b"P5\n20 1\n255\n"));
    assert_eq!(img.len(), b"P5\n20 1\n255\n".len() + 20);

    // Flag beats the checkpoint config.
    let o = tdam(&["heatmap", "--ckpt", s(&ckpt), "--input", s(&utt), "--pgm", s(&pgm), "--tprime", "200"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read(&pgm).unwrap().starts_with(b"P5\n200 1\n255\n"));
}

#[test]
fn exit_codes() {
    assert_eq!(tdam(&["--help"]).status.code(), Some(0));
    // Missing required flag.
    assert_eq!(tdam(&["eval", "--ckpt", "m.tdm"]).status.code(), Some(1));
    // Unknown flag and unknown subcommand.
    assert_eq!(tdam(&["synth", "--out", "x", "--bogus"]).status.code(), Some(1));
    assert_eq!(tdam(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        tdam(&["train", "--manifest", "a", "--val-manifest", "b", "--ckpt", "c", "--ablation", "all"])
            .status
            .code(),
        Some(1)
    );

    let dir = tempfile::tempdir().unwrap();
    // Missing file: I/O error.
    let missing = dir.path().join("nope.csv");
    assert_eq!(tdam(&["analyze", "--manifest", s(&missing)]).status.code(), Some(2));

    // Single-class training set: contract error.
    synth(dir.path(), "2", "4,2,2");
    let train = fs::read_to_string(dir.path().join("train.csv")).unwrap();
    let spoof_only: String = train
        .lines()
        .enumerate()
        .filter(|(i, l)| *i == 0 || l.ends_with("spoof"))
        .map(|(_, l)| format!("{l}\n"))
        .collect();
    let one_class = dir.path().join("spoof_only.csv");
    fs::write(&one_class, spoof_only).unwrap();
    let o = tdam(&[
        "train",
        "--manifest",
        s(&one_class),
        "--val-manifest",
        s(&dir.path().join("val.csv")),
        "--ckpt",
        s(&dir.path().join("m.tdm")),
        "--tprime",
        "10",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}
