use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn styo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_styo"))
        .args(args)
        .output()
        .expect("spawn styo")
}

fn ok(args: &[&str]) -> Output {
    let out = styo(args);
    assert!(
        out.status.success(),
        "styo {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn short_finetune(dir: &Path) {
    ok(&[
        "finetune",
        "--set",
        "train.iterations=6",
        "--set",
        "train.checkpoint_every=3",
        "--set",
        "data.aux=synthetic:2",
        "--out",
        p(dir),
    ]);
}

#[test]
fn help_lists_every_flag() {
    let top = String::from_utf8(ok(&["--help"]).stdout).unwrap();
    for cmd in ["make-aux", "make-fixture", "finetune", "stylize", "inspect-attn"] {
        assert!(top.contains(cmd), "missing {cmd}");
    }
    let stylize = String::from_utf8(ok(&["stylize", "--help"]).stdout).unwrap();
    for flag in [
        "--checkpoint",
        "--source",
        "--config",
        "--ns",
        "--nc",
        "--steps",
        "--scale",
        "--seed",
        "--eta",
        "--no-fcc",
        "--sweep",
        "--dump-attn",
        "--record-export",
        "--out",
    ] {
        assert!(stylize.contains(flag), "stylize help missing {flag}");
    }
    let finetune = String::from_utf8(ok(&["finetune", "--help"]).stdout).unwrap();
    for flag in ["--config", "--set", "--resume", "--out", "--i-have-a-gpu"] {
        assert!(finetune.contains(flag), "finetune help missing {flag}");
    }
}

#[test]
fn make_aux_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["make-aux", "--n", "3", "--seed", "7", "--size", "16", "--out", p(dir)]);
    }
    for name in ["aux_000.ppm", "aux_001.ppm", "aux_002.ppm", "manifest.txt"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.starts_with("aux_")).count(), 3);
}

#[test]
fn make_fixture_writes_pair() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["make-fixture", "--size", "32", "--out", p(tmp.path())]);
    let src = fs::read(tmp.path().join("source.ppm")).unwrap();
    assert!(src.starts_with(b"P6\n32 32\n255\n"));
    assert_ne!(src, fs::read(tmp.path().join("target.ppm")).unwrap());
}

#[test]
fn finetune_then_stylize_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    short_finetune(&run);
    for name in [
        "config.txt",
        "checkpoint.styo",
        "checkpoint_3.styo",
        "checkpoint_6.styo",
        "summary.txt",
    ] {
        assert!(run.join(name).is_file(), "missing {name}");
    }
    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.starts_with("iteration,loss_src,loss_tgt,loss_aux\n"));

    let ck = run.join("checkpoint.styo");
    let outs: Vec<_> = ["s1", "s2"].iter().map(|n| tmp.path().join(n)).collect();
    for out in &outs {
        ok(&[
            "stylize",
            "--checkpoint",
            p(&ck),
            "--steps",
            "5",
            "--seed",
            "3",
            "--out",
            p(out),
        ]);
    }
    for name in ["stylized.ppm", "reconstruction.ppm", "manifest.txt"] {
        assert_eq!(
            fs::read(outs[0].join(name)).unwrap(),
            fs::read(outs[1].join(name)).unwrap(),
            "{name}"
        );
    }
    let manifest = fs::read_to_string(outs[0].join("manifest.txt")).unwrap();
    assert!(manifest.contains("steps = 5\n"));
    assert!(manifest.contains("guidance_scale = 1\n"));

    let plain = tmp.path().join("plain");
    ok(&[
        "stylize",
        "--checkpoint",
        p(&ck),
        "--steps",
        "5",
        "--seed",
        "3",
        "--no-fcc",
        "--out",
        p(&plain),
    ]);
    assert_eq!(
        fs::read(plain.join("reconstruction.ppm")).unwrap(),
        fs::read(outs[0].join("reconstruction.ppm")).unwrap()
    );
    assert!(fs::read_to_string(plain.join("manifest.txt"))
        .unwrap()
        .contains("use_fcc = false"));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tmp.path().join("full");
    short_finetune(&full);
    let resumed = tmp.path().join("resumed");
    ok(&[
        "finetune",
        "--set",
        "train.iterations=6",
        "--set",
        "train.checkpoint_every=3",
        "--set",
        "data.aux=synthetic:2",
        "--resume",
        p(&full.join("checkpoint_3.styo")),
        "--out",
        p(&resumed),
    ]);
    assert_eq!(
        fs::read(full.join("checkpoint.styo")).unwrap(),
        fs::read(resumed.join("checkpoint.styo")).unwrap()
    );
}

#[test]
fn sweep_and_attention_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    short_finetune(&run);
    let ck = run.join("checkpoint.styo");
    let sweep = tmp.path().join("sweep");
    ok(&[
        "stylize",
        "--checkpoint",
        p(&ck),
        "--steps",
        "2",
        "--sweep",
        "ns=1..2,nc=1",
        "--out",
        p(&sweep),
    ]);
    for dir in ["ns1_nc1", "ns2_nc1"] {
        assert!(sweep.join(dir).join("stylized.ppm").is_file(), "{dir}");
    }

    let single = tmp.path().join("single");
    let record = tmp.path().join("record.styo");
    ok(&[
        "stylize",
        "--checkpoint",
        p(&ck),
        "--steps",
        "3",
        "--ns",
        "1",
        "--nc",
        "1",
        "--dump-attn",
        "--record-export",
        p(&record),
        "--out",
        p(&single),
    ]);
    // "a drawing with [ak47] [not aug] style of [sks] [not m4a1] portrait": 10 tokens,
    // three cross-attention layers, three steps.
    let expected = 3 * 3 * 10;
    assert_eq!(fs::read_dir(single.join("attn")).unwrap().count(), expected);
    let inspected = tmp.path().join("inspect");
    ok(&["inspect-attn", "--record", p(&record), "--out", p(&inspected)]);
    assert_eq!(fs::read_dir(&inspected).unwrap().count(), expected);
    assert_eq!(
        fs::read(inspected.join("step000_layer0_token00.pgm")).unwrap()[..3],
        *b"P5\n"
    );
}

#[test]
fn errors_are_machine_readable() {
    let tmp = tempfile::tempdir().unwrap();
    let out = styo(&["finetune", "--profile", "paper", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: config: "), "{err}");

    let out = styo(&["finetune", "--set", "train.bogus=1", "--out", p(tmp.path())]);
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error: config: "));

    let out = styo(&[
        "inspect-attn",
        "--record",
        p(&tmp.path().join("missing")),
        "--out",
        p(tmp.path()),
    ]);
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error: io: "));
}

#[test]
fn stylize_rejects_mismatched_identifiers() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    short_finetune(&run);
    let conf = tmp.path().join("other.conf");
    fs::write(&conf, "identifiers.content_tgt = zzq\n").unwrap();
    let out = styo(&[
        "stylize",
        "--checkpoint",
        p(&run.join("checkpoint.styo")),
        "--config",
        p(&conf),
        "--out",
        p(&tmp.path().join("x")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error: format: "));
}
