//! End-to-end runs of the `jpdvt` binary: exit codes, corpus geometry,
//! oracle evaluation and frame interpolation.

use std::path::Path;
use std::process::{Command, Output};

use jpdvt::puzzlekit::{load_corpus, Image, Split};

fn jpdvt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jpdvt"))
        .args(args)
        .env("JPDVT_DETERMINISTIC", "1")
        .output()
        .expect("jpdvt runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn succeeded(out: &Output) {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

const TINY: &str = r#""layers": 1, "hidden": 8, "mlp": 16, "heads": 2, "time_freq": 8, "batch_size": 4, "ckpt_every": 0"#;

fn write_config(path: &Path, extra: &str) {
    std::fs::write(path, format!("{{\n  \"version\": 1, {TINY}, {extra}\n}}\n")).unwrap();
}

fn spatial_corpus(dir: &Path) -> String {
    let out = dir.join("corpus");
    succeeded(&jpdvt(&["make-puzzles", "--mode", "spatial", "--grid", "2", "--no-gap", "--count", "10", "--out", &s(&out)]));
    s(&out.join("manifest.json"))
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&jpdvt(&["solve", "--bogus"])), 2);
    assert_eq!(code(&jpdvt(&[])), 2);
    let dir = tempfile::tempdir().unwrap();
    let corpus = spatial_corpus(dir.path());
    let out = s(&dir.path().join("e.csv"));
    assert_eq!(code(&jpdvt(&["eval", "--oracle", "--corpus", &corpus, "--mask-sweep", "3..1", "--out", &out])), 2);
}

#[test]
fn missing_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = spatial_corpus(dir.path());
    let out = jpdvt(&["eval", "--ckpt", &s(&dir.path().join("none.bin")), "--corpus", &corpus, "--out", &s(&dir.path().join("e.csv"))]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = spatial_corpus(dir.path());
    let cfg = dir.path().join("cfg.json");
    write_config(&cfg, r#""steps": 20, "lr": 1e38"#);
    let out = jpdvt(&["train", "--corpus", &corpus, "--config", &s(&cfg), "--out", &s(&dir.path().join("run"))]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn resuming_a_different_model_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = spatial_corpus(dir.path());
    let cfg = dir.path().join("cfg.json");
    write_config(&cfg, r#""steps": 2"#);
    let run = dir.path().join("run");
    succeeded(&jpdvt(&["train", "--corpus", &corpus, "--config", &s(&cfg), "--out", &s(&run)]));
    let wider = dir.path().join("wider.json");
    std::fs::write(&wider, std::fs::read_to_string(&cfg).unwrap().replace("\"hidden\": 8", "\"hidden\": 16")).unwrap();
    let out = jpdvt(&[
        "train", "--corpus", &corpus, "--config", &s(&wider), "--out", &s(&dir.path().join("again")),
        "--resume", &s(&run.join("ckpt_2.bin")),
    ]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"hidden\":16"));
}

#[test]
fn temporal_pieces_follow_frames_and_length() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    succeeded(&jpdvt(&[
        "make-puzzles", "--mode", "temporal", "--frames", "32", "--piece-len", "4", "--count", "5", "--out", &s(&out),
    ]));
    let corpus = load_corpus(&out).unwrap();
    let all: Vec<_> = [Split::Train, Split::Test].iter().flat_map(|&sp| corpus.puzzles(sp).unwrap()).collect();
    assert_eq!(all.len(), 5);
    for p in &all {
        assert_eq!(p.len(), 8);
        assert_eq!(p.piece_shape().frames, 4);
        assert_eq!(p.truth()[0], 0);
    }
}

#[test]
fn oracle_solves_everything() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = spatial_corpus(dir.path());
    let csv = dir.path().join("e.csv");
    succeeded(&jpdvt(&["eval", "--oracle", "--corpus", &corpus, "--split", "train", "--stride", "50", "--out", &s(&csv)]));
    let text = std::fs::read_to_string(&csv).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "0");
    assert_eq!(row[1].parse::<f64>().unwrap(), 1.0);
    assert_eq!(row[2].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn schema_is_json() {
    let out = jpdvt(&["schema"]);
    succeeded(&out);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v.is_object());
}

#[test]
fn superres_doubles_the_frame_rate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    succeeded(&jpdvt(&[
        "make-puzzles", "--mode", "temporal", "--frames", "8", "--piece-len", "1", "--mask-max", "0.25", "--count", "6",
        "--out", &s(&corpus),
    ]));
    let cfg = d.join("cfg.json");
    write_config(&cfg, r#""steps": 3, "masked": true"#);
    succeeded(&jpdvt(&["train", "--corpus", &s(&corpus), "--config", &s(&cfg), "--out", &s(&d.join("run"))]));

    let puzzle = load_corpus(&corpus).unwrap().puzzles(Split::Train).unwrap().remove(0);
    let frames = d.join("frames");
    std::fs::create_dir_all(&frames).unwrap();
    let inputs: Vec<Image> = puzzle.slot_pieces().iter().take(4).map(|p| p.to_image()).collect();
    for (i, f) in inputs.iter().enumerate() {
        f.write_pnm(&frames.join(format!("{i}.pgm"))).unwrap();
    }
    let out = d.join("out");
    succeeded(&jpdvt(&[
        "superres", "--ckpt", &s(&d.join("run/ckpt_3.bin")), "--frames", &s(&frames), "--stride", "100", "--out", &s(&out),
    ]));
    let produced = jpdvt::puzzlekit::read_frame_dir(&out).unwrap();
    assert_eq!(produced.len(), 2 * inputs.len() - 1);
    for (i, f) in inputs.iter().enumerate() {
        assert_eq!(&produced[2 * i], f);
    }
}
