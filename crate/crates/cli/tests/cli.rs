use std::path::Path;
use std::process::{Command, Output};

fn medmfg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medmfg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, out: &str) {
    let o = medmfg(dir, &["synth", "--classes", "10", "--dim", "32", "--per-class", "20", "--sigma", "0.5", "--seed", "7", "--out", out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn without_date(text: &str) -> String {
    text.lines().filter(|l| !l.starts_with("# date")).collect::<Vec<_>>().join("\n")
}

#[test]
fn synth_is_byte_identical_and_summarized() {
    let dir = tempfile::tempdir().unwrap();
    let o = medmfg(dir.path(), &["synth", "--classes", "10", "--dim", "64", "--per-class", "50", "--sigma", "0.3", "--seed", "7", "--out", "a.fseb"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("classes\t10") && out.contains("dim\t64") && out.contains("vectors\t500"), "{out}");
    medmfg(dir.path(), &["synth", "--classes", "10", "--dim", "64", "--per-class", "50", "--sigma", "0.3", "--seed", "7", "--out", "b.fseb"]);
    assert_eq!(std::fs::read(dir.path().join("a.fseb")).unwrap(), std::fs::read(dir.path().join("b.fseb")).unwrap());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&medmfg(dir.path(), &["synth", "--classes", "10"])), 2);
    assert_eq!(code(&medmfg(dir.path(), &["frobnicate"])), 2);
    synth(dir.path(), "d.fseb");
    let o = medmfg(dir.path(), &["train", "--data", "d.fseb", "--out", "m.ckpt", "--dims", "toy", "--set", "no_such_key=1"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn missing_files_exit_3_and_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = medmfg(dir.path(), &["train", "--data", "absent.fseb", "--out", "m.ckpt", "--dims", "toy"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("absent.fseb"), "{}", stderr(&o));
}

#[test]
fn corrupt_data_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "d.fseb");
    let path = dir.path().join("d.fseb");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, bytes).unwrap();
    let o = medmfg(dir.path(), &["train", "--data", "d.fseb", "--out", "m.ckpt", "--dims", "toy", "--episodes", "1"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}

#[test]
fn zero_episode_training_writes_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "d.fseb");
    let o = medmfg(dir.path(), &["train", "--data", "d.fseb", "--out", "m.ckpt", "--dims", "toy", "--episodes", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("# fingerprint:"));
    let ck = medmfg::training::load_checkpoint(dir.path().join("m.ckpt")).unwrap();
    let init = medmfg::model::ModelParams::init(medmfg::model::ModelDims::toy(), 0).unwrap();
    assert_eq!(ck.params, init);
}

#[test]
fn train_eval_compare_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "d.fseb");
    let o = medmfg(d, &["train", "--data", "d.fseb", "--out", "m.ckpt", "--log", "t.log", "--dims", "toy", "--episodes", "6", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = std::fs::read_to_string(d.join("t.log")).unwrap();
    assert!(log.contains("episode\ttotal\tcons\tkl\tcls"));
    assert_eq!(log.lines().filter(|l| !l.starts_with('#') && !l.starts_with("episode")).count(), 6);

    let o = medmfg(d, &["eval", "--data", "d.fseb", "--checkpoint", "m.ckpt", "--report", "r.txt", "--episodes", "8", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = medmfg(d, &["eval", "--data", "d.fseb", "--checkpoint", "m.ckpt", "--report", "b.txt", "--episodes", "8", "--seed", "1", "--generate", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = medmfg(d, &["compare", "--a", "r.txt", "--b", "r.txt"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("diff\t0.0000"), "{}", stdout(&o));
    assert_eq!(code(&medmfg(d, &["compare", "--a", "b.txt", "--b", "r.txt"])), 0);

    let o = medmfg(d, &["eval", "--data", "d.fseb", "--checkpoint", "m.ckpt", "--report", "s.txt", "--episodes", "8", "--seed", "2"]);
    assert_eq!(code(&o), 0);
    assert_eq!(code(&medmfg(d, &["compare", "--a", "r.txt", "--b", "s.txt"])), 6);
}

#[test]
fn repeated_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "d.fseb");
    for tag in ["a", "b"] {
        let ck = format!("{tag}.ckpt");
        let rep = format!("{tag}.txt");
        let o = medmfg(d, &["train", "--data", "d.fseb", "--out", &ck, "--dims", "toy", "--episodes", "5", "--seed", "9"]);
        assert_eq!(code(&o), 0);
        let o = medmfg(d, &["eval", "--data", "d.fseb", "--checkpoint", &ck, "--report", &rep, "--episodes", "6", "--seed", "4", "--threads", if tag == "a" { "1" } else { "3" }]);
        assert_eq!(code(&o), 0);
    }
    assert_eq!(std::fs::read(d.join("a.ckpt")).unwrap(), std::fs::read(d.join("b.ckpt")).unwrap());
    let ra = std::fs::read_to_string(d.join("a.txt")).unwrap();
    let rb = std::fs::read_to_string(d.join("b.txt")).unwrap();
    assert_eq!(without_date(&ra).replace("a.ckpt", "b.ckpt"), without_date(&rb));
}

#[test]
fn dims_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "d.fseb");
    medmfg(d, &["train", "--data", "d.fseb", "--out", "m.ckpt", "--dims", "toy", "--episodes", "0"]);
    let o = medmfg(d, &["eval", "--data", "d.fseb", "--checkpoint", "m.ckpt", "--report", "r.txt", "--episodes", "2", "--set", "dim=16"]);
    assert_ne!(code(&o), 0);
}

#[test]
fn gradcheck_passes_at_toy_dims() {
    let dir = tempfile::tempdir().unwrap();
    let o = medmfg(dir.path(), &["gradcheck", "--dims", "toy"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(!stdout(&o).contains("FAIL"));
    assert_eq!(code(&medmfg(dir.path(), &["gradcheck", "--dims", "default"])), 2);
}
