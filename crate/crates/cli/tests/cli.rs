use std::path::Path;
use std::process::{Command, Output};

fn cs2net(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cs2net")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn synth_writes_pairs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = cs2net(&["synth", "--dims", "2", "--count", "4", "--size", "64", "--seed", "7", "--out", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(out.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 4);
    for i in 0..4 {
        assert!(out.join(format!("sample{i:03}_input.pgm")).exists());
        assert!(out.join(format!("sample{i:03}_mask.pgm")).exists());
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(cs2net(&["synth", "--dims", "4", "--out", "x"]).status.code(), Some(2));
    assert_eq!(cs2net(&["synth", "--noise-var", "-1", "--out", "x"]).status.code(), Some(2));
    assert_eq!(cs2net(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn unknown_config_key_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[synth]\ndims = 2\n\n[train]\nlearning_rate = 1\n").unwrap();
    let o = cs2net(&["train", path(&cfg), "--out", path(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 5") && stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.cfg");
    std::fs::write(
        &cfg,
        "[synth]\ncount = 2\nsize = 16\n[model]\nbase_width = 2\n[train]\nbase_lr = 1e30\niterations = 20\n\
         schedule = iteration\n[augment]\npreset = identity\n",
    )
    .unwrap();
    let o = cs2net(&["train", path(&cfg), "--out", path(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn train_infer_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("c.cfg");
    std::fs::write(
        &cfg,
        "[data]\nmanifest = data/manifest.tsv\n[model]\nbase_width = 2\n[train]\niterations = 2\nbatch_size = 2\n\
         schedule = iteration\n[augment]\npreset = identity\n",
    )
    .unwrap();
    assert!(cs2net(&["synth", "--count", "2", "--size", "64", "--out", path(&d.join("data"))]).status.success());
    let o = cs2net(&["train", path(&cfg), "--out", path(&d.join("run")), "--ablation", "full"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let progress = String::from_utf8_lossy(&o.stdout);
    assert!(progress.lines().next().unwrap().starts_with("iter=0 lr=1e-4 loss="), "{progress}");
    assert!(d.join("run/metrics.csv").exists() && d.join("run/runlog.csv").exists());

    let o = cs2net(&[
        "infer",
        "--ckpt",
        path(&d.join("run/final.ckpt")),
        "--in",
        path(&d.join("data")),
        "--out",
        path(&d.join("pred")),
        "--dump-attention",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let heatmaps = std::fs::read_dir(d.join("pred"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().contains("_attn"))
        .count();
    assert!(heatmaps >= 1);

    let o = cs2net(&["eval", "--pred", path(&d.join("pred")), "--gt", path(&d.join("data")), "--mode", "centerline", "--out", path(&d.join("ev"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.csv", "roc.csv", "roc.png"] {
        assert!(d.join("ev").join(f).exists(), "{f}");
    }
    let header = std::fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    assert!(header.lines().any(|l| l.starts_with("name,") && l.contains("cl_se")));
}

#[test]
fn eval_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(cs2net(&["synth", "--count", "2", "--size", "32", "--out", path(&data)]).status.success());
    let o = cs2net(&["eval", "--pred", path(&data), "--gt", path(&data), "--out", path(&dir.path().join("ev"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("ev/metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| l.starts_with("sample")).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let cols: Vec<&str> = r.split(',').collect();
        assert_eq!(&cols[5..8], &["1", "1", "1"], "{r}");
    }
}

#[test]
fn eval_lists_unmatched_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(cs2net(&["synth", "--count", "2", "--size", "16", "--out", path(&a)]).status.success());
    assert!(cs2net(&["synth", "--count", "3", "--size", "16", "--out", path(&b)]).status.success());
    let o = cs2net(&["eval", "--pred", path(&a), "--gt", path(&b), "--out", path(&dir.path().join("ev"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no prediction for: sample002"), "{}", stderr(&o));
}

#[test]
fn gradcheck_modes() {
    let o = cs2net(&["gradcheck", "--seeds", "1", "--blocks", "conv2d,loss_dice", "--precision", "32"]);
    assert!(o.status.success());
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("below 1e-3"), "{out}");
    let o = cs2net(&["gradcheck", "--seeds", "1", "--blocks", "relu", "--inject-fault", "relu"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("relu"));
    assert_eq!(cs2net(&["gradcheck", "--blocks", "nonexistent"]).status.code(), Some(2));
}
