use std::path::Path;
use std::process::{Command, Output};

fn seunet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seunet")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, n: &str) {
    let o = seunet(&["synth", "--out-dir", "data", "--n", n, "--size", "64", "--seed", "2"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&seunet(&[], p)), 1);
    assert_eq!(code(&seunet(&["fly"], p)), 1);
    assert_eq!(code(&seunet(&["train", "--bogus"], p)), 1);
    assert_eq!(code(&seunet(&["train"], p)), 1, "manifest is required");
    assert_eq!(code(&seunet(&["--help"], p)), 0);

    synth(p, "2");
    for bad in ["--variant=XL", "--epochs=0", "--lr=-1", "--size=72", "--widths=huge"] {
        let o = seunet(&["train", "--manifest", "data/manifest.tsv", bad], p);
        assert_eq!(code(&o), 1, "{bad:?}");
        let err = stderr(&o);
        assert_eq!(err.trim_end().lines().count(), 1, "one-line diagnosis: {err}");
        assert!(err.starts_with("seunet: "));
    }
    std::fs::write(p.join("run.cfg"), "manifest=data/manifest.tsv\ncolour=blue\n").unwrap();
    assert_eq!(code(&seunet(&["train", "--config", "run.cfg"], p)), 1);
    assert_eq!(code(&seunet(&["gradcheck", "--seeds", "0"], p)), 1);
    assert_eq!(code(&seunet(&["gradcheck", "--filter", "no_such_case", "--seeds", "1"], p)), 1);
}

#[test]
fn io_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&seunet(&["train", "--manifest", "missing.tsv"], p)), 3);
    assert_eq!(code(&seunet(&["eval", "--checkpoint", "none.seut", "--manifest", "missing.tsv"], p)), 3);
    assert_eq!(code(&seunet(&["train", "--config", "none.cfg"], p)), 3);

    // A manifest naming files that are not there.
    std::fs::write(p.join("m.tsv"), "a.png\tb.png\n").unwrap();
    let o = seunet(&["train", "--manifest", "m.tsv", "--size", "64"], p);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn validation_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    synth(p, "2");
    std::fs::write(p.join("junk.seut"), b"definitely not a checkpoint").unwrap();
    let o = seunet(&["eval", "--checkpoint", "junk.seut", "--manifest", "data/manifest.tsv"], p);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("not a checkpoint"));

    std::fs::write(p.join("dup.tsv"), "data/images/0000.png\tdata/masks/0000.png\ndata/images/0000.png\tdata/masks/0000.png\n").unwrap();
    assert_eq!(code(&seunet(&["train", "--manifest", "dup.tsv", "--size", "64"], p)), 2);

    // A gradient check that cannot pass.
    let o = seunet(&["gradcheck", "--filter", "model_end_to_end", "--seeds", "1", "--e2e-tolerance", "1e-12"], p);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stdout).lines().last().unwrap().starts_with("FAIL max_rel_err="));
}

#[test]
fn train_eval_predict_flow() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    synth(p, "3");
    std::fs::write(p.join("run.cfg"), "manifest=data/manifest.tsv\nvariant=M\nwidths=thin\nepochs=9\nseed=7\nout_dir=run\n").unwrap();
    let o = seunet(&["train", "--config", "run.cfg", "--epochs", "25"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut files: Vec<String> = std::fs::read_dir(p.join("run")).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    files.sort();
    assert_eq!(files, ["epoch_0010.seut", "epoch_0020.seut", "epoch_0025.seut", "train.log"]);
    let log = std::fs::read_to_string(p.join("run/train.log")).unwrap();
    assert_eq!(log.lines().count(), 26);
    assert!(log.lines().next().unwrap().contains("seed 7"));

    let o = seunet(&["eval", "--checkpoint", "run/epoch_0025.seut", "--manifest", "data/manifest.tsv", "--out-dir", "rep"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = std::fs::read_to_string(p.join("rep/report.txt")).unwrap();
    for key in ["mDC", "mIoU", "mRec", "mPre"] {
        assert!(table.lines().any(|l| l.split_whitespace().next() == Some(key)), "{key} in {table}");
    }
    assert_eq!(String::from_utf8_lossy(&o.stdout), table);
    let kv = std::fs::read_to_string(p.join("rep/report.kv")).unwrap();
    assert!(kv.starts_with("images=3\n"));

    let o = seunet(&["predict", "--checkpoint", "run/epoch_0025.seut", "--manifest", "data/manifest.tsv", "--out-dir", "pred"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for id in ["0000", "0001", "0002"] {
        let mask = image::open(p.join(format!("pred/{id}_mask.png"))).unwrap().to_luma8();
        assert_eq!(mask.dimensions(), (64, 64));
        assert!(mask.pixels().all(|px| px.0[0] == 0 || px.0[0] == 255));
        assert!(p.join(format!("pred/{id}_prob.png")).is_file());
    }

    // Resuming picks up after the checkpoint's epoch.
    let o = seunet(&["train", "--config", "run.cfg", "--epochs", "27", "--resume", "run/epoch_0025.seut", "--out-dir", "more"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = std::fs::read_to_string(p.join("more/train.log")).unwrap();
    let epochs: Vec<&str> = log.lines().skip(1).map(|l| l.split_whitespace().nth(1).unwrap()).collect();
    assert_eq!(epochs, ["26", "27"]);

    // A checkpoint of one architecture cannot resume another.
    let o = seunet(&["train", "--config", "run.cfg", "--variant", "S", "--resume", "run/epoch_0025.seut", "--out-dir", "x"], p);
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_reports_pass() {
    let dir = tempfile::tempdir().unwrap();
    let o = seunet(&["gradcheck", "--tolerance", "1e-4", "--seeds", "2", "--filter", "conv"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().count(), 3, "{out}");
    assert!(out.lines().last().unwrap().starts_with("PASS max_rel_err="));
}
