use std::path::Path;
use std::process::{Command, Output};

use biplanar_ct::drr::read_pair;
use biplanar_ct::metrics::CSV_HEADER;
use biplanar_ct::volume::read_volume;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biplanar-ct"))
        .args(args)
        .output()
        .expect("spawn biplanar-ct")
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    err.lines()
        .find(|l| l.starts_with("error: code="))
        .unwrap_or_else(|| panic!("no error line in {err:?}"))
        .to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn phantom_drr_and_slices() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["phantom", "--count", "2", "--size", "16", "--seed", "5", "--out", s(&data)]);
    let ctv = data.join("sample_0000.ctv");
    let vol = read_volume(&ctv).unwrap();
    assert_eq!(vol.dims, [16, 16, 16]);

    let bxr = dir.path().join("pair.bxr");
    ok(&["drr", "--in", s(&ctv), "--out", s(&bxr)]);
    let ours = read_pair(&bxr).unwrap();
    let stored = read_pair(&data.join("sample_0000.bxr")).unwrap();
    assert_eq!(ours, stored);

    let slices = dir.path().join("slices");
    let stdout = ok(&["export-slices", "--vol", s(&ctv), "--plane", "mid3", "--out", s(&slices)]);
    assert_eq!(stdout.lines().count(), 3);
    for plane in ["axial", "coronal", "sagittal"] {
        let bytes = std::fs::read(slices.join(format!("sample_0000_{plane}.pgm"))).unwrap();
        assert!(bytes.starts_with(b"P5"));
    }
}

#[test]
fn train_eval_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["phantom", "--count", "2", "--size", "16", "--seed", "1", "--out", s(&data)]);
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(
        &cfg,
        format!(
            "# tiny\nvolume_size = 16\nlevels = 2\nbase_channels = 4\ngrowth = 2\n\
             dense_layers_per_block = 1\ndisc_layers = 2\ndisc_base_channels = 4\n\
             cond_channels = 2\nbatch_size = 2\nepochs = 1\ndata_dir = {}\nout_dir = {}\n",
            data.display(),
            run.display()
        ),
    )
    .unwrap();
    ok(&["train", "--config", s(&cfg)]);
    let log = std::fs::read_to_string(run.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let ckpt = run.join("last.ckp");
    assert!(run.join("ckpt_epoch_1.ckp").exists());

    let report = dir.path().join("eval.csv");
    ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&report)]);
    let csv = std::fs::read_to_string(&report).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], CSV_HEADER);
    assert_eq!(rows.len(), 1 + 2 + 2);
    assert!(rows[3].starts_with("mean,") && rows[4].starts_with("std,"));

    let out = dir.path().join("recon.ctv");
    ok(&["reconstruct", "--ckpt", s(&ckpt), "--xrays", s(&data.join("sample_0001.bxr")), "--out", s(&out)]);
    assert_eq!(read_volume(&out).unwrap().dims, [16, 16, 16]);
}

#[test]
fn oracle_eval_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["phantom", "--count", "1", "--size", "16", "--out", s(&data)]);
    let report = dir.path().join("eval.csv");
    let stdout = ok(&["eval", "--oracle", "--data", s(&data), "--report", s(&report)]);
    assert!(stdout.contains("psnr_db=100.000"), "{stdout}");
}

#[test]
fn gradcheck_single_op() {
    let stdout = ok(&["gradcheck", "--op", "relu"]);
    assert!(stdout.starts_with("gradcheck op=relu "), "{stdout}");
    assert!(stdout.contains("status=pass"));
}

#[test]
fn failures_print_an_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ctv");
    let line = error_line(&bin(&["drr", "--in", s(&missing), "--out", s(&dir.path().join("x.bxr"))]));
    assert!(line.starts_with("error: code=io msg="), "{line}");

    let junk = dir.path().join("junk.ctv");
    std::fs::write(&junk, b"NOTAVOLUME").unwrap();
    let line = error_line(&bin(&["export-slices", "--vol", s(&junk), "--plane", "axial", "--out", s(dir.path())]));
    assert!(line.starts_with("error: code=bad-magic"), "{line}");

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_rate = 3\n").unwrap();
    let line = error_line(&bin(&["train", "--config", s(&cfg)]));
    assert!(line.starts_with("error: code=config"), "{line}");

    let line = error_line(&bin(&["gradcheck", "--op", "no_such_op"]));
    assert!(line.starts_with("error: code="), "{line}");

    assert!(!bin(&["phantom", "--count", "1"]).status.success());
}
