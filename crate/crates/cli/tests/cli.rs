use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use downscale::evaluation::EvalReport;
use downscale::models::Checkpoint;
use downscale::tensor::OpKind;

const TINY_VIT: &[&str] = &[
    "--set",
    "vit.dim=8",
    "--set",
    "vit.heads=2",
    "--set",
    "vit.blocks=2",
    "--set",
    "train.batch_size=2",
];

const TINY_RESNET: &[&str] = &[
    "--set",
    "resnet.channels=4",
    "--set",
    "resnet.blocks=1",
    "--set",
    "resnet.large_kernel=3",
    "--set",
    "train.batch_size=2",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_downscale"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, n: usize, size: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("data_{size}_{seed}"));
    let (n, size, seed) = (n.to_string(), size.to_string(), seed.to_string());
    ok(&[
        "synth", "--out", s(&out), "--n", &n, "--ny", &size, "--nx", &size, "--seed", &seed,
    ]);
    out
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", s(out), "--data", s(data)];
    args.extend_from_slice(extra);
    ok(&args)
}

fn rows(csv_path: &Path) -> EvalReport {
    EvalReport::from_csv(&fs::read_to_string(csv_path).unwrap()).unwrap()
}

#[test]
fn synth_is_reproducible_and_documented() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["synth", "--out", s(out), "--n", "8", "--ny", "64", "--nx", "64", "--seed", "7"]);
    }
    let grds: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path();
            (p.extension().map(|x| x == "grd").unwrap_or(false)).then_some(p)
        })
        .collect();
    assert_eq!(grds.len(), 8);
    for p in &grds {
        let name = p.file_name().unwrap();
        assert_eq!(fs::read(p).unwrap(), fs::read(b.join(name)).unwrap());
    }
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed=7"));
    assert!(manifest.contains("profile=default"));
}

#[test]
fn synth_refuses_indivisible_grids() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    for nx in ["30", "50"] {
        let r = run(&["synth", "--out", s(&out), "--n", "1", "--ny", "64", "--nx", nx]);
        assert_eq!(r.status.code(), Some(1));
        assert!(String::from_utf8_lossy(&r.stderr).contains("multiple of 16"));
    }
}

#[test]
fn train_writes_artifacts_and_records_convention() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 4, 32, 1);
    let out = dir.path().join("run");
    let mut extra = vec!["--epochs", "5", "--mass-loss", "raw_sum"];
    extra.extend_from_slice(TINY_VIT);
    train(&data, &out, &extra);
    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,train_mse,train_mass,train_total,val_rmse");
    assert_eq!(csv.lines().count(), 1 + 5);
    let ckpt = Checkpoint::load(&out.join("model.ckpt")).unwrap();
    assert_eq!(ckpt.meta["mass_convention"], "raw_sum");
    assert_eq!(ckpt.meta["use_mass_loss"], "true");
    assert_eq!(ckpt.meta["epochs"], "5");
    assert!(ckpt.norm.is_some());
    let echoed = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(echoed.contains("loss.mass_convention=raw_sum"));
    assert!(out.join("run_meta.txt").exists());
}

#[test]
fn runs_are_byte_identical_and_replayable_from_echoed_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 3, 32, 2);
    let val = synth(dir.path(), 1, 32, 3);
    let mut extra = vec!["--epochs", "2", "--val", s(&val), "--seed", "11"];
    extra.extend_from_slice(TINY_VIT);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    train(&data, &a, &extra);
    train(&data, &b, &extra);
    for f in ["model.ckpt", "loss.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = dir.path().join("c");
    let echoed = a.join("config.txt");
    ok(&["train", "--config", s(&echoed), "--out", s(&c)]);
    assert_eq!(
        fs::read(a.join("model.ckpt")).unwrap(),
        fs::read(c.join("model.ckpt")).unwrap()
    );
}

#[test]
fn unknown_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 2, 32, 4);
    let out = dir.path().join("r");
    let r = run(&["train", "--out", s(&out), "--data", s(&data), "--set", "train.bogus=1"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("train.bogus"));
    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "# comment\nmodel.kind=vit\nnot_a_key=3\n").unwrap();
    let r = run(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("not_a_key"));
}

#[test]
fn eval_reports_baseline_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 3, 32, 5);
    let test = synth(dir.path(), 2, 32, 6);
    let run_dir = dir.path().join("vit_run");
    let mut extra = vec!["--epochs", "1"];
    extra.extend_from_slice(TINY_VIT);
    train(&data, &run_dir, &extra);

    let base = dir.path().join("eval_base");
    ok(&["eval", "--out", s(&base), "--data", s(&test)]);
    let report = rows(&base.join("report.csv"));
    assert_eq!(report.rows.len(), 4);
    assert!(report.rows.iter().all(|r| r.model == "bilinear"));

    let both = dir.path().join("eval_both");
    let ckpt = run_dir.join("model.ckpt");
    ok(&[
        "eval", "--out", s(&both), "--data", s(&test), "--checkpoint", s(&ckpt), "--sample", "1",
    ]);
    let report = rows(&both.join("report.csv"));
    assert_eq!(report.rows.len(), 8);
    assert_eq!(report.rows_for("vit_run").count(), 4);
    let ppms: Vec<_> = fs::read_dir(both.join("heatmaps"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().map(|x| x == "ppm").unwrap_or(false))
        .collect();
    assert_eq!(ppms.len(), 3);
    assert!(ppms.iter().all(|p| p.to_str().unwrap().contains("sample_0001")));
    let table = fs::read_to_string(both.join("report.txt")).unwrap();
    assert!(table.contains("mass_convention: mean_preserving"));
    let meta = fs::read_to_string(both.join("run_meta.txt")).unwrap();
    assert!(meta.contains("inference_wall_seconds.vit_run="));
}

#[test]
fn transfer_runs_on_larger_grids() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 2, 32, 7);
    let big = synth(dir.path(), 2, 64, 8);
    for (name, kind, tiny) in [("vit", "vit", TINY_VIT), ("res", "resnet", TINY_RESNET)] {
        let run_dir = dir.path().join(name);
        let mut extra = vec!["--epochs", "1", "--model", kind];
        extra.extend_from_slice(tiny);
        train(&data, &run_dir, &extra);
        let out = dir.path().join(format!("{name}_transfer"));
        let ckpt = run_dir.join("model.ckpt");
        ok(&["transfer", "--out", s(&out), "--data", s(&big), "--checkpoint", s(&ckpt)]);
        let report = rows(&out.join("report.csv"));
        assert_eq!(report.rows.len(), 8);
        let table = fs::read_to_string(out.join("report.txt")).unwrap();
        assert!(table.contains("transfer.grid_differs_from_training: true"));
        assert!(table.contains("transfer.test_grid: 64x64"));

        // Same size as training is not a transfer.
        let same = run(&["transfer", "--out", s(&out), "--data", s(&data), "--checkpoint", s(&ckpt)]);
        assert_eq!(same.status.code(), Some(1));
    }
}

#[test]
fn transfer_names_the_required_multiple() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 2, 32, 9);
    let run_dir = dir.path().join("vit");
    let mut extra = vec!["--epochs", "1"];
    extra.extend_from_slice(TINY_VIT);
    train(&data, &run_dir, &extra);
    // 50x50 cannot come from `synth`; write it through the library.
    let odd = dir.path().join("odd");
    fs::create_dir_all(&odd).unwrap();
    let stack = downscale::fields::synth_stack(
        50,
        50,
        1,
        &downscale::fields::SynthProfile::default_profile(),
    )
    .unwrap();
    downscale::fields::io::save_grid(&odd.join("sample_0000.grd"), &stack).unwrap();
    let out = dir.path().join("t");
    let ckpt = run_dir.join("model.ckpt");
    let r = run(&["transfer", "--out", s(&out), "--data", s(&odd), "--checkpoint", s(&ckpt)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("multiple of 8"));
}

#[test]
fn gradcheck_passes_and_detects_injected_faults() {
    let r = ok(&["gradcheck"]);
    let text = String::from_utf8_lossy(&r.stdout);
    for kind in OpKind::DIFFERENTIABLE {
        assert!(
            text.lines().any(|l| l.split_whitespace().next() == Some(kind.name())),
            "{} missing",
            kind.name()
        );
    }
    assert!(text.contains("vit_e2e"));
    let r = run(&["gradcheck", "--inject-sign-flip", "softmax"]);
    assert_eq!(r.status.code(), Some(2));
    let r = run(&["gradcheck", "--inject-sign-flip", "nonsense"]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn corrupt_inputs_exit_with_format_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 1, 32, 10);
    let grd = data.join("sample_0000.grd");
    let bytes = fs::read(&grd).unwrap();
    fs::write(&grd, &bytes[..bytes.len() / 2]).unwrap();
    let r = run(&["eval", "--out", s(&dir.path().join("e")), "--data", s(&data)]);
    assert_eq!(r.status.code(), Some(3));
    let ckpt = dir.path().join("junk.ckpt");
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    let test = synth(dir.path(), 1, 32, 11);
    let r = run(&[
        "eval", "--out", s(&dir.path().join("e2")), "--data", s(&test), "--checkpoint", s(&ckpt),
    ]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--epochs", "x"]).status.code(), Some(1));
    assert_eq!(run(&["eval"]).status.code(), Some(1));
}
