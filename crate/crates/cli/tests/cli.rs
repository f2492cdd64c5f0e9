use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use vpt_core::{
    Base, Checkpoint, DensityEstimator, FlowConfig, FlowModel, PartitionMode, PriorKind, Standardization,
    TrainConfig,
};

fn vpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vpt")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn quick_train(dir: &TempDir, data: &str, extra: &[&str]) -> (PathBuf, Output) {
    let out = dir.path().join("model.json");
    let mut args = vec![
        "train", "--data", data, "--synthetic-n", "1500", "--epochs", "3", "--flow-layers", "2", "--hidden", "8,8",
        "--lr-flow", "3e-3", "--seed", "5", "--out", path_str(&out),
    ];
    args.extend_from_slice(extra);
    let o = vpt(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    (out, o)
}

/// A checkpoint with no flow layers and an α=(1,1) tree: the uniform density
/// on the unit square.
fn uniform_checkpoint(dir: &TempDir) -> PathBuf {
    let flow = FlowModel::new(2, FlowConfig::identity(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut base = Base::new(PriorKind::Vpt, 2, 3, PartitionMode::Dyadic).unwrap();
    if let Base::PolyaTree(t) = &mut base {
        t.fill_alphas(1.0, 1.0).unwrap();
    }
    let model = DensityEstimator::from_parts(flow, base, false).unwrap();
    let config = TrainConfig { levels: 3, flow: FlowConfig::identity(), ..TrainConfig::default() };
    let path = dir.path().join("uniform.json");
    Checkpoint::new(config, model, Standardization::identity(2), None).save(&path).unwrap();
    path
}

fn write_table(dir: &TempDir, name: &str, rows: usize, cols: usize, seed: u64, lo: f64, hi: f64) -> PathBuf {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::new();
    for _ in 0..rows {
        let row: Vec<String> = (0..cols).map(|_| r.random_range(lo..hi).to_string()).collect();
        writeln!(text, "{}", row.join(",")).unwrap();
    }
    let path = dir.path().join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn metric(o: &Output) -> f64 {
    let v: serde_json::Value = serde_json::from_str(stdout(o).trim()).unwrap();
    v["value"].as_f64().unwrap()
}

#[test]
fn train_writes_checkpoint_and_epoch_log() {
    let dir = TempDir::new().unwrap();
    let (model, o) = quick_train(&dir, "synthetic:checkerboard", &["--prior", "vpt", "--levels", "3", "--smooth-base"]);
    assert!(stdout(&o).contains("prior parameters: 28"));
    let ckpt = Checkpoint::load(&model).unwrap();
    assert_eq!(ckpt.config.levels, 3);
    let log = std::fs::read_to_string(model.with_extension("log.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| r["validation_nll"].as_f64().unwrap().is_finite()));
}

#[test]
fn six_column_table_reports_tree_budget() {
    let dir = TempDir::new().unwrap();
    let table = write_table(&dir, "six.csv", 400, 6, 1, -3.0, 3.0);
    let (_, o) = quick_train(&dir, path_str(&table), &["--prior", "vpt", "--levels", "4"]);
    assert!(stdout(&o).contains("prior parameters: 180"), "{}", stdout(&o));
}

#[test]
fn invalid_flags_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("m.json");
    let o = vpt(&["train", "--data", "synthetic:checkerboard", "--prior", "dirichlet", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    for name in ["vpt", "gaussian", "logistic", "histogram"] {
        assert!(msg.contains(name), "{msg}");
    }
    let o = vpt(&["train", "--data", "synthetic:moons", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = vpt(&["train", "--data", "synthetic:checkerboard", "--batch", "0", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn uniform_model_on_uniform_data_has_zero_nll() {
    let dir = TempDir::new().unwrap();
    let model = uniform_checkpoint(&dir);
    let table = write_table(&dir, "unit.csv", 500, 2, 2, 0.001, 0.999);
    let o = vpt(&["eval", "--model", path_str(&model), "--data", path_str(&table), "--metric", "nll"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(metric(&o).abs() < 1e-12);
}

#[test]
fn bpd_is_nll_over_d_ln2() {
    let dir = TempDir::new().unwrap();
    let (model, _) = quick_train(&dir, "synthetic:eight_gaussians", &["--prior", "gaussian"]);
    let eval = |m: &str| {
        let o = vpt(&[
            "eval", "--model", path_str(&model), "--data", "synthetic:eight_gaussians", "--synthetic-n", "800",
            "--metric", m, "--rows", "test",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        metric(&o)
    };
    let (nll, bpd) = (eval("nll"), eval("bpd"));
    assert!((bpd - nll / (2.0 * std::f64::consts::LN_2)).abs() < 1e-12);
}

#[test]
fn dimension_mismatch_is_a_runtime_failure() {
    let dir = TempDir::new().unwrap();
    let model = uniform_checkpoint(&dir);
    let table = write_table(&dir, "three.csv", 50, 3, 3, 0.1, 0.9);
    let o = vpt(&["eval", "--model", path_str(&model), "--data", path_str(&table)]);
    assert_eq!(o.status.code(), Some(1));
    let o = vpt(&["eval", "--model", path_str(&dir.path().join("missing.json")), "--data", path_str(&table)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn self_samples_are_calibrated() {
    let dir = TempDir::new().unwrap();
    let (model, _) = quick_train(&dir, "synthetic:two_spirals", &["--prior", "vpt", "--levels", "3", "--smooth-base"]);
    let samples = dir.path().join("own.csv");
    let o = vpt(&["sample", "--model", path_str(&model), "--n", "10000", "--seed", "4", "--out", path_str(&samples)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = vpt(&["eval", "--model", path_str(&model), "--data", path_str(&samples), "--metric", "sse"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sse = metric(&o);
    assert!((sse - 1.0).abs() < 0.05, "{sse}");
}

#[test]
fn sample_emits_requested_rows_reproducibly() {
    let dir = TempDir::new().unwrap();
    let (model, _) = quick_train(&dir, "synthetic:eight_gaussians", &["--prior", "histogram", "--levels", "3"]);
    let draw = || {
        let o = vpt(&["sample", "--model", path_str(&model), "--n", "1000", "--seed", "9"]);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let text = draw();
    assert_eq!(text.lines().count(), 1000);
    assert!(text.lines().all(|l| l.split(',').count() == 2 && l.split(',').all(|v| v.parse::<f64>().is_ok())));
    assert_eq!(text, draw());
}

#[test]
fn grid_has_header_and_res_squared_rows() {
    let dir = TempDir::new().unwrap();
    let model = uniform_checkpoint(&dir);
    let o = vpt(&["grid", "--model", path_str(&model), "--res", "100", "--bounds", "0,1,0,1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,y,density"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 10_000);
    let density: f64 = rows[0].split(',').nth(2).unwrap().parse().unwrap();
    assert!((density - 1.0).abs() < 1e-12);
}

#[test]
fn uniform_prior_variance_is_one_twelfth() {
    let dir = TempDir::new().unwrap();
    let model = uniform_checkpoint(&dir);
    let out = dir.path().join("var.csv");
    let o = vpt(&["variance", "--model", path_str(&model), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out).unwrap();
    let values: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 2);
    assert!(values.iter().all(|v| (v - 1.0 / 12.0).abs() < 1e-12));
}

#[test]
fn seeded_training_is_reproducible_end_to_end() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let (ma, _) = quick_train(&a, "synthetic:checkerboard", &["--prior", "vpt", "--mode", "per-level", "--levels", "2"]);
    let (mb, _) = quick_train(&b, "synthetic:checkerboard", &["--prior", "vpt", "--mode", "per-level", "--levels", "2"]);
    assert_eq!(std::fs::read_to_string(ma).unwrap(), std::fs::read_to_string(mb).unwrap());
}
