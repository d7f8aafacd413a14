use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use elastodyn::data::{load_csv, nrmse, Schema};
use elastodyn::layout::Dimension;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_elastodyn"));
    c.env_remove("ELASTODYN_THREADS").env("RUST_LOG", "warn");
    c
}

fn run(cmd: &mut Command) -> (i32, String, String) {
    let Output { status, stdout, stderr } = cmd.output().expect("spawn");
    (
        status.code().unwrap_or(-1),
        String::from_utf8_lossy(&stdout).into_owned(),
        String::from_utf8_lossy(&stderr).into_owned(),
    )
}

/// Tiny forward problem: a few epochs of a small net, small eval grid.
fn forward_ini(out: &Path, extra_training: &str) -> String {
    format!(
        "[run]
mode = forward
seed = 3
output_dir = {}

[material]
lambda = 0.533334
mu = 0.1
rho = 0.92e-6

[network]
hidden = 8
layers = 2

[training]
epochs = 3
n_collocation = 32
{extra_training}

[data]
source = manufactured
waves = P x 1.0; S x y 0.5
nodes = 11 3
times = 6
t_end = 0.125
boundary_fraction = 0.5
eval_nodes = 5 3
eval_times = 4
",
        out.display()
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn train(config: &Path) -> (i32, String, String) {
    run(bin().arg("train").arg("--config").arg(config))
}

#[test]
fn missing_mode_exits_2_naming_key() {
    let dir = tempfile::tempdir().unwrap();
    let text = forward_ini(&dir.path().join("out"), "").replace("mode = forward\n", "");
    let cfg = write_config(dir.path(), "c.ini", &text);
    let (code, _, err) = train(&cfg);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("`mode`"), "{err}");
}

#[test]
fn unknown_key_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = forward_ini(&dir.path().join("out"), "learning_rate = 0.1");
    let line = text.lines().position(|l| l.starts_with("learning_rate")).unwrap() + 1;
    let cfg = write_config(dir.path(), "c.ini", &text);
    let (code, _, err) = train(&cfg);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains(&format!("line {line}")), "{err}");
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn bad_thread_env_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.ini", &forward_ini(&dir.path().join("out"), ""));
    let (code, _, err) = run(bin()
        .env("ELASTODYN_THREADS", "many")
        .arg("train")
        .arg("--config")
        .arg(&cfg));
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("ELASTODYN_THREADS"), "{err}");
}

#[test]
fn forward_train_then_predict() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "c.ini", &forward_ini(&out, ""));
    let (code, stdout, err) = train(&cfg);
    assert_eq!(code, 0, "{err}");
    for f in [
        "checkpoint.txt",
        "loss_history.csv",
        "loss.svg",
        "summary.txt",
        "reference_eval.csv",
        "prediction_eval.csv",
        "slice_eval.svg",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(stdout.contains(&summary));
    let history = fs::read_to_string(out.join("loss_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 3);

    // The checkpoint reproduces the reported error on the eval grid.
    let pred_path = dir.path().join("pred.csv");
    let (code, _, err) = run(bin()
        .args(["predict", "--checkpoint"])
        .arg(out.join("checkpoint.txt"))
        .args(["--nodes", "5,3", "--n-times", "4", "--t-end", "0.125", "--out"])
        .arg(&pred_path));
    assert_eq!(code, 0, "{err}");
    let schema = Schema {
        dimension: Dimension::Plane,
        surrogate: false,
    };
    let pred = load_csv(&pred_path, schema).unwrap();
    let reference = load_csv(out.join("reference_eval.csv"), schema).unwrap();
    assert_eq!(pred.points, reference.points);
    for name in ["u_x", "u_y", "s_xx", "s_yy", "s_xy"] {
        let e = nrmse(&pred.field(name).unwrap(), &reference.field(name).unwrap()).unwrap();
        let line = summary
            .lines()
            .find(|l| l.trim_start().starts_with(&format!("nrmse {name} =")))
            .unwrap_or_else(|| panic!("no {name} in summary"));
        let reported: f64 = line.rsplit('=').next().unwrap().trim().parse().unwrap();
        assert!((e - reported).abs() <= 1e-12, "{name}: {e} vs {reported}");
    }

    // Minimal grid: 2 x 2 nodes, one instant.
    let small = dir.path().join("small.csv");
    let (code, _, err) = run(bin()
        .args(["predict", "--checkpoint"])
        .arg(out.join("checkpoint.txt"))
        .args(["--nodes", "2,2", "--n-times", "1", "--t-end", "0.1", "--out"])
        .arg(&small));
    assert_eq!(code, 0, "{err}");
    let text = fs::read_to_string(&small).unwrap();
    assert_eq!(text.lines().count(), 1 + 4);

    // --mu is rejected for a non-surrogate checkpoint.
    let (code, _, err) = run(bin()
        .args(["predict", "--checkpoint"])
        .arg(out.join("checkpoint.txt"))
        .args(["--t-end", "0.1", "--mu", "0.1", "--out"])
        .arg(&small));
    assert_eq!(code, 2, "{err}");

    // Reruns are bit-identical, also with more threads.
    let history_a = fs::read(out.join("loss_history.csv")).unwrap();
    let (code, _, err) = run(bin()
        .env("ELASTODYN_THREADS", "2")
        .arg("train")
        .arg("--config")
        .arg(&cfg));
    assert_eq!(code, 0, "{err}");
    assert_eq!(history_a, fs::read(out.join("loss_history.csv")).unwrap());
}

#[test]
fn inverse_linear_preset_warns_but_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let text = format!(
        "[run]
mode = inverse
seed = 1
output_dir = {}

[material]
lambda = 115385
mu = 76923
rho = 7.85e-6

[scales]
modulus = 150000

[network]
hidden = 8
layers = 2

[training]
epochs = 2
mapping = linear
n_collocation = 16

[data]
source = manufactured
waves = P x 1.0; S x y 0.5
standing = true
nodes = 9 3
times = 5
t_end = 0.6e-3
boundary_fraction = 1.0
eval_nodes = 5 3
eval_times = 3
",
        out.display()
    );
    let cfg = write_config(dir.path(), "inv.ini", &text);
    let (code, stdout, err) = train(&cfg);
    assert_eq!(code, 0, "{err}");
    assert!(err.contains("unsupported inverse preset"), "{err}");
    assert!(stdout.contains("recovered: lambda"), "{stdout}");
    assert!(out.join("material.svg").is_file());
    let header = fs::read_to_string(out.join("loss_history.csv")).unwrap();
    assert!(header.lines().next().unwrap().ends_with("lambda,mu"));
}

#[test]
fn surrogate_predict_requires_mu() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let text = format!(
        "[run]
mode = surrogate
seed = 2
output_dir = {}

[material]
lambda = 0.533334
rho = 0.92e-6

[scales]
u_x = 1.0
s_xx = 0.006283185307179587
s_yy = 0.006283185307179587

[network]
hidden = 8
layers = 2

[training]
epochs = 1
n_collocation = 16

[data]
source = manufactured
waves = S x y 1.0
nodes = 5 3
times = 4
t_end = 0.3
boundary_fraction = 1.0
interior_fraction = 1.0
mu_values = 0.05 0.1
eval_mu = 0.075
eval_nodes = 5 3
eval_times = 3
",
        out.display()
    );
    let cfg = write_config(dir.path(), "s.ini", &text);
    let (code, _, err) = train(&cfg);
    assert_eq!(code, 0, "{err}");
    assert!(out.join("prediction_mu0.075.csv").is_file());

    let ck = out.join("checkpoint.txt");
    let p = dir.path().join("p.csv");
    let (code, _, err) = run(bin()
        .args(["predict", "--checkpoint"])
        .arg(&ck)
        .args(["--t-end", "0.3", "--out"])
        .arg(&p));
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("--mu"), "{err}");

    let (code, _, err) = run(bin()
        .args(["predict", "--checkpoint"])
        .arg(&ck)
        .args([
            "--t-end",
            "0.3",
            "--mu",
            "0.075",
            "--nodes",
            "2,2",
            "--n-times",
            "1",
            "--out",
        ])
        .arg(&p));
    assert_eq!(code, 0, "{err}");
    let text = fs::read_to_string(&p).unwrap();
    assert!(text.lines().next().unwrap().contains("mu"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn verify_quick_passes_and_catches_faults() {
    let (code, stdout, err) = run(bin().args(["verify", "--level", "quick"]));
    assert_eq!(code, 0, "{stdout}{err}");
    assert!(stdout.lines().all(|l| !l.starts_with("FAIL")), "{stdout}");

    let (code, stdout, err) = run(bin().args(["verify", "--level", "quick", "--perturb-residual", "1.01"]));
    assert_eq!(code, 1, "{stdout}{err}");
    assert!(err.contains("plane-wave residual"), "{err}");
    assert!(stdout.contains("FAIL plane-wave residual"), "{stdout}");
}
