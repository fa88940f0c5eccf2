//! Command-line round trips: gen, train, eval, verify and riskcalc.

use std::fs;
use std::path::Path;
use std::process::Command;

use radpo_core::cli;
use radpo_core::train::MetricsRow;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = cli::run(std::iter::once("radpo").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn gen(dir: &Path, seed: &str) -> String {
    let out = dir.join("data").display().to_string();
    let (code, _, err) = run(&["gen", "--seed", seed, "--pairs", "300", "--vocab", "8", "--out_dir", &out]);
    assert_eq!(code, 0, "{err}");
    for f in ["task.txt", "ref.ckpt", "data.txt"] {
        assert!(dir.join("data").join(f).exists(), "{f} missing");
    }
    out
}

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(MetricsRow::HEADER));
    lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect()
}

#[test]
fn gen_is_deterministic_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    gen(a.path(), "3");
    gen(b.path(), "3");
    gen(c.path(), "4");
    for f in ["task.txt", "ref.ckpt", "data.txt"] {
        let read = |d: &Path| fs::read(d.join("data").join(f)).unwrap();
        assert_eq!(read(a.path()), read(b.path()), "{f}");
        assert_ne!(read(a.path()), read(c.path()), "{f}");
    }
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "1");
    let config = dir.path().join("train.cfg");
    fs::write(
        &config,
        format!(
            "# zero epochs unless overridden\nloss = tdpo2\nalpha = 0.5\nepochs = 0\ndataset = {data}/data.txt\nref = {data}/ref.ckpt\n"
        ),
    )
    .unwrap();

    let frozen = dir.path().join("frozen").display().to_string();
    let (code, _, err) = run(&["train", "--config", config.to_str().unwrap(), "--out_dir", &frozen]);
    assert_eq!(code, 0, "{err}");
    let rows = csv_rows(&Path::new(&frozen).join("metrics.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], 0.0);
    assert_eq!(rows[0][2], 0.5);
    assert_eq!(
        fs::read(Path::new(&frozen).join("final.ckpt")).unwrap(),
        fs::read(Path::new(&data).join("ref.ckpt")).unwrap()
    );

    let trained = dir.path().join("trained").display().to_string();
    let (code, _, err) = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--epochs",
        "2",
        "--eval-every",
        "2",
        "--out-dir",
        &trained,
    ]);
    assert_eq!(code, 0, "{err}");
    let rows = csv_rows(&Path::new(&trained).join("metrics.csv"));
    assert!(rows.len() > 2);
    assert!(rows.iter().all(|r| r.iter().all(|x| x.is_finite())));
    let steps: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    assert!(steps.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn eval_of_reference_and_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "2");
    let dataset = format!("{data}/data.txt");
    let reference = format!("{data}/ref.ckpt");

    let (code, out, err) = run(&["eval", "--dataset", &dataset, "--ref", &reference]);
    assert_eq!(code, 0, "{err}");
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some(MetricsRow::HEADER));
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert!((row[1] - std::f64::consts::LN_2).abs() < 1e-8);
    assert_eq!(row[2], 0.5);
    assert_eq!(&row[3..8], &[0.0; 5]);

    let out_dir = dir.path().join("run").display().to_string();
    let (code, _, err) = run(&[
        "train", "--loss", "dpo", "--epochs", "3", "--dataset", &dataset, "--ref", &reference, "--out_dir", &out_dir,
    ]);
    assert_eq!(code, 0, "{err}");
    let ckpt = format!("{out_dir}/final.ckpt");
    let (code, out, err) = run(&["eval", "--dataset", &dataset, "--ref", &reference, "--theta", &ckpt]);
    assert_eq!(code, 0, "{err}");
    let row: Vec<f64> = out.lines().nth(1).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert!(row[1] < std::f64::consts::LN_2, "loss did not drop: {}", row[1]);
    assert!(row[2] > 0.5, "accuracy {}", row[2]);
    assert!(row[3] > 0.0);
}

#[test]
fn validation_errors_exit_one() {
    let (code, _, err) = run(&["train", "--no-such-flag"]);
    assert_eq!(code, 1);
    assert!(err.contains("Usage"), "{err}");

    let (code, _, err) = run(&["train", "--loss", "radpo2", "--measure", "cvar", "--mu", "1.5"]);
    assert_eq!(code, 1);
    assert!(!err.is_empty());

    let (code, _, err) = run(&["eval", "--dataset", "/nonexistent/d.txt", "--ref", "/nonexistent/r.ckpt"]);
    assert_eq!(code, 1);
    assert!(err.contains("/nonexistent/"), "{err}");
}

#[test]
fn riskcalc_on_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("dist.txt");
    fs::write(&file, "# p value\n0.25 1\n0.25 2\n0.5 4\n").unwrap();
    let f = file.to_str().unwrap();
    let value = |extra: &[&str]| -> f64 {
        let mut args = vec!["riskcalc", "--file", f];
        args.extend_from_slice(extra);
        let (code, out, err) = run(&args);
        assert_eq!(code, 0, "{err}");
        out.trim().parse().unwrap()
    };
    assert!((value(&[]) - 2.75).abs() < 1e-12);
    assert!((value(&["--measure", "cvar", "--mu", "0.5"]) - 4.0).abs() < 1e-12);
    assert!((value(&["--measure", "cvar", "--mu", "0.5", "--orientation", "value"]) - 1.5).abs() < 1e-12);
    let erm = value(&["--measure", "erm", "--mu", "2"]);
    let expected = (0.25 * 2f64.exp() + 0.25 * 4f64.exp() + 0.5 * 8f64.exp()).ln() / 2.0;
    assert!((erm - expected).abs() < 1e-12);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_radpo");
    let help = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("verify"));

    let verify = Command::new(bin)
        .args(["verify", "--seed", "7", "--mdps", "10", "--trials", "50"])
        .output()
        .unwrap();
    assert_eq!(verify.status.code(), Some(0));
    let report = String::from_utf8_lossy(&verify.stdout);
    assert!(report.lines().all(|l| !l.ends_with(" fail")), "{report}");
    assert!(report.contains("lemma1/neutral/g1 7 "));

    let bad = Command::new(bin).arg("bogus").output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
