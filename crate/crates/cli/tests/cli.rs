use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ou-statarb"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| {
            let (k, v) = l.split_once('=')?;
            (k.trim() == key).then(|| v.split_whitespace().next().unwrap().parse().unwrap())
        })
        .unwrap_or_else(|| panic!("{key} missing in\n{text}"))
}

fn simulate(dir: &Path, bars: &str) {
    let o = run(
        dir,
        &["--output-dir", "out", "simulate", "--kappa", "18.51", "--eta", "-0.0094", "--sigma", "0.0893", "--cost", "0.00137", "--bars", bars],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn fet_reports_reference_channel() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["fet", "--l", "-1.96", "--d", "-0.87", "--u", "0.58"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!((value(&text, "p_plus") - 0.682220708365474).abs() < 1e-10);
    assert!((value(&text, "trade_length") - 2.74919883682499).abs() < 1e-10);
}

#[test]
fn bad_channel_exits_nonzero_with_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["fet", "--l", "1", "--d", "0", "--u", "2"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("[fet]"), "{}", stderr(&o));
}

#[test]
fn missing_input_is_tagged() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["calibrate", "nope.csv"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("[input]"));
    let o = run(tmp.path(), &["pipeline"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("[config]"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), "stop_los = -2.0\n").unwrap();
    let o = run(tmp.path(), &["--config", "c.toml", "fn", "eval", "--points", "2"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("[config]"));
}

#[test]
fn fn_eval_tabulates() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["fn", "eval", "--from", "-1", "--to", "1", "--points", "5"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.split_whitespace().count() == 7));
}

#[test]
fn bands_match_reference_row() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(
        tmp.path(),
        &["bands", "--kappa", "18.51", "--eta", "-0.0094", "--sigma", "0.0893", "--cost", "0.0933", "--leverage", "1", "--json"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let row = &v["rows"][0];
    assert!((row["entry"].as_f64().unwrap() + 0.870).abs() < 0.02);
    assert!((row["exit"].as_f64().unwrap() - 0.581).abs() < 0.02);
    let mu = row["mu"].as_f64().unwrap();
    assert!((row["mu_both_sides"].as_f64().unwrap() - 2.0 * mu).abs() < 1e-12);
}

#[test]
fn simulate_clean_calibrate_backtest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir, "6000");
    let csv = fs::read_to_string(dir.join("out/simulated.csv")).unwrap();
    assert!(csv.starts_with("timestamp,bid1,ask1,bid2,ask2"));
    assert_eq!(csv.lines().count(), 6001);

    let o = run(dir, &["--output-dir", "out", "clean", "out/simulated.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.join("out/cleaned.csv").exists() && dir.join("out/removed.csv").exists());

    let o = run(dir, &["--output-dir", "out", "--seed", "3", "calibrate", "out/cleaned.csv", "--samples", "100", "--all-hours"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("out/calibration.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 3);
    assert!(report["config_hash"].as_str().unwrap().len() == 64);

    let o = run(
        dir,
        &["--output-dir", "out", "backtest", "out/cleaned.csv", "--bands=-1.96,-0.87,0.58", "--params-file", "out/params.json", "--short-side", "on"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let trades = fs::read_to_string(dir.join("out/trades.csv")).unwrap();
    assert_eq!(trades.lines().count() as f64 - 1.0, value(&text, "trades"));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("out/backtest.json")).unwrap()).unwrap();
    let lw = summary["log_wealth"].as_f64().unwrap();
    assert!((lw - summary["log_wealth_from_counts"].as_f64().unwrap()).abs() < 1e-12);
}

#[test]
fn pipeline_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir, "17520");
    fs::write(
        dir.join("cfg.toml"),
        "split = \"2023-10-02T00:00:00\"\nbootstrap_samples = 100\nband_bootstrap_samples = 20\nband_bootstrap_resolution = 50\nleverages = [1, \"opt\"]\ncost_sweep = [0.0, 0.5]\n",
    )
    .unwrap();
    let mut reports = Vec::new();
    for out in ["a", "b"] {
        let o = run(dir, &["--config", "cfg.toml", "--output-dir", out, "pipeline", "out/simulated.csv"]);
        assert!(o.status.success(), "{}", stderr(&o));
        for f in ["report.json", "parameters.txt", "bands.txt", "cost_histogram.dat", "cost_sweep.dat", "trades_f_1.csv"] {
            assert!(dir.join(out).join(f).exists(), "{f} missing");
        }
        reports.push(fs::read_to_string(dir.join(out).join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let header = fs::read_to_string(dir.join("a/bands.txt")).unwrap();
    let cols: Vec<&str> = header.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(cols, ["f", "d", "CI", "u", "CI", "mu", "CI", "mu_OS"]);
}
