use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn bench(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dgs-bench"));
    cmd.args(args).env_remove("DGS_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn logistic_task() -> Value {
    json!({"kind": "logistic", "n_features": 8, "n_samples": 200, "separation": 2.5, "seed": 3})
}

fn config(method: &str) -> Value {
    let mut c = json!({
        "method": method,
        "workers": 4,
        "learning_rate": 0.1,
        "batch_size": 16,
        "epochs": 3,
        "task": logistic_task(),
        "seed": 9
    });
    if method != "asgd" && method != "gd_async" && method != "dgs_residual" {
        c["momentum"] = json!(0.7);
    }
    if !matches!(method, "msgd" | "asgd") {
        c["drop_ratio"] = json!(90.0);
    }
    c
}

fn write_json(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn run(dir: &Path, cfg: &Value, out: &str, extra: &[&str], env: &[(&str, &str)]) -> (Output, PathBuf) {
    let cfg_path = write_json(dir, &format!("{out}.cfg.json"), cfg);
    let csv = dir.join(format!("{out}.csv"));
    let mut args = vec![
        "run",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    (bench(&args, env), csv)
}

fn summary(csv: &Path) -> Value {
    let path = csv.with_file_name(format!("{}.summary.json", csv.file_stem().unwrap().to_str().unwrap()));
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn minimal_msgd_run_writes_csv_and_summary() {
    let dir = TempDir::new().unwrap();
    let mut cfg = config("msgd");
    cfg["workers"] = json!(1);
    let (out, csv) = run(dir.path(), &cfg, "msgd", &[], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "sim_time_ms,step,worker,staleness,loss,acc,bytes_up,bytes_down,cum_bytes_up,cum_bytes_down"
    );
    assert!(lines.count() >= 1);
    let s = summary(&csv);
    assert_eq!(s["method"], "msgd");
    assert_eq!(s["workers"], 1);
    assert_eq!(s["mean_staleness"], 0.0);
    for key in [
        "final_loss",
        "final_accuracy",
        "total_bytes_up",
        "total_bytes_down",
        "compression_ratio_up",
    ] {
        assert!(s[key].is_number(), "{key}");
    }
}

#[test]
fn sparse_run_reports_compression_ratio() {
    let dir = TempDir::new().unwrap();
    let mut cfg = config("dgs_samomentum");
    cfg["drop_ratio"] = json!(99.0);
    cfg["task"] = json!({"kind": "quadratic", "dim": 20000, "seed": 1});
    cfg["epochs"] = json!(10);
    let (out, csv) = run(dir.path(), &cfg, "sparse", &[], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let s = summary(&csv);
    assert!(s["compression_ratio_up"].as_f64().unwrap() <= 0.022, "{s}");
    assert_eq!(s["parameters"], 20000);
}

#[test]
fn repeated_runs_are_byte_identical_and_env_seed_is_a_fallback() {
    let dir = TempDir::new().unwrap();
    let cfg = config("dgs_samomentum");
    let (_, a) = run(dir.path(), &cfg, "a", &["--seed", "5"], &[]);
    let (_, b) = run(dir.path(), &cfg, "b", &["--seed", "5"], &[]);
    let (_, c) = run(dir.path(), &cfg, "c", &[], &[("DGS_SEED", "5")]);
    let (_, d) = run(dir.path(), &cfg, "d", &[], &[]);
    let read = |p: &Path| fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(read(&a), read(&c));
    assert_ne!(read(&a), read(&d), "config seed 9 should differ from seed 5");
    assert_eq!(summary(&d)["seed"], 9);
}

#[test]
fn invalid_config_exits_2_naming_the_field() {
    let dir = TempDir::new().unwrap();
    let mut cfg = config("dgs_samomentum");
    cfg.as_object_mut().unwrap().remove("momentum");
    let (out, csv) = run(dir.path(), &cfg, "bad", &[], &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("`momentum`"), "{}", stderr(&out));
    assert!(!csv.exists());

    let mut cfg = config("asgd");
    cfg["workers"] = json!("four");
    let (out, _) = run(dir.path(), &cfg, "bad2", &[], &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("field `workers`"), "{}", stderr(&out));
}

#[test]
fn dense_method_warns_about_drop_ratio() {
    let dir = TempDir::new().unwrap();
    let mut cfg = config("asgd");
    cfg["drop_ratio"] = json!(99.0);
    let (out, csv) = run(dir.path(), &cfg, "warn", &[], &[]);
    assert_eq!(code(&out), 0);
    assert!(stderr(&out).contains("warning: drop_ratio"), "{}", stderr(&out));
    assert_eq!(summary(&csv)["warnings"].as_array().unwrap().len(), 1);
}

#[test]
fn divergence_exits_3_with_partial_outputs() {
    let dir = TempDir::new().unwrap();
    let mut cfg = config("asgd");
    cfg["task"] = json!({"kind": "quadratic", "dim": 4, "seed": 1});
    cfg["learning_rate"] = json!(1e100);
    cfg["epochs"] = json!(50);
    cfg["eval_every"] = json!(1);
    let (out, csv) = run(dir.path(), &cfg, "boom", &[], &[]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let rows = fs::read_to_string(&csv).unwrap().lines().count() - 1;
    assert!((1..50).contains(&rows), "{rows}");
    assert!(summary(&csv)["divergence"].is_object());
}

fn compare_dir(configs: &[(&str, Value)]) -> (TempDir, Output) {
    let dir = TempDir::new().unwrap();
    let cfgs = dir.path().join("configs");
    fs::create_dir(&cfgs).unwrap();
    for (name, v) in configs {
        write_json(&cfgs, name, v);
    }
    let out = dir.path().join("out");
    let o = bench(
        &[
            "compare",
            "--configs",
            cfgs.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    (dir, o)
}

fn ranking(dir: &TempDir) -> Vec<Vec<String>> {
    fs::read_to_string(dir.path().join("out/ranking.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn compare_ranks_against_msgd() {
    let (dir, out) = compare_dir(&[
        ("1.json", config("dgs_samomentum")),
        ("2.json", config("msgd")),
        ("3.json", config("asgd")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = ranking(&dir);
    assert_eq!(rows.len(), 3);
    let msgd = rows.iter().find(|r| r[2] == "msgd").unwrap();
    assert_eq!(msgd[6].parse::<f64>().unwrap(), 0.0);
    assert_eq!(msgd[3], "1");
    let acc: f64 = msgd[4].parse().unwrap();
    for r in &rows {
        let delta: f64 = r[6].parse().unwrap();
        let a: f64 = r[4].parse().unwrap();
        assert!((delta - 100.0 * (a - acc)).abs() < 1e-9);
        assert!(dir.path().join(format!("out/{}.csv", r[1])).exists());
        assert!(dir.path().join(format!("out/{}.summary.json", r[1])).exists());
    }
    assert!(dir.path().join("out/ranking.md").exists());
}

#[test]
fn compare_duplicate_method_gives_identical_rows() {
    let (dir, out) = compare_dir(&[
        ("a.json", config("dgs_samomentum")),
        ("b.json", config("dgs_samomentum")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = ranking(&dir);
    assert_eq!(rows[0][2..], rows[1][2..]);
    let a = fs::read(dir.path().join("out/a.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("out/b.csv")).unwrap());
}

#[test]
fn compare_rejects_mismatched_tasks() {
    let mut other = config("asgd");
    other["task"]["seed"] = json!(4);
    let (_, out) = compare_dir(&[("a.json", config("msgd")), ("b.json", other)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("different tasks"), "{}", stderr(&out));
}

fn plot(inputs: &[&Path], out: &Path, y: &str) -> Output {
    let mut args = vec!["plot"];
    for i in inputs {
        args.extend(["--input", i.to_str().unwrap()]);
    }
    args.extend(["--out", out.to_str().unwrap(), "--x", "time", "--y", y]);
    bench(&args, &[])
}

#[test]
fn plot_emits_one_polyline_per_series_deterministically() {
    let dir = TempDir::new().unwrap();
    let (_, a) = run(dir.path(), &config("msgd"), "msgd", &[], &[]);
    let (_, b) = run(dir.path(), &config("dgs_samomentum"), "dgs", &[], &[]);
    let one = dir.path().join("one.svg");
    assert_eq!(code(&plot(&[&a], &one, "loss")), 0);
    let svg = fs::read_to_string(&one).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("<polyline").count(), 1);

    let two = dir.path().join("two.svg");
    assert_eq!(code(&plot(&[&a, &b], &two, "accuracy")), 0);
    let svg = fs::read_to_string(&two).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert_eq!(svg.matches(r#"class="legend""#).count(), 2);
    assert!(svg.contains(">msgd<") && svg.contains(">dgs<"));

    let again = dir.path().join("again.svg");
    plot(&[&a, &b], &again, "accuracy");
    assert_eq!(fs::read(&two).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn plot_of_empty_body_draws_axes_only() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("empty.csv");
    fs::write(
        &csv,
        "sim_time_ms,step,worker,staleness,loss,acc,bytes_up,bytes_down,cum_bytes_up,cum_bytes_down\n",
    )
    .unwrap();
    let svg = dir.path().join("empty.svg");
    assert_eq!(code(&plot(&[&csv], &svg, "bytes")), 0);
    let svg = fs::read_to_string(svg).unwrap();
    assert!(svg.contains(r#"class="axes""#));
    assert_eq!(svg.matches("<polyline").count(), 0);
}

#[test]
fn plot_rejects_unknown_column() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("odd.csv");
    fs::write(&csv, "sim_time_ms,step,loss\n1,1,0.5\n").unwrap();
    let out = plot(&[&csv], &dir.path().join("x.svg"), "accuracy");
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("unknown column `acc`"), "{}", stderr(&out));
}

#[test]
fn gradcheck_passes_shipped_tasks_and_catches_perturbation() {
    for task in ["quadratic", "logistic", "mlp-tanh"] {
        let out = bench(&["gradcheck", "--task", task, "--seed", "3"], &[]);
        assert_eq!(code(&out), 0, "{task}: {}", String::from_utf8_lossy(&out.stdout));
        assert_eq!(String::from_utf8_lossy(&out.stdout).matches("point ").count(), 10);
    }
    let out = bench(
        &["gradcheck", "--task", "logistic", "--seed", "3", "--perturb-gradient"],
        &[],
    );
    assert_eq!(code(&out), 4);
}
