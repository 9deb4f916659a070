use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jflow_cli::config::RunConfig;
use serde_json::{json, Value};
use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn jflow(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jflow"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("jflow runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

/// Fresh directory with the sample polytopes copied in.
fn workdir() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        std::fs::copy(&path, dir.path().join(path.file_name().unwrap())).unwrap();
    }
    dir
}

fn write_config(dir: &Path, name: &str, value: &Value) -> String {
    std::fs::write(dir.join(name), serde_json::to_string_pretty(value).unwrap()).unwrap();
    name.to_string()
}

#[test]
fn stability_exit_codes() {
    let dir = workdir();
    let d = dir.path();
    let run = |a: &str| {
        jflow(
            &[
                "stability",
                "--p",
                "trapezoid_2.txt",
                "--q",
                &format!("trapezoid_{a}.txt"),
            ],
            d,
        )
    };
    assert_eq!(code(&run("2")), 0);
    let out = run("1.1");
    assert_eq!(code(&out), 2);
    let report = stdout_json(&out);
    let violated: Vec<&Value> = report["per_face"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|f| f["verdict"] == "violated")
        .collect();
    assert_eq!(violated.len(), 1);
    // facet 3 is {y1 + y2 = 1}
    assert_eq!(violated[0]["facet_ids"], json!([3]));
    assert_eq!(violated[0]["lhs_exact"], "1");
    assert_eq!(report["nc_exact"], "0.8");
    assert_eq!(code(&run("1.25")), 3);
    let out = jflow(
        &[
            "stability",
            "--p",
            "trapezoid_2.txt",
            "--q",
            "trapezoid_1.25.txt",
            "--out",
            "r.json",
        ],
        d,
    );
    assert_eq!(code(&out), 3);
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(saved, stdout_json(&out));
}

#[test]
fn malformed_input_exits_one() {
    let dir = workdir();
    let d = dir.path();
    std::fs::write(d.join("bad.txt"), "dim 2\n1 0 0\n0 1 x\n-1 -1 2\n1 1 -1\n").unwrap();
    let out = jflow(&["stability", "--p", "bad.txt", "--q", "trapezoid_2.txt"], d);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("facet 1"), "{err}");
    std::fs::write(d.join("nd.txt"), "dim 2\n1 0 0\n0 1 0\n-1 -2 2\n").unwrap();
    let out = jflow(&["stability", "--p", "nd.txt", "--q", "nd.txt"], d);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("vertex"));
    assert_eq!(
        code(&jflow(
            &["stability", "--p", "missing.txt", "--q", "trapezoid_2.txt"],
            d
        )),
        1
    );
    let out = jflow(&["flow", "--p", "bad.txt", "--q", "trapezoid_2.txt"], d);
    assert_eq!(code(&out), 1);
}

#[test]
fn flow_parameter_ranges_are_checked() {
    let dir = workdir();
    let d = dir.path();
    let base = ["flow", "--p", "trapezoid_2.txt", "--q", "trapezoid_2.txt"];
    for extra in [
        &["--cfl", "1.5"][..],
        &["--h", "-0.1"],
        &["--t-end", "0"],
        &["--h", "0.5"],
        &["--u0", "y1 +"],
    ] {
        let args: Vec<&str> = base.iter().chain(extra).copied().collect();
        let out = jflow(&args, d);
        assert_eq!(code(&out), 1, "{extra:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let bad = write_config(
        d,
        "bad.json",
        &json!({"command": "flow", "p": "trapezoid_2.txt", "q": "trapezoid_2.txt", "solver": {"hh": 1}}),
    );
    assert_eq!(code(&jflow(&["flow", "--config", &bad], d)), 1);
    let out = Command::new(env!("CARGO_BIN_EXE_jflow"))
        .args(["calabi", "--grid", "65", "--t-end", "0.1"])
        .env("JFLOW_THREADS", "zero")
        .current_dir(d)
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn flow_outcomes_map_to_exit_codes() {
    let dir = workdir();
    let d = dir.path();
    let out = jflow(
        &["flow", "--config", "flow_equal_classes.json", "--state", "final.json"],
        d,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rec = stdout_json(&out);
    assert_eq!(rec["outcome"]["tag"], "Converged");
    assert!(rec["outcome"]["static_residual"].as_f64().unwrap() < 1e-4);
    let csv = std::fs::read_to_string(d.join("equal_classes.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("t,dt,energy,dissipation"));
    assert_eq!(lines.count() as u64, rec["diagnostics"].as_u64().unwrap());
    let state: Value = serde_json::from_str(&std::fs::read_to_string(d.join("final.json")).unwrap()).unwrap();
    for node in state["nodes"].as_array().unwrap() {
        assert!((node["trace"].as_f64().unwrap() - 2.0).abs() < 1e-4);
    }

    let cfg = json!({
        "command": "flow",
        "p": "trapezoid_2.txt",
        "q": "trapezoid_1.1.txt",
        "u0": {"v": "0.1*y1*y2 + 0.05*y1^2"},
        "solver": {"h": 0.125, "t_end": 12.0, "diag_every": 0.1},
        "tolerances": {"window_degenerate": 40}
    });
    let name = write_config(d, "degenerate.json", &cfg);
    let out = jflow(&["flow", "--config", &name], d);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    let range = &stdout_json(&out)["outcome"]["degenerate_sum_range"];
    assert!(range[0].as_f64().unwrap() >= 1.0 - 1e-9 && range[1].as_f64().unwrap() < 1.2835);

    let short = write_config(
        d,
        "short.json",
        &json!({
            "command": "flow", "p": "trapezoid_2.txt", "q": "trapezoid_1.5.txt",
            "u0": {"v": "0.1*y1*y2"}, "solver": {"h": 0.125, "t_end": 0.05, "diag_every": 0.05}
        }),
    );
    assert_eq!(code(&jflow(&["flow", "--config", &short], d)), 5);

    let fail = write_config(
        d,
        "fail.json",
        &json!({
            "command": "flow", "p": "trapezoid_2.txt", "q": "trapezoid_1.5.txt",
            "u0": {"v": "0.1*y1*y2"},
            "solver": {"h": 0.125, "dt": 50.0, "max_halvings": 0, "t_end": 100.0, "diag_every": 100.0},
            "outputs": {"diagnostics": "partial.csv"}
        }),
    );
    let out = jflow(&["flow", "--config", &fail], d);
    assert_eq!(code(&out), 6);
    assert!(String::from_utf8_lossy(&out.stderr).contains("step failure"));
    assert_eq!(
        std::fs::read_to_string(d.join("partial.csv")).unwrap().lines().count(),
        2
    );
}

#[test]
fn calabi_summaries() {
    let dir = workdir();
    let d = dir.path();
    let out = jflow(
        &[
            "calabi", "--n", "2", "--a", "1.1", "--b", "2", "--grid", "513", "--t-end", "5", "--out", "c3.csv",
        ],
        d,
    );
    assert_eq!(code(&out), 0);
    let s = stdout_json(&out);
    assert_eq!(s["case"], "Case3");
    assert!((s["lambda"].as_f64().unwrap() - 1.2834849).abs() < 1e-6);
    assert_eq!(s["nc_exact"], "0.8");
    let csv = std::fs::read_to_string(d.join("c3.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,B,f,trace,det");
    // snapshots at t = 0, 0.5, …, 5
    assert_eq!(csv.lines().count(), 1 + 11 * 513);
    let out = jflow(&["calabi", "--a", "2", "--b", "2", "--grid", "257", "--t-end", "1"], d);
    assert_eq!(code(&out), 0);
    let s = stdout_json(&out);
    assert_eq!(s["case"], "Case1");
    assert!(s["lambda"].is_null());
    assert_eq!(
        stdout_json(&jflow(&["calabi", "--a", "1.25", "--grid", "65", "--t-end", "0.1"], d))["case"],
        "Case2"
    );
    for a in ["1", "0.5", "x"] {
        assert_eq!(code(&jflow(&["calabi", "--a", a, "--b", "2"], d)), 1, "a = {a}");
    }
}

#[test]
fn outputs_are_deterministic() {
    let dir = workdir();
    let d = dir.path();
    let calabi = |threads: &str, out: &str| {
        let st = Command::new(env!("CARGO_BIN_EXE_jflow"))
            .args([
                "calabi", "--a", "1.1", "--grid", "257", "--t-end", "2", "--every", "0.25", "--out", out,
            ])
            .env("JFLOW_THREADS", threads)
            .current_dir(d)
            .output()
            .unwrap();
        assert!(st.status.success());
        std::fs::read(d.join(out)).unwrap()
    };
    assert_eq!(calabi("1", "a.csv"), calabi("3", "b.csv"));
    let flow = |threads: &str, out: &str| {
        let st = Command::new(env!("CARGO_BIN_EXE_jflow"))
            .args([
                "flow",
                "--p",
                "trapezoid_2.txt",
                "--q",
                "trapezoid_1.5.txt",
                "--u0",
                "0.1*y1*y2",
            ])
            .args([
                "--h",
                "0.125",
                "--t-end",
                "0.2",
                "--diag-every",
                "0.05",
                "--track",
                "0.4,0.8",
                "--diagnostics",
                out,
            ])
            .env("JFLOW_THREADS", threads)
            .current_dir(d)
            .output()
            .unwrap();
        assert_eq!(st.status.code(), Some(5));
        std::fs::read(d.join(out)).unwrap()
    };
    assert_eq!(flow("1", "f1.csv"), flow("4", "f4.csv"));
}

#[test]
fn report_round_trips() {
    let dir = workdir();
    let d = dir.path();
    let original = RunConfig::load(&d.join("flow_equal_classes.json")).unwrap();
    assert_eq!(RunConfig::from_json(&original.to_json()).unwrap(), original);
    let out = jflow(&["report", "--config", "flow_equal_classes.json"], d);
    assert_eq!(code(&out), 0);
    let echoed = RunConfig::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(echoed, original);
    std::fs::write(d.join("echo.json"), &out.stdout).unwrap();
    let again = jflow(&["report", "--config", "echo.json"], d);
    assert_eq!(again.stdout, out.stdout);
    let mut odd = original.clone();
    odd.solver.h = 0.1 + 0.2;
    odd.solver.cfl = 1.0 / 3.0;
    odd.tracked_z = vec![vec![std::f64::consts::PI / 4.0, 1e-17]];
    assert_eq!(RunConfig::from_json(&odd.to_json()).unwrap(), odd);
    let bad = write_config(
        d,
        "bad.json",
        &json!({"command": "flow", "p": "nowhere.txt", "q": "trapezoid_2.txt"}),
    );
    assert_eq!(code(&jflow(&["report", "--config", &bad], d)), 1);
}
