//! End-to-end CLI tests: verbs, outputs, and the exit-code contract.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coop-dmpc"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

#[test]
fn run_exports_trace_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let started = std::time::Instant::now();
    let out = bin()
        .args(["run", "--scenario"])
        .arg(scenario("sync4.json"))
        .arg("--out-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(started.elapsed().as_secs_f64() < 10.0);
    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 31 * 4);
    let first_data_line = csv.lines().nth(1).unwrap();
    assert!(first_data_line.starts_with("0,1,1.5,0.9,0,0,"));
    assert!(dir.path().join("trace.json").exists());
    assert!(dir.path().join("diagnostics.json").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("diagnostics clean"), "{stdout}");
}

#[test]
fn check_accepts_shipped_scenarios() {
    for name in ["sync4.json", "pair_line.json", "solo.json", "formation3_offset.json"] {
        let out = bin()
            .args(["check", "--scenario"])
            .arg(scenario(name))
            .output()
            .unwrap();
        assert!(out.status.success(), "{name}");
    }
}

#[test]
fn invalid_scenario_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    // Self-loop edge.
    let text = std::fs::read_to_string(scenario("sync4.json"))
        .unwrap()
        .replace("\"all_to_all\"", "{\"edges\": [[1, 1]]}");
    std::fs::write(&bad, text).unwrap();
    let out = bin().args(["check", "--scenario"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Unknown key.
    let text = std::fs::read_to_string(scenario("sync4.json"))
        .unwrap()
        .replace("\"steps\": 30,", "\"steps\": 30, \"stepz\": 1,");
    std::fs::write(&bad, text).unwrap();
    let out = bin().args(["check", "--scenario"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("stepz"), "{stderr}");
}

#[test]
fn infeasible_initial_state_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("infeasible.json");
    let text = std::fs::read_to_string(scenario("sync4.json"))
        .unwrap()
        .replace("[1.5, 0.9, 0.0, 0.0]", "[10.0, 10.0, 0.0, 0.0]");
    std::fs::write(&bad, text).unwrap();
    let out = bin()
        .args(["run", "--scenario"])
        .arg(&bad)
        .arg("--out-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn repro_paper_emits_figures_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["repro-paper", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("reproduction summary: all checks passed"), "{stdout}");
    for name in ["fig_outputs_time.svg", "fig_outputs_phase.svg", "trace.csv", "trace.json"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
}

#[test]
fn plot_renders_from_trace_json() {
    let dir = tempfile::tempdir().unwrap();
    let run = bin()
        .args(["run", "--scenario"])
        .arg(scenario("pair_line.json"))
        .arg("--out-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(run.status.success());
    let svg_path = dir.path().join("phase.svg");
    let out = bin()
        .args(["plot", "--trace"])
        .arg(dir.path().join("trace.json"))
        .args(["--kind", "phase", "--components", "0,1", "--out"])
        .arg(&svg_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let svg = std::fs::read_to_string(&svg_path).unwrap();
    assert!(svg.starts_with("<svg") && svg.ends_with("</svg>"));
}

#[test]
fn skip_and_order_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run", "--scenario"])
        .arg(scenario("sync4.json"))
        .args(["--steps", "6", "--skip", "2:3", "--order", "4,3,2,1", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 7 * 4);
}

#[test]
fn qp_dump_writes_debug_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run", "--scenario"])
        .arg(scenario("solo.json"))
        .args(["--steps", "2", "--dump-qp", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dumps: Vec<_> = std::fs::read_dir(dir.path().join("qp_dumps"))
        .unwrap()
        .collect();
    // One dump per solve round: t = 0, 1, 2.
    assert_eq!(dumps.len(), 3);
}
