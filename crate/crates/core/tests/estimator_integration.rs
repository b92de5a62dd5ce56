//! Scenario-level behavior of the estimator variants: what the shipped
//! benchmark configurations actually do end to end, beyond the per-module
//! unit tests.

use mhe::harness::{load_scenario, load_metrics, run_scenario, run_to_dir, RunOutput, Scenario};
use std::path::PathBuf;
use std::process::Command;

fn scenario(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    load_scenario(&path).unwrap_or_else(|e| panic!("loading {name}: {e}"))
}

fn run(sc: &Scenario) -> RunOutput {
    run_scenario(sc).unwrap_or_else(|e| panic!("running {}: {e}", sc.name))
}

/// One parsed window-rate row of the trace.
struct GridRow {
    t: f64,
    accepted: bool,
    delta: Option<f64>,
}

fn grid_rows(csv: &str) -> Vec<GridRow> {
    csv.lines()
        .skip(1)
        .filter_map(|line| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells[1].is_empty() {
                return None;
            }
            Some(GridRow {
                t: cells[0].parse().expect("time cell"),
                accepted: cells[1] == "1",
                delta: if cells[2].is_empty() { None } else { Some(cells[2].parse().expect("delta cell")) },
            })
        })
        .collect()
}

#[test]
fn the_gate_concentrates_acceptances_on_signal_bursts() {
    let out = run(&scenario("runaway_adaptive.ini"));
    assert!(out.metrics.failure.is_none(), "run must stay clean: {:?}", out.metrics.failure);

    let rows = grid_rows(&out.csv);
    let accepted: Vec<&GridRow> = rows.iter().filter(|r| r.accepted).collect();
    let skipped: Vec<&GridRow> = rows.iter().filter(|r| !r.accepted).collect();
    assert!(
        skipped.len() as f64 >= 0.85 * rows.len() as f64,
        "the gate should skip most of the grid, skipped {}/{}",
        skipped.len(),
        rows.len()
    );

    // Scores: acceptances sit on burst flanks and peaks, skips on the quiet
    // recovery stretches, so the mean accepted score dwarfs the skipped one.
    let mean = |rs: &[&GridRow]| {
        let scored: Vec<f64> = rs.iter().filter_map(|r| r.delta).collect();
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    let mean_acc = mean(&accepted);
    let mean_skip = mean(&skipped);
    assert!(
        mean_acc >= 5.0 * mean_skip,
        "accepted samples should score far richer: {mean_acc:.3} vs {mean_skip:.3}"
    );

    // Bursts repeat to the end of the run; the gate must keep reopening.
    let last_accept = accepted.last().expect("some acceptances").t;
    assert!(last_accept > 18.0, "gate went quiet after t = {last_accept}");
}

#[test]
fn strobed_sampling_starves_the_window_of_signal() {
    let fast = run(&scenario("runaway_standard_nts5.ini"));
    let slow = run(&scenario("runaway_standard_nts38.ini"));

    let mean_delta = |out: &RunOutput| {
        let ds: Vec<f64> = grid_rows(&out.csv).iter().filter_map(|r| r.delta).collect();
        ds.iter().sum::<f64>() / ds.len() as f64
    };
    let fast_delta = mean_delta(&fast);
    let slow_delta = mean_delta(&slow);
    assert!(
        slow_delta <= 0.3 * fast_delta,
        "the strobed windows should look flat: {slow_delta:.3} vs {fast_delta:.3} at the fast rate"
    );
    assert!(
        slow.metrics.rmse.expect("rmse") > 5.0 * fast.metrics.rmse.expect("rmse"),
        "flat windows should translate into a much worse fit over the whole run"
    );
}

#[test]
fn filter_channels_substitute_for_window_span() {
    let long_plain = run(&scenario("vdp_standard.ini"));
    let short_filtered = run(&scenario("vdp_filtered.ini"));

    let err_ratio = short_filtered.metrics.final_err.expect("final error")
        / long_plain.metrics.final_err.expect("final error");
    assert!(
        err_ratio <= 2.0,
        "half the window with filter channels should hold the final error, got {err_ratio:.2}x"
    );
    assert!(
        short_filtered.metrics.integration_substeps < long_plain.metrics.integration_substeps,
        "the shorter window must integrate less: {} vs {}",
        short_filtered.metrics.integration_substeps,
        long_plain.metrics.integration_substeps
    );
}

#[test]
fn a_diverging_fit_is_logged_and_the_run_still_completes() {
    let mut sc = scenario("runaway_standard_nts5.ini");
    // A heat-release guess this far out makes the first window integrations
    // blow up; the run must log the events and still produce a full trace.
    sc.estimator.initial_guess = nalgebra::dvector![6.0, 0.02, 30.0];
    let out = run(&sc);

    assert!(out.metrics.failure.is_some(), "the blowup must be recorded");
    assert!(
        out.warnings.iter().any(|w| w.contains("failure event")),
        "warnings should mention the failure events: {:?}",
        out.warnings
    );
    let rows = out.csv.lines().count() as u64;
    assert_eq!(rows, out.metrics.base_instants + 1, "every instant still gets a trace row");
}

#[test]
fn the_cli_runs_and_compares_scenarios() {
    let bin = env!("CARGO_BIN_EXE_mhe");
    let scen_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let tmp = tempfile::tempdir().expect("tempdir");
    let out_a = tmp.path().join("vdp_standard");
    let out_b = tmp.path().join("vdp_filtered");

    for (file, dir) in [("vdp_standard.ini", &out_a), ("vdp_filtered.ini", &out_b)] {
        let status = Command::new(bin)
            .args(["run"])
            .arg(scen_dir.join(file))
            .arg("--out")
            .arg(dir)
            .status()
            .expect("spawn run");
        assert!(status.success(), "run {file} exited with {status}");
        assert!(dir.join("trace.csv").is_file());
        assert!(dir.join("metrics.kv").is_file());
    }

    // The files on disk carry the same numbers an in-process run yields.
    let written = load_metrics(&out_b).expect("metrics readable");
    let direct = run(&scenario("vdp_filtered.ini")).metrics;
    assert_eq!(written.integration_substeps, direct.integration_substeps);
    assert_eq!(written.optimizer_iterations, direct.optimizer_iterations);
    assert_eq!(written.final_err, direct.final_err);

    let output = Command::new(bin)
        .args(["compare"])
        .arg(&out_a)
        .arg(&out_b)
        .output()
        .expect("spawn compare");
    assert!(output.status.success(), "compare exited with {}", output.status);
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(
        text.contains("integration substeps") && text.contains("fewer"),
        "compare should report the reduction, got:\n{text}"
    );
}

#[test]
fn run_to_dir_writes_what_run_scenario_returns() {
    let sc = scenario("vdp_filtered.ini");
    let tmp = tempfile::tempdir().expect("tempdir");
    let dir = tmp.path().join("out");
    let out = run_to_dir(&sc, &dir).expect("run to dir");
    let csv = std::fs::read_to_string(dir.join("trace.csv")).expect("trace file");
    assert_eq!(csv, out.csv);
    let kv = std::fs::read_to_string(dir.join("metrics.kv")).expect("kv file");
    assert_eq!(kv, out.kv);
}
