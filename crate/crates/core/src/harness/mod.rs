//! Scenario runner: simulates the true plant, feeds noisy samples to an
//! estimator, and reports the trace plus machine-independent cost counters.
//!
//! One run produces three artifacts: a CSV trace with one row per base
//! sampling instant, a `key=value` metrics file, and a plain-text summary.
//! Every random draw comes from a seeded generator, so a rerun of the same
//! scenario reproduces all three byte for byte.

pub mod report;
pub mod scenario;

pub use report::{
    compare_runs, load_metrics, CompareError, RunMetrics, METRICS_FILE, SUMMARY_FILE, TRACE_FILE,
};
pub use scenario::{
    load_scenario, parse_scenario, EstimatorSpec, InputSpec, Scenario, ScenarioError,
};

use crate::dynamics::{make_model, simulate, DynamicsError, ModelError};
use crate::estimators::{ConfigError, Estimator, EstimatorError};
use crate::metrics::Counters;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("estimator configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("input signal: {0}")]
    Input(DynamicsError),
    #[error("truth simulation: {0}")]
    Truth(DynamicsError),
    #[error("estimator: {0}")]
    Estimator(#[from] EstimatorError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Everything one run yields. `csv`, `kv`, and `summary` are the exact file
/// bodies `run_to_dir` writes.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub csv: String,
    pub kv: String,
    pub summary: String,
    pub warnings: Vec<String>,
}

pub fn run_scenario(sc: &Scenario) -> Result<RunOutput, RunError> {
    let truth_build = make_model(sc.model_kind, &sc.model_params)?;
    let est_build = make_model(sc.model_kind, &sc.model_params)?;
    let mut warnings = truth_build.warnings.clone();
    let truth_model = truth_build.model;
    let n = truth_model.state_dim();

    let controls = sc.input.to_signal(sc.t0, sc.ts).map_err(RunError::Input)?;
    let n_inst = sc.base_instants();

    let mut csv = String::from("t,accepted,delta,d_V,cost_pre,cost_post,err_norm");
    for i in 1..=n {
        csv.push_str(&format!(",xhat_{i}"));
    }
    for i in 1..=n {
        csv.push_str(&format!(",x_{i}"));
    }
    csv.push_str(",integ_steps,opt_iters\n");

    if n_inst == 0 {
        let metrics = RunMetrics {
            scenario: sc.name.clone(),
            family: sc.family.clone(),
            seed: sc.seed,
            base_instants: 0,
            window_instants: 0,
            estimations_performed: 0,
            samples_skipped: 0,
            optimizer_iterations: 0,
            integration_substeps: 0,
            integ_fill: 0,
            integ_estimation: 0,
            integ_propagation: 0,
            final_err: None,
            rmse: None,
            failure: None,
        };
        let kv = metrics.to_kv(&sc.param_lines());
        let summary = metrics.summary();
        return Ok(RunOutput { metrics, csv, kv, summary, warnings });
    }

    // Truth trajectory over the closed grid [t0, t0 + (n_inst-1) ts]. Its
    // integration effort is instrumentation, not estimator cost, so it runs
    // on a throwaway counter.
    let t_last = sc.t0 + (n_inst - 1) as f64 * sc.ts;
    let truth_counters = Counters::new();
    let truth = simulate(
        &truth_model,
        &sc.x0,
        &controls,
        sc.t0,
        t_last,
        sc.ts,
        &sc.integrator,
        &truth_counters,
    )
    .map_err(RunError::Truth)?;

    // Measurement noise is drawn for every base instant up front, in one
    // fixed order, so acceptance gating cannot change later draws.
    let mut rng = ChaCha12Rng::seed_from_u64(sc.seed);
    let mut measured: Vec<DVector<f64>> = Vec::with_capacity(n_inst as usize);
    for i in 0..n_inst as usize {
        let mut y = truth.outputs[i].clone();
        if sc.noise_amplitude > 0.0 {
            for v in y.iter_mut() {
                *v += sc.noise_amplitude * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
        measured.push(y);
    }

    let cfg = sc.mhe_config()?;
    let downsample = cfg.downsample;
    let mut estimator = Estimator::new(est_build.model, cfg, sc.integrator, sc.ts)?;
    let probe_counters = Counters::new();

    let mut window_instants: u64 = 0;
    let mut sq_err_sum = 0.0;
    let mut final_err = 0.0;
    let mut prev = estimator.counters().snapshot();
    let mut prev_probe = probe_counters.snapshot();

    for i in 0..n_inst as usize {
        let t = sc.t0 + i as f64 * sc.ts;
        let u = controls.value_at(t).map_err(RunError::Input)?.clone();

        let on_grid = i % downsample == 0;
        let (x_hat, rec) = if on_grid {
            window_instants += 1;
            let rec = estimator.step(t, &measured[i], &u)?;
            (rec.x_hat.clone(), Some(rec))
        } else {
            estimator.record_control(t, &u)?;
            let x = match estimator.intersample_estimate(t, &probe_counters) {
                Ok(x) => x,
                // A diverging open-loop probe only affects this row's
                // readout; the estimator itself is untouched.
                Err(_) => estimator
                    .current_estimate()
                    .map(|(_, x)| x.clone())
                    .unwrap_or_else(|| DVector::zeros(n)),
            };
            (x, None)
        };

        let err_norm = (&x_hat - &truth.states[i]).norm();
        sq_err_sum += err_norm * err_norm;
        final_err = err_norm;

        let snap = estimator.counters().snapshot();
        let probe_snap = probe_counters.snapshot();
        let integ_delta = (snap.integ_total() - prev.integ_total())
            + (probe_snap.integ_total() - prev_probe.integ_total());
        let opt_delta = snap.opt_iterations - prev.opt_iterations;
        prev = snap;
        prev_probe = probe_snap;

        let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        let (accepted, delta, d_v, cost_pre, cost_post) = match &rec {
            Some(r) => (
                if r.accepted { "1".to_string() } else { "0".to_string() },
                fmt_opt(r.delta),
                fmt_opt(r.d_v),
                fmt_opt(r.cost_pre),
                fmt_opt(r.cost_post),
            ),
            None => Default::default(),
        };
        csv.push_str(&format!("{t},{accepted},{delta},{d_v},{cost_pre},{cost_post},{err_norm}"));
        for v in x_hat.iter() {
            csv.push_str(&format!(",{v}"));
        }
        for v in truth.states[i].iter() {
            csv.push_str(&format!(",{v}"));
        }
        csv.push_str(&format!(",{integ_delta},{opt_delta}\n"));
    }

    if let Some(msg) = estimator.failure() {
        warnings.push(format!(
            "estimator recorded {} failure event(s); first: {msg}",
            estimator.failure_count()
        ));
    }

    let snap = estimator.counters().snapshot();
    let metrics = RunMetrics {
        scenario: sc.name.clone(),
        family: sc.family.clone(),
        seed: sc.seed,
        base_instants: n_inst,
        window_instants,
        estimations_performed: snap.estimations,
        samples_skipped: snap.skipped,
        optimizer_iterations: snap.opt_iterations,
        integration_substeps: snap.integ_total(),
        integ_fill: snap.integ_fill,
        integ_estimation: snap.integ_estimation,
        integ_propagation: snap.integ_propagation,
        final_err: Some(final_err),
        rmse: Some((sq_err_sum / n_inst as f64).sqrt()),
        failure: estimator.failure().map(str::to_string),
    };
    let kv = metrics.to_kv(&sc.param_lines());
    let summary = metrics.summary();
    Ok(RunOutput { metrics, csv, kv, summary, warnings })
}

/// Runs the scenario and writes `trace.csv`, `metrics.kv`, and `metrics.txt`
/// into `dir`, creating it first.
pub fn run_to_dir(sc: &Scenario, dir: &Path) -> Result<RunOutput, RunError> {
    let out = run_scenario(sc)?;
    std::fs::create_dir_all(dir).map_err(|source| RunError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    for (name, body) in
        [(TRACE_FILE, &out.csv), (METRICS_FILE, &out.kv), (SUMMARY_FILE, &out.summary)]
    {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|source| RunError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(out)
}
