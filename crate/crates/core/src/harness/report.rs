//! Run metrics: the per-run counter totals, their `key=value` file format,
//! and the cross-run comparison table.
//!
//! Counters are machine independent, so a metrics file written on one host
//! compares exactly against one written on another.

use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

pub const METRICS_FILE: &str = "metrics.kv";
pub const SUMMARY_FILE: &str = "metrics.txt";
pub const TRACE_FILE: &str = "trace.csv";

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{origin}: missing key '{key}'")]
    MissingKey { origin: String, key: &'static str },
    #[error("{origin}: bad value for '{key}': {detail}")]
    BadValue { origin: String, key: &'static str, detail: String },
    #[error("need at least two runs to compare, got {0}")]
    TooFewRuns(usize),
    #[error("run '{name}' is from family '{family}', baseline family is '{baseline}'")]
    FamilyMismatch { name: String, family: String, baseline: String },
}

/// Totals for one completed run. `final_err` and `rmse` are `None` when the
/// run produced no rows to measure.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub scenario: String,
    pub family: String,
    pub seed: u64,
    pub base_instants: u64,
    pub window_instants: u64,
    pub estimations_performed: u64,
    pub samples_skipped: u64,
    pub optimizer_iterations: u64,
    pub integration_substeps: u64,
    pub integ_fill: u64,
    pub integ_estimation: u64,
    pub integ_propagation: u64,
    pub final_err: Option<f64>,
    pub rmse: Option<f64>,
    pub failure: Option<String>,
}

impl RunMetrics {
    pub fn opt_plus_integ(&self) -> u64 {
        self.optimizer_iterations + self.integration_substeps
    }

    /// Machine-readable form, one `key=value` per line. Scenario parameters
    /// are echoed as `param.*` entries so a run directory is self-describing.
    pub fn to_kv(&self, params: &[(String, String)]) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        line("scenario", self.scenario.clone());
        line("family", self.family.clone());
        line("seed", format!("{}", self.seed));
        line("base_instants", format!("{}", self.base_instants));
        line("window_instants", format!("{}", self.window_instants));
        line("estimations_performed", format!("{}", self.estimations_performed));
        line("samples_skipped", format!("{}", self.samples_skipped));
        line("optimizer_iterations", format!("{}", self.optimizer_iterations));
        line("integration_substeps", format!("{}", self.integration_substeps));
        line("integ_fill", format!("{}", self.integ_fill));
        line("integ_estimation", format!("{}", self.integ_estimation));
        line("integ_propagation", format!("{}", self.integ_propagation));
        line("final_err", self.final_err.map_or(String::new(), |v| format!("{v}")));
        line("rmse", self.rmse.map_or(String::new(), |v| format!("{v}")));
        line("failure", self.failure.clone().unwrap_or_default());
        for (k, v) in params {
            line(k, v.clone());
        }
        out
    }

    /// Parses a metrics file. `origin` names the source in errors. Unknown
    /// and `param.*` keys are ignored so the format can grow.
    pub fn from_kv(text: &str, origin: &str) -> Result<Self, CompareError> {
        let mut map: BTreeMap<&str, &str> = BTreeMap::new();
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                map.insert(k.trim(), v.trim());
            }
        }
        let origin_err = |key| CompareError::MissingKey { origin: origin.to_string(), key };
        let get = |key: &'static str| map.get(key).copied().ok_or_else(|| origin_err(key));
        let parse_u64 = |key: &'static str| -> Result<u64, CompareError> {
            let raw = get(key)?;
            raw.parse().map_err(|e: std::num::ParseIntError| CompareError::BadValue {
                origin: origin.to_string(),
                key,
                detail: format!("{e} (value '{raw}')"),
            })
        };
        let parse_f64_opt = |key: &'static str| -> Result<Option<f64>, CompareError> {
            let raw = get(key)?;
            if raw.is_empty() {
                return Ok(None);
            }
            raw.parse().map(Some).map_err(|e: std::num::ParseFloatError| {
                CompareError::BadValue {
                    origin: origin.to_string(),
                    key,
                    detail: format!("{e} (value '{raw}')"),
                }
            })
        };
        let failure = get("failure")?;
        Ok(RunMetrics {
            scenario: get("scenario")?.to_string(),
            family: get("family")?.to_string(),
            seed: parse_u64("seed")?,
            base_instants: parse_u64("base_instants")?,
            window_instants: parse_u64("window_instants")?,
            estimations_performed: parse_u64("estimations_performed")?,
            samples_skipped: parse_u64("samples_skipped")?,
            optimizer_iterations: parse_u64("optimizer_iterations")?,
            integration_substeps: parse_u64("integration_substeps")?,
            integ_fill: parse_u64("integ_fill")?,
            integ_estimation: parse_u64("integ_estimation")?,
            integ_propagation: parse_u64("integ_propagation")?,
            final_err: parse_f64_opt("final_err")?,
            rmse: parse_f64_opt("rmse")?,
            failure: if failure.is_empty() { None } else { Some(failure.to_string()) },
        })
    }

    /// Human-readable summary of one run.
    pub fn summary(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6e}"));
        let mut out = String::new();
        out.push_str(&format!(
            "scenario: {} (family {}, seed {})\n",
            self.scenario, self.family, self.seed
        ));
        out.push_str(&format!(
            "base instants: {} ({} at the window rate)\n",
            self.base_instants, self.window_instants
        ));
        out.push_str(&format!(
            "estimations: {}, skipped: {}\n",
            self.estimations_performed, self.samples_skipped
        ));
        out.push_str(&format!("optimizer iterations: {}\n", self.optimizer_iterations));
        out.push_str(&format!(
            "integration substeps: {} (fill {}, estimation {}, propagation {})\n",
            self.integration_substeps, self.integ_fill, self.integ_estimation, self.integ_propagation
        ));
        out.push_str(&format!("final error: {}\n", fmt_opt(self.final_err)));
        out.push_str(&format!("rmse: {}\n", fmt_opt(self.rmse)));
        out.push_str(&format!(
            "failure: {}\n",
            self.failure.as_deref().unwrap_or("none")
        ));
        out
    }
}

pub fn load_metrics(dir: &Path) -> Result<RunMetrics, CompareError> {
    let path = dir.join(METRICS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|source| CompareError::Io {
        path: path.display().to_string(),
        source,
    })?;
    RunMetrics::from_kv(&text, &path.display().to_string())
}

/// Side-by-side comparison. The first run is the baseline; all runs must
/// belong to the same scenario family.
pub fn compare_runs(runs: &[RunMetrics]) -> Result<String, CompareError> {
    if runs.len() < 2 {
        return Err(CompareError::TooFewRuns(runs.len()));
    }
    let base = &runs[0];
    for run in &runs[1..] {
        if run.family != base.family {
            return Err(CompareError::FamilyMismatch {
                name: run.scenario.clone(),
                family: run.family.clone(),
                baseline: base.family.clone(),
            });
        }
    }

    let fmt_opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4e}"));
    let name_w = runs.iter().map(|r| r.scenario.len()).max().unwrap_or(8).max("scenario".len());

    let mut out = String::new();
    out.push_str(&format!("family: {}    baseline: {}\n\n", base.family, base.scenario));
    out.push_str(&format!(
        "{:<name_w$}  {:>11} {:>8} {:>10} {:>14} {:>12} {:>11} {:>11}\n",
        "scenario", "estimations", "skipped", "opt_iters", "integ_substeps", "opt+integ", "final_err", "rmse"
    ));
    for run in runs {
        out.push_str(&format!(
            "{:<name_w$}  {:>11} {:>8} {:>10} {:>14} {:>12} {:>11} {:>11}\n",
            run.scenario,
            run.estimations_performed,
            run.samples_skipped,
            run.optimizer_iterations,
            run.integration_substeps,
            run.opt_plus_integ(),
            fmt_opt(run.final_err),
            fmt_opt(run.rmse),
        ));
    }

    for run in &runs[1..] {
        out.push('\n');
        out.push_str(&format!("{} vs {}:\n", run.scenario, base.scenario));
        out.push_str(&format!(
            "  optimizer iterations: {}\n",
            reduction(base.optimizer_iterations, run.optimizer_iterations)
        ));
        out.push_str(&format!(
            "  integration substeps: {}\n",
            reduction(base.integration_substeps, run.integration_substeps)
        ));
        out.push_str(&format!(
            "  optimizer + integration: {}\n",
            reduction(base.opt_plus_integ(), run.opt_plus_integ())
        ));
        out.push_str(&format!("  final error ratio: {}\n", ratio(base.final_err, run.final_err)));
        out.push_str(&format!("  rmse ratio: {}\n", ratio(base.rmse, run.rmse)));
    }
    Ok(out)
}

fn reduction(base: u64, candidate: u64) -> String {
    if base == 0 {
        return "n/a (baseline is zero)".to_string();
    }
    let pct = 100.0 * (base as f64 - candidate as f64) / base as f64;
    if pct >= 0.0 {
        format!("{pct:.1}% fewer")
    } else {
        format!("{:.1}% more", -pct)
    }
}

fn ratio(base: Option<f64>, candidate: Option<f64>) -> String {
    match (base, candidate) {
        (Some(b), Some(c)) if b > 0.0 => format!("{:.3}x", c / b),
        _ => "n/a".to_string(),
    }
}
