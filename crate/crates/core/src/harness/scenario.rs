//! Scenario files: flat `key = value` sections describing one benchmark run.
//!
//! A scenario pins everything a run needs (model, true initial state, input
//! signal, noise, integrator resolution, estimator tuning, RNG seed), so two
//! loads of the same file produce byte-identical results. Parsing is strict:
//! unknown keys and sections are rejected, and missing required keys are
//! reported together rather than one at a time.

use crate::dynamics::{
    make_model, ControlSignal, DynamicsError, IntegratorConfig, IntegratorMethod, ModelError,
    ModelKind, ModelParams, ParamValue,
};
use crate::estimators::{MheConfig, MheMode};
use crate::filters::{DiscreteFilter, FilterBank, FilterKind};
use crate::optimizer::{OptimizerConfig, OptimizerKind};
use nalgebra::{DMatrix, DVector};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: expected 'key = value' or '[section]', got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("line {line}: '{key}' appears before any [section] header")]
    KeyOutsideSection { line: usize, key: String },
    #[error("line {line}: section [{name}] is declared twice")]
    DuplicateSection { line: usize, name: String },
    #[error("line {line}: key '{key}' appears twice in [{section}]")]
    DuplicateKey { line: usize, section: String, key: String },
    #[error("missing section [{0}]")]
    MissingSection(&'static str),
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("[{section}] is missing required keys: {keys}")]
    MissingKeys { section: &'static str, keys: String },
    #[error("[{section}] has unknown keys: {keys}")]
    UnknownKeys { section: &'static str, keys: String },
    #[error("[{section}] {key}: {detail}")]
    BadValue { section: &'static str, key: String, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("truth grid is empty: tf = {tf} must exceed t0 = {t0}")]
    EmptyGrid { t0: f64, tf: f64 },
}

/// Input signal over the run, held constant between base instants.
#[derive(Clone, Debug)]
pub enum InputSpec {
    Constant(DVector<f64>),
    /// Piecewise-constant table; each time stamp starts a new hold value.
    Table { times: Vec<f64>, values: Vec<DVector<f64>> },
}

impl InputSpec {
    pub fn width(&self) -> usize {
        match self {
            InputSpec::Constant(v) => v.len(),
            InputSpec::Table { values, .. } => values.first().map_or(0, |v| v.len()),
        }
    }

    pub fn to_signal(&self, t0: f64, ts: f64) -> Result<ControlSignal, DynamicsError> {
        match self {
            InputSpec::Constant(v) => Ok(ControlSignal::constant(t0, v.clone(), ts)),
            InputSpec::Table { times, values } => ControlSignal::from_table(
                times.iter().copied().zip(values.iter().cloned()).collect(),
                ts,
            ),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EstimatorSpec {
    pub mode: MheMode,
    pub window: usize,
    pub downsample: usize,
    pub iterations: usize,
    pub optimizer_kind: OptimizerKind,
    pub step_size: f64,
    pub damping: f64,
    pub fd_step: f64,
    pub delta_min: f64,
    pub d_min: f64,
    pub n_max: f64,
    pub initial_guess: DVector<f64>,
    pub filters: Vec<String>,
    pub filter_smoothing: f64,
    pub filter_leak: f64,
    pub filter_weight: f64,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub family: String,
    pub seed: u64,
    pub model_kind: ModelKind,
    pub model_params: ModelParams,
    pub x0: DVector<f64>,
    pub t0: f64,
    pub tf: f64,
    pub ts: f64,
    pub input: InputSpec,
    pub noise_amplitude: f64,
    pub integrator: IntegratorConfig,
    pub estimator: EstimatorSpec,
}

impl Scenario {
    /// Base instants in the half-open run interval `[t0, tf)`.
    pub fn base_instants(&self) -> u64 {
        let steps = (self.tf - self.t0) / self.ts - 1e-9;
        if steps <= 0.0 {
            0
        } else {
            steps.ceil() as u64
        }
    }

    /// Estimator configuration with the filter bank clocked at the window
    /// rate `downsample * ts`.
    pub fn mhe_config(&self) -> Result<MheConfig, ScenarioError> {
        let e = &self.estimator;
        let grid_period = self.ts * e.downsample.max(1) as f64;
        let mut members = Vec::with_capacity(e.filters.len());
        for name in &e.filters {
            let kind = filter_kind(name, e).ok_or_else(|| ScenarioError::BadValue {
                section: "estimator",
                key: "filters".into(),
                detail: format!("unknown filter '{name}'"),
            })?;
            let filter = DiscreteFilter::new(kind, grid_period).map_err(|err| {
                ScenarioError::BadValue {
                    section: "estimator",
                    key: "filters".into(),
                    detail: err.to_string(),
                }
            })?;
            members.push(filter);
        }
        let mut optimizer = OptimizerConfig::new(e.optimizer_kind, e.step_size, e.iterations);
        optimizer.damping = e.damping;
        optimizer.fd_step = e.fd_step;
        let mut cfg = MheConfig::new(e.mode, e.window, e.downsample, optimizer, e.initial_guess.clone());
        cfg.delta_min = e.delta_min;
        cfg.d_min = e.d_min;
        cfg.n_max = e.n_max;
        cfg.filters = FilterBank::new(members);
        cfg.filter_weight = e.filter_weight;
        Ok(cfg)
    }

    /// Every configuration value as flat `(key, value)` pairs, echoed into
    /// the machine-readable metrics file.
    pub fn param_lines(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: String| out.push((format!("param.{k}"), v));
        push("model.kind", self.model_kind.name().to_string());
        for (k, v) in &self.model_params {
            push(&format!("model.{k}"), v.to_string());
        }
        push("truth.x0", join_vector(&self.x0));
        push("truth.t0", format!("{}", self.t0));
        push("truth.tf", format!("{}", self.tf));
        push("truth.ts", format!("{}", self.ts));
        match &self.input {
            InputSpec::Constant(v) => {
                push("input.kind", "constant".into());
                push("input.value", join_vector(v));
            }
            InputSpec::Table { times, values } => {
                push("input.kind", "table".into());
                push(
                    "input.times",
                    times.iter().map(|t| format!("{t}")).collect::<Vec<_>>().join(" "),
                );
                push(
                    "input.values",
                    values.iter().map(|v| join_vector(v)).collect::<Vec<_>>().join("; "),
                );
            }
        }
        push("noise.amplitude", format!("{}", self.noise_amplitude));
        push("integrator.method", self.integrator.method.name().to_string());
        push(
            "integrator.substeps_per_ts",
            format!("{}", self.integrator.substeps_per_period),
        );
        let e = &self.estimator;
        push("estimator.mode", e.mode.name().to_string());
        push("estimator.window", format!("{}", e.window));
        push("estimator.downsample", format!("{}", e.downsample));
        push("estimator.iterations", format!("{}", e.iterations));
        push("estimator.optimizer", e.optimizer_kind.name().to_string());
        push("estimator.step_size", format!("{}", e.step_size));
        push("estimator.damping", format!("{}", e.damping));
        push("estimator.fd_step", format!("{}", e.fd_step));
        push("estimator.delta_min", format!("{}", e.delta_min));
        push("estimator.d_min", format!("{}", e.d_min));
        push("estimator.n_max", format!("{}", e.n_max));
        push("estimator.initial_guess", join_vector(&e.initial_guess));
        push("estimator.filters", e.filters.join(" "));
        push("estimator.filter_smoothing", format!("{}", e.filter_smoothing));
        push("estimator.filter_leak", format!("{}", e.filter_leak));
        push("estimator.filter_weight", format!("{}", e.filter_weight));
        out
    }
}

fn filter_kind(name: &str, e: &EstimatorSpec) -> Option<FilterKind> {
    match name {
        "dirty_derivative" => Some(FilterKind::DirtyDerivative { smoothing: e.filter_smoothing }),
        "lossy_integrator" => Some(FilterKind::LossyIntegrator { leak: e.filter_leak }),
        _ => None,
    }
}

fn join_vector(v: &DVector<f64>) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ")
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&text)
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let sections = split_sections(text)?;
    const KNOWN: [&str; 7] =
        ["scenario", "model", "truth", "input", "noise", "integrator", "estimator"];
    for name in sections.keys() {
        if !KNOWN.contains(&name.as_str()) {
            return Err(ScenarioError::UnknownSection(name.clone()));
        }
    }
    for required in ["scenario", "model", "truth", "input", "integrator", "estimator"] {
        if !sections.contains_key(required) {
            return Err(ScenarioError::MissingSection(required));
        }
    }

    let mut r = SectionReader::new("scenario", sections.get("scenario"));
    let name = r.string_req("name");
    let family = r.string_req("family");
    let seed = r.u64_req("seed");
    r.finish()?;

    let (model_kind, model_params) = read_model(sections.get("model").expect("checked above"))?;

    let mut r = SectionReader::new("truth", sections.get("truth"));
    let x0 = r.vector_req("x0");
    let t0 = r.f64_req("t0");
    let tf = r.f64_req("tf");
    let ts = r.f64_req("ts");
    r.finish()?;
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(bad("truth", "ts", format!("must be positive and finite, got {ts}")));
    }
    if !(tf > t0) {
        return Err(ScenarioError::EmptyGrid { t0, tf });
    }

    let mut r = SectionReader::new("input", sections.get("input"));
    let input_kind = r.string_req("kind");
    let input = match input_kind.as_str() {
        "constant" => {
            let value = r.vector_req("value");
            r.finish()?;
            InputSpec::Constant(value)
        }
        "table" => {
            let times = r.f64_list_req("times");
            let values_raw = r.string_req("values");
            r.finish()?;
            let values = parse_table_values(&values_raw)?;
            if values.len() != times.len() {
                return Err(bad(
                    "input",
                    "values",
                    format!("{} rows for {} time stamps", values.len(), times.len()),
                ));
            }
            if times.first().is_some_and(|&first| first > t0) {
                return Err(bad(
                    "input",
                    "times",
                    format!("first stamp {} leaves the input undefined at t0 = {t0}", times[0]),
                ));
            }
            InputSpec::Table { times, values }
        }
        other => {
            r.finish()?;
            return Err(bad("input", "kind", format!("expected constant or table, got '{other}'")));
        }
    };

    let noise_amplitude = match sections.get("noise") {
        Some(sec) => {
            let mut r = SectionReader::new("noise", Some(sec));
            let amp = r.f64_or("amplitude", 0.0);
            r.finish()?;
            if !(amp >= 0.0 && amp.is_finite()) {
                return Err(bad("noise", "amplitude", format!("must be nonnegative, got {amp}")));
            }
            amp
        }
        None => 0.0,
    };

    let mut r = SectionReader::new("integrator", sections.get("integrator"));
    let method_name = r.string_or("method", "rk4");
    let substeps = r.u64_req("substeps_per_ts");
    r.finish()?;
    let method = match method_name.as_str() {
        "rk4" => IntegratorMethod::Rk4,
        "euler" => IntegratorMethod::Euler,
        other => {
            return Err(bad("integrator", "method", format!("expected rk4 or euler, got '{other}'")))
        }
    };
    if substeps == 0 || substeps > u32::MAX as u64 {
        return Err(bad("integrator", "substeps_per_ts", format!("must be in 1..=2^32-1, got {substeps}")));
    }
    let integrator = IntegratorConfig { method, substeps_per_period: substeps as u32 };

    let mut r = SectionReader::new("estimator", sections.get("estimator"));
    let mode_raw = r.string_req("mode");
    let window = r.usize_req("window");
    let downsample = r.usize_req("downsample");
    let iterations = r.usize_req("iterations");
    let optimizer_raw = r.string_req("optimizer");
    let initial_guess = r.vector_req("initial_guess");
    let step_size = r.f64_or("step_size", 1.0);
    let damping = r.f64_or("damping", 1e-8);
    let fd_step = r.f64_or("fd_step", 1e-6);
    let delta_min = r.f64_or("delta_min", 0.0);
    let d_min = r.f64_or("d_min", 0.0);
    let n_max = r.f64_or("n_max", f64::INFINITY);
    let filters_raw = r.string_or("filters", "");
    let filter_smoothing = r.f64_or("filter_smoothing", 0.5);
    let filter_leak = r.f64_or("filter_leak", 0.95);
    let filter_weight = r.f64_or("filter_weight", 1.0);
    r.finish()?;

    let mode: MheMode = mode_raw
        .parse()
        .map_err(|detail| bad("estimator", "mode", detail))?;
    let optimizer_kind: OptimizerKind = optimizer_raw
        .parse()
        .map_err(|detail| bad("estimator", "optimizer", detail))?;
    let filters: Vec<String> = filters_raw.split_whitespace().map(str::to_string).collect();
    for f in &filters {
        if !matches!(f.as_str(), "dirty_derivative" | "lossy_integrator") {
            return Err(bad("estimator", "filters", format!("unknown filter '{f}'")));
        }
    }

    let scenario = Scenario {
        name,
        family,
        seed,
        model_kind,
        model_params,
        x0,
        t0,
        tf,
        ts,
        input,
        noise_amplitude,
        integrator,
        estimator: EstimatorSpec {
            mode,
            window,
            downsample,
            iterations,
            optimizer_kind,
            step_size,
            damping,
            fd_step,
            delta_min,
            d_min,
            n_max,
            initial_guess,
            filters,
            filter_smoothing,
            filter_leak,
            filter_weight,
        },
    };

    // Surface model and dimension mistakes at load time, before any run.
    let build = make_model(scenario.model_kind, &scenario.model_params)?;
    let n = build.model.state_dim();
    if scenario.x0.len() != n {
        return Err(bad("truth", "x0", format!("has {} components, model state has {n}", scenario.x0.len())));
    }
    if scenario.estimator.initial_guess.len() != n {
        return Err(bad(
            "estimator",
            "initial_guess",
            format!("has {} components, model state has {n}", scenario.estimator.initial_guess.len()),
        ));
    }
    if scenario.input.width() != build.model.input_dim() {
        return Err(bad(
            "input",
            "value",
            format!("has width {}, model input has {}", scenario.input.width(), build.model.input_dim()),
        ));
    }
    Ok(scenario)
}

fn bad(section: &'static str, key: &str, detail: String) -> ScenarioError {
    ScenarioError::BadValue { section, key: key.to_string(), detail }
}

fn read_model(entries: &BTreeMap<String, String>) -> Result<(ModelKind, ModelParams), ScenarioError> {
    let kind_raw = entries
        .get("kind")
        .ok_or(ScenarioError::MissingKeys { section: "model", keys: "kind".into() })?;
    let kind: ModelKind = kind_raw.parse().map_err(ScenarioError::Model)?;
    let mut params = ModelParams::new();
    for (key, value) in entries {
        if key == "kind" {
            continue;
        }
        let parsed = if value.trim_start().starts_with('[') {
            ParamValue::Matrix(parse_matrix("model", key, value)?)
        } else {
            ParamValue::Scalar(
                value
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| bad("model", key, e.to_string()))?,
            )
        };
        params.insert(key.clone(), parsed);
    }
    Ok((kind, params))
}

fn parse_table_values(raw: &str) -> Result<Vec<DVector<f64>>, ScenarioError> {
    if raw.trim_start().starts_with('[') {
        let m = parse_matrix("input", "values", raw)?;
        Ok((0..m.nrows()).map(|i| m.row(i).transpose()).collect())
    } else {
        raw.split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map(|v| DVector::from_element(1, v))
                    .map_err(|e| bad("input", "values", e.to_string()))
            })
            .collect()
    }
}

fn parse_matrix(section: &'static str, key: &str, raw: &str) -> Result<DMatrix<f64>, ScenarioError> {
    let inner = raw
        .trim()
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| bad(section, key, "matrix must be wrapped in [ ]".into()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for row_text in inner.split(';') {
        let row: Vec<f64> = row_text
            .split_whitespace()
            .map(|tok| tok.parse::<f64>().map_err(|e| bad(section, key, e.to_string())))
            .collect::<Result<_, _>>()?;
        if row.is_empty() {
            return Err(bad(section, key, "matrix row is empty".into()));
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(bad(
                    section,
                    key,
                    format!("rows have {} and {} entries", first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(bad(section, key, "matrix has no rows".into()));
    }
    let (nr, nc) = (rows.len(), rows[0].len());
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

fn split_sections(text: &str) -> Result<BTreeMap<String, BTreeMap<String, String>>, ScenarioError> {
    let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(body) = trimmed.strip_prefix('[') {
            let name = body
                .strip_suffix(']')
                .ok_or_else(|| ScenarioError::Syntax { line, text: trimmed.to_string() })?
                .trim()
                .to_string();
            if sections.contains_key(&name) {
                return Err(ScenarioError::DuplicateSection { line, name });
            }
            sections.insert(name.clone(), BTreeMap::new());
            current = Some(name);
        } else if let Some((key, value)) = trimmed.split_once('=') {
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            let section = current
                .clone()
                .ok_or_else(|| ScenarioError::KeyOutsideSection { line, key: key.clone() })?;
            let map = sections.get_mut(&section).expect("current section exists");
            if map.insert(key.clone(), value).is_some() {
                return Err(ScenarioError::DuplicateKey { line, section, key });
            }
        } else {
            return Err(ScenarioError::Syntax { line, text: trimmed.to_string() });
        }
    }
    Ok(sections)
}

/// Strict per-section key reader: takes each key at most once, records
/// missing required keys to report them together, and flags leftovers.
struct SectionReader<'a> {
    section: &'static str,
    entries: Option<&'a BTreeMap<String, String>>,
    taken: BTreeSet<&'static str>,
    missing: Vec<&'static str>,
    error: Option<ScenarioError>,
}

impl<'a> SectionReader<'a> {
    fn new(section: &'static str, entries: Option<&'a BTreeMap<String, String>>) -> Self {
        SectionReader { section, entries, taken: BTreeSet::new(), missing: Vec::new(), error: None }
    }

    fn raw(&mut self, key: &'static str) -> Option<&'a str> {
        self.taken.insert(key);
        self.entries.and_then(|m| m.get(key)).map(String::as_str)
    }

    fn required(&mut self, key: &'static str) -> Option<&'a str> {
        let v = self.raw(key);
        if v.is_none() {
            self.missing.push(key);
        }
        v
    }

    fn fail(&mut self, key: &str, detail: String) {
        if self.error.is_none() {
            self.error = Some(bad(self.section, key, detail));
        }
    }

    fn string_req(&mut self, key: &'static str) -> String {
        self.required(key).unwrap_or("").to_string()
    }

    fn string_or(&mut self, key: &'static str, default: &str) -> String {
        self.raw(key).unwrap_or(default).to_string()
    }

    fn f64_req(&mut self, key: &'static str) -> f64 {
        match self.required(key) {
            Some(s) => self.parse_f64(key, s),
            None => 0.0,
        }
    }

    fn f64_or(&mut self, key: &'static str, default: f64) -> f64 {
        match self.raw(key) {
            Some(s) => self.parse_f64(key, s),
            None => default,
        }
    }

    fn parse_f64(&mut self, key: &'static str, s: &str) -> f64 {
        match s.parse() {
            Ok(v) => v,
            Err(e) => {
                self.fail(key, format!("{e} (value '{s}')"));
                0.0
            }
        }
    }

    fn u64_req(&mut self, key: &'static str) -> u64 {
        match self.required(key) {
            Some(s) => match s.parse() {
                Ok(v) => v,
                Err(e) => {
                    self.fail(key, format!("{e} (value '{s}')"));
                    0
                }
            },
            None => 0,
        }
    }

    fn usize_req(&mut self, key: &'static str) -> usize {
        self.u64_req(key) as usize
    }

    fn vector_req(&mut self, key: &'static str) -> DVector<f64> {
        let vals = self.f64_list_req(key);
        DVector::from_vec(vals)
    }

    fn f64_list_req(&mut self, key: &'static str) -> Vec<f64> {
        let Some(s) = self.required(key) else { return Vec::new() };
        let mut out = Vec::new();
        for tok in s.split_whitespace() {
            match tok.parse() {
                Ok(v) => out.push(v),
                Err(e) => {
                    self.fail(key, format!("{e} (token '{tok}')"));
                    return Vec::new();
                }
            }
        }
        if out.is_empty() {
            self.fail(key, "needs at least one number".into());
        }
        out
    }

    fn finish(self) -> Result<(), ScenarioError> {
        if let Some(e) = self.error {
            return Err(e);
        }
        if !self.missing.is_empty() {
            return Err(ScenarioError::MissingKeys {
                section: self.section,
                keys: self.missing.join(", "),
            });
        }
        if let Some(entries) = self.entries {
            let unknown: Vec<&str> = entries
                .keys()
                .map(String::as_str)
                .filter(|k| !self.taken.contains(k))
                .collect();
            if !unknown.is_empty() {
                return Err(ScenarioError::UnknownKeys {
                    section: self.section,
                    keys: unknown.join(", "),
                });
            }
        }
        Ok(())
    }
}
