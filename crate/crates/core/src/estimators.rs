//! Moving-horizon estimators over a sliding measurement window.
//!
//! Every variant shares the same estimation core: start from a warm guess of
//! the state at the window's first stamp, run a fixed number of optimizer
//! iterations against the lifted window cost, then propagate the refined
//! window-start state through the window to get the estimate at the newest
//! sample. The variants differ in what the window rows contain (raw outputs
//! or raw plus filtered channels) and in whether a sample is allowed to skip
//! estimation entirely:
//!
//! * standard: estimate at every window-rate sample;
//! * filtered: augment each sample with discrete-filter outputs so shorter
//!   windows carry comparable information;
//! * adaptive: estimate only when the window looks informative (signal
//!   richness `delta`) and the last fit still has room to improve (`d_V`),
//!   propagating the estimate open loop otherwise.

use crate::dynamics::{flow, ContinuousModel, DynamicsError, IntegratorConfig};
use crate::filters::{BankState, FilterBank};
use crate::lifting::{
    cost, lift, lift_filtered, BufferError, LiftError, LiftedOutput, SampleBuffer, WeightError,
    WeightSet,
};
use crate::metrics::{Counters, Phase};
use crate::optimizer::{optimize, EvalError, Objective, OptimizerConfig};
use nalgebra::DVector;
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MheMode {
    Standard,
    Filtered,
    Adaptive,
    FilteredAdaptive,
}

impl MheMode {
    pub fn name(self) -> &'static str {
        match self {
            MheMode::Standard => "standard",
            MheMode::Filtered => "filtered",
            MheMode::Adaptive => "adaptive",
            MheMode::FilteredAdaptive => "filtered_adaptive",
        }
    }

    pub fn is_filtered(self) -> bool {
        matches!(self, MheMode::Filtered | MheMode::FilteredAdaptive)
    }

    pub fn is_adaptive(self) -> bool {
        matches!(self, MheMode::Adaptive | MheMode::FilteredAdaptive)
    }
}

impl std::str::FromStr for MheMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(MheMode::Standard),
            "filtered" => Ok(MheMode::Filtered),
            "adaptive" => Ok(MheMode::Adaptive),
            "filtered_adaptive" => Ok(MheMode::FilteredAdaptive),
            other => Err(format!(
                "unknown estimator mode '{other}' (expected standard, filtered, adaptive, or filtered_adaptive)"
            )),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("window length must be at least 1")]
    ZeroWindow,
    #[error("downsample factor must be at least 1")]
    ZeroDownsample,
    #[error("base sample period must be positive and finite, got {0}")]
    BadBasePeriod(f64),
    #[error("optimizer must run at least one iteration per estimation")]
    ZeroIterations,
    #[error("optimizer step size must be positive and finite, got {0}")]
    BadStepSize(f64),
    #[error("finite-difference step must be positive and finite, got {0}")]
    BadFdStep(f64),
    #[error("damping must be nonnegative and finite, got {0}")]
    BadDamping(f64),
    #[error("acceptance thresholds must be nonnegative, got delta_min = {delta_min}, d_min = {d_min}")]
    BadThresholds { delta_min: f64, d_min: f64 },
    #[error("sample spacing limit {n_max} is below the downsample factor {downsample}; every estimation would re-initialise the window")]
    BadSpacingLimit { n_max: f64, downsample: usize },
    #[error("output filters are only used by the filtered modes")]
    FiltersOutsideFilteredMode,
    #[error("output filters need a scalar measurement, model output has width {0}")]
    FiltersNeedScalarOutput(usize),
    #[error("filtered channel weight must be positive and finite, got {0}")]
    BadFilterWeight(f64),
    #[error("initial guess has {got} components, model state has {expected}")]
    GuessWidth { got: usize, expected: usize },
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error("weight set has {rows} rows of width {width}, this window needs {expected_rows} rows of width {expected_width}")]
    WeightShape { rows: usize, width: usize, expected_rows: usize, expected_width: usize },
}

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("output sample has {got} components, model output has {expected}")]
    SampleWidth { got: usize, expected: usize },
    #[error("input sample has {got} components, model input has {expected}")]
    InputWidth { got: usize, expected: usize },
    #[error("sample at t = {t} does not advance past the previous one at t = {prev}")]
    NonMonotoneSample { t: f64, prev: f64 },
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error("estimator has not received a sample yet")]
    NotStarted,
    #[error("t = {t} is {offset} base periods past the last window-rate sample, not strictly inside the gap")]
    NotIntersample { t: f64, offset: f64 },
    #[error(transparent)]
    Integration(#[from] DynamicsError),
}

#[derive(Clone, Debug)]
pub struct MheConfig {
    pub mode: MheMode,
    /// Window length `N` in samples.
    pub window: usize,
    /// Window-rate samples arrive every `downsample` base periods.
    pub downsample: usize,
    pub optimizer: OptimizerConfig,
    /// Per-row weights; identity (with `filter_weight` on filtered channels)
    /// when absent.
    pub weights: Option<WeightSet>,
    /// Diagonal weight applied to every filtered channel when `weights` is
    /// not given.
    pub filter_weight: f64,
    pub filters: FilterBank,
    /// Smallest window richness `delta` worth estimating on. Adaptive modes
    /// only.
    pub delta_min: f64,
    /// Smallest last-fit distance `d_V` worth estimating on. Adaptive modes
    /// only.
    pub d_min: f64,
    /// Once accepted samples sit this many base periods apart, the window is
    /// rebuilt from the most recent consecutive samples instead of keeping
    /// stale rows. Infinite disables the rebuild.
    pub n_max: f64,
    pub initial_guess: DVector<f64>,
}

impl MheConfig {
    pub fn new(
        mode: MheMode,
        window: usize,
        downsample: usize,
        optimizer: OptimizerConfig,
        initial_guess: DVector<f64>,
    ) -> Self {
        MheConfig {
            mode,
            window,
            downsample,
            optimizer,
            weights: None,
            filter_weight: 1.0,
            filters: FilterBank::empty(),
            delta_min: 0.0,
            d_min: 0.0,
            n_max: f64::INFINITY,
            initial_guess,
        }
    }
}

/// Outcome of one window-rate sample. `delta` and `d_v` are the acceptance
/// indices as seen before the decision; they are reported in every mode once
/// the window is full, and the costs only when an estimation actually ran.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub t: f64,
    pub accepted: bool,
    pub delta: Option<f64>,
    pub d_v: Option<f64>,
    pub cost_pre: Option<f64>,
    pub cost_post: Option<f64>,
    pub x_hat: DVector<f64>,
    pub failure: Option<String>,
}

/// Signal richness of a full window about to absorb `candidate`: the summed
/// norms of consecutive row increments plus the distance from the oldest row
/// to the candidate.
pub fn richness_index(rows: &[DVector<f64>], candidate: &DVector<f64>) -> f64 {
    assert!(!rows.is_empty(), "richness needs at least one buffered row");
    let increments: f64 = rows.windows(2).map(|p| (&p[1] - &p[0]).norm()).sum();
    increments + (candidate - &rows[0]).norm()
}

/// Frobenius distance between the stacked measured rows and the stacked
/// predicted rows.
pub fn fit_distance(measured: &[DVector<f64>], predicted: &[DVector<f64>]) -> f64 {
    assert_eq!(measured.len(), predicted.len(), "row counts must match");
    measured
        .iter()
        .zip(predicted)
        .map(|(y, h)| (y - h).norm_squared())
        .sum::<f64>()
        .sqrt()
}

struct HistoryRow {
    t: f64,
    row: DVector<f64>,
    u: DVector<f64>,
    pre: BankState,
}

struct WindowObjective<'a> {
    model: &'a ContinuousModel,
    buf: &'a SampleBuffer,
    weights: &'a WeightSet,
    integ: &'a IntegratorConfig,
    bank: &'a FilterBank,
    filtered: bool,
    counters: &'a Counters,
}

impl WindowObjective<'_> {
    fn lift_from(&self, z: &DVector<f64>) -> Result<LiftedOutput, LiftError> {
        if self.filtered {
            lift_filtered(self.model, z, self.buf, self.integ, self.bank, self.counters)
        } else {
            lift(self.model, z, self.buf, self.integ, self.counters)
        }
    }
}

impl Objective for WindowObjective<'_> {
    fn dim(&self) -> usize {
        self.model.state_dim()
    }

    fn evaluate(&self, z: &DVector<f64>) -> Result<f64, EvalError> {
        Ok(cost(self.buf, &self.lift_from(z)?, self.weights)?)
    }

    fn weighted_residual(&self, z: &DVector<f64>) -> Result<DVector<f64>, EvalError> {
        let lifted = self.lift_from(z)?;
        let rows = self.buf.y_rows();
        let width = self.buf.y_width();
        let mut stacked = DVector::zeros(rows.len() * width);
        for (j, (y, h)) in rows.iter().zip(&lifted.rows).enumerate() {
            let seg = self.weights.sqrt_t(j) * (h - y);
            stacked.rows_mut(j * width, width).copy_from(&seg);
        }
        Ok(stacked)
    }
}

pub struct Estimator {
    model: ContinuousModel,
    cfg: MheConfig,
    integ: IntegratorConfig,
    base_period: f64,
    weights: WeightSet,
    counters: Counters,
    buffer: SampleBuffer,
    /// Every window-rate sample seen lately, including skipped ones; the
    /// spacing rebuild draws its rows from here.
    raw_history: VecDeque<HistoryRow>,
    /// Estimate at every window-rate instant, estimated or propagated; warm
    /// starts after a rebuild and intersample queries read from here.
    estimate_history: VecDeque<(f64, DVector<f64>)>,
    /// States at the current window stamps from the last estimation's final
    /// lift; entry 1 is the warm start for the next estimation.
    window_chain: Vec<DVector<f64>>,
    filter_live: BankState,
    cached_d_v: Option<f64>,
    x_now: DVector<f64>,
    t_now: f64,
    started: bool,
    /// False until an estimation succeeds and after any failure event, so
    /// warm starts fall back to the stored per-stamp estimates.
    chain_valid: bool,
    failure: Option<String>,
    failure_events: u64,
}

impl Estimator {
    pub fn new(
        model: ContinuousModel,
        cfg: MheConfig,
        integ: IntegratorConfig,
        base_period: f64,
    ) -> Result<Self, ConfigError> {
        if cfg.window == 0 {
            return Err(ConfigError::ZeroWindow);
        }
        if cfg.downsample == 0 {
            return Err(ConfigError::ZeroDownsample);
        }
        if !(base_period > 0.0 && base_period.is_finite()) {
            return Err(ConfigError::BadBasePeriod(base_period));
        }
        if cfg.optimizer.iterations == 0 {
            return Err(ConfigError::ZeroIterations);
        }
        if !(cfg.optimizer.step_size > 0.0 && cfg.optimizer.step_size.is_finite()) {
            return Err(ConfigError::BadStepSize(cfg.optimizer.step_size));
        }
        if !(cfg.optimizer.fd_step > 0.0 && cfg.optimizer.fd_step.is_finite()) {
            return Err(ConfigError::BadFdStep(cfg.optimizer.fd_step));
        }
        if !(cfg.optimizer.damping >= 0.0 && cfg.optimizer.damping.is_finite()) {
            return Err(ConfigError::BadDamping(cfg.optimizer.damping));
        }
        if !(cfg.delta_min >= 0.0) || !(cfg.d_min >= 0.0) {
            return Err(ConfigError::BadThresholds { delta_min: cfg.delta_min, d_min: cfg.d_min });
        }
        if !(cfg.n_max >= cfg.downsample as f64) {
            return Err(ConfigError::BadSpacingLimit { n_max: cfg.n_max, downsample: cfg.downsample });
        }
        if !cfg.filters.is_empty() {
            if !cfg.mode.is_filtered() {
                return Err(ConfigError::FiltersOutsideFilteredMode);
            }
            if model.output_dim() != 1 {
                return Err(ConfigError::FiltersNeedScalarOutput(model.output_dim()));
            }
        }
        if !(cfg.filter_weight > 0.0 && cfg.filter_weight.is_finite()) {
            return Err(ConfigError::BadFilterWeight(cfg.filter_weight));
        }
        if cfg.initial_guess.len() != model.state_dim() {
            return Err(ConfigError::GuessWidth {
                got: cfg.initial_guess.len(),
                expected: model.state_dim(),
            });
        }
        let filtered_active = cfg.mode.is_filtered() && !cfg.filters.is_empty();
        let row_width = if filtered_active { cfg.filters.row_width() } else { model.output_dim() };
        let weights = match &cfg.weights {
            Some(w) => {
                if w.len() != cfg.window || w.width() != row_width {
                    return Err(ConfigError::WeightShape {
                        rows: w.len(),
                        width: w.width(),
                        expected_rows: cfg.window,
                        expected_width: row_width,
                    });
                }
                w.clone()
            }
            None if filtered_active => {
                WeightSet::filtered_identity(cfg.window, cfg.filters.len(), cfg.filter_weight)?
            }
            None => WeightSet::identity(cfg.window, row_width),
        };
        let buffer = SampleBuffer::new(
            cfg.window,
            cfg.downsample,
            base_period,
            row_width,
            model.input_dim(),
        );
        let filter_live = cfg.filters.initial_state();
        let x_now = cfg.initial_guess.clone();
        Ok(Estimator {
            model,
            cfg,
            integ,
            base_period,
            weights,
            counters: Counters::new(),
            buffer,
            raw_history: VecDeque::new(),
            estimate_history: VecDeque::new(),
            window_chain: Vec::new(),
            filter_live,
            cached_d_v: None,
            x_now,
            t_now: f64::NAN,
            started: false,
            chain_valid: false,
            failure: None,
            failure_events: 0,
        })
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn config(&self) -> &MheConfig {
        &self.cfg
    }

    pub fn model(&self) -> &ContinuousModel {
        &self.model
    }

    /// First recorded failure event, if any step hit one.
    pub fn failure(&self) -> Option<&str> {
        self.failure.as_deref()
    }

    /// Number of failure events recorded so far.
    pub fn failure_count(&self) -> u64 {
        self.failure_events
    }

    pub fn has_full_window(&self) -> bool {
        self.buffer.is_full()
    }

    pub fn window_stamps(&self) -> &[f64] {
        self.buffer.stamps()
    }

    pub fn cached_fit_distance(&self) -> Option<f64> {
        self.cached_d_v
    }

    pub fn current_estimate(&self) -> Option<(f64, &DVector<f64>)> {
        if self.started {
            Some((self.t_now, &self.x_now))
        } else {
            None
        }
    }

    /// State at the first window stamp from the latest estimation.
    pub fn window_start_estimate(&self) -> Option<(f64, &DVector<f64>)> {
        if self.window_chain.is_empty() {
            None
        } else {
            Some((self.buffer.stamps()[0], &self.window_chain[0]))
        }
    }

    /// Record a base-rate control sample. Must be fed every base period so
    /// window integrations and intersample queries see the actual input.
    pub fn record_control(&mut self, t: f64, u: &DVector<f64>) -> Result<(), EstimatorError> {
        if u.len() != self.model.input_dim() {
            return Err(EstimatorError::InputWidth { got: u.len(), expected: self.model.input_dim() });
        }
        self.buffer.record_control(t, u.clone())?;
        Ok(())
    }

    /// Absorb one window-rate sample and return what happened. A numerical
    /// failure (diverged integration, singular or non-finite optimizer
    /// steps) flags this record, holds the last finite estimate, and leaves
    /// later instants free to estimate again, so a long run completes with
    /// every event on file instead of tearing down.
    pub fn step(
        &mut self,
        t: f64,
        y: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<StepRecord, EstimatorError> {
        if y.len() != self.model.output_dim() {
            return Err(EstimatorError::SampleWidth { got: y.len(), expected: self.model.output_dim() });
        }
        if u.len() != self.model.input_dim() {
            return Err(EstimatorError::InputWidth { got: u.len(), expected: self.model.input_dim() });
        }
        if self.started && t <= self.t_now {
            return Err(EstimatorError::NonMonotoneSample { t, prev: self.t_now });
        }
        if !self.started {
            self.started = true;
            self.t_now = t;
        }
        self.buffer.record_control(t, u.clone())?;
        let (row, pre) = self.prepare_row(y);
        self.push_history(t, row.clone(), u.clone(), pre.clone());

        let mut record = StepRecord {
            t,
            accepted: false,
            delta: None,
            d_v: None,
            cost_pre: None,
            cost_post: None,
            x_hat: self.x_now.clone(),
            failure: None,
        };

        if !self.buffer.is_full() {
            self.buffer.push_with_filter_state(row, u.clone(), t, pre)?;
            if self.buffer.is_full() {
                // First estimation runs unconditionally in every mode; it
                // seeds the fit distance the adaptive gate reads afterwards.
                record.accepted = true;
                let attempt = self
                    .warm_start_fresh(t)
                    .and_then(|zeta0| self.run_estimation(t, &zeta0));
                match attempt {
                    Ok((pre_cost, post_cost)) => {
                        record.cost_pre = Some(pre_cost);
                        record.cost_post = Some(post_cost);
                    }
                    Err(msg) => self.note_failure(&mut record, msg),
                }
            } else if let Err(msg) = self.advance_open_loop(t, Phase::Fill) {
                self.note_failure(&mut record, msg);
            }
        } else {
            let delta = richness_index(self.buffer.y_rows(), &row);
            record.delta = Some(delta);
            record.d_v = self.cached_d_v;
            let accept = !self.cfg.mode.is_adaptive()
                || (delta >= self.cfg.delta_min
                    && self.cached_d_v.map_or(true, |d| d >= self.cfg.d_min));
            if accept {
                record.accepted = true;
                let last_stamp = *self.buffer.stamps().last().expect("full buffer has stamps");
                let gap = (t - last_stamp) / self.base_period;
                // Half a period of slack so float division cannot flip the
                // comparison for gaps that are exact multiples.
                let rebuild = gap >= self.cfg.n_max - 0.5;
                let zeta0 = if rebuild {
                    let rows = self.recent_history_rows();
                    self.buffer
                        .rebuild(rows)
                        .map_err(|e| e.to_string())
                        .and_then(|()| self.warm_start_fresh(t))
                } else {
                    self.buffer.push_with_filter_state(row, u.clone(), t, pre)?;
                    if self.chain_valid && self.cfg.window >= 2 {
                        Ok(self.window_chain[1].clone())
                    } else {
                        self.warm_start_fresh(t)
                    }
                };
                let attempt = zeta0.and_then(|z| self.run_estimation(t, &z));
                match attempt {
                    Ok((pre_cost, post_cost)) => {
                        record.cost_pre = Some(pre_cost);
                        record.cost_post = Some(post_cost);
                    }
                    Err(msg) => self.note_failure(&mut record, msg),
                }
            } else {
                self.counters.add_skip();
                if let Err(msg) = self.advance_open_loop(t, Phase::Propagation) {
                    self.note_failure(&mut record, msg);
                }
            }
        }

        record.x_hat = self.x_now.clone();
        self.push_estimate(t, self.x_now.clone());
        self.prune_controls();
        Ok(record)
    }

    /// Estimate at a base-rate instant strictly between window-rate samples:
    /// the latest window-rate estimate propagated open loop under the
    /// recorded inputs. Integration work lands on the caller's counters.
    pub fn intersample_estimate(
        &self,
        t: f64,
        counters: &Counters,
    ) -> Result<DVector<f64>, EstimatorError> {
        let (te, xe) = self.estimate_history.back().ok_or(EstimatorError::NotStarted)?;
        let offset = (t - te) / self.base_period;
        let nearest = offset.round();
        let aligned = (offset - nearest).abs() <= 1e-6 * self.cfg.downsample as f64;
        if !aligned || nearest < 1.0 || nearest > self.cfg.downsample as f64 - 1.0 {
            return Err(EstimatorError::NotIntersample { t, offset });
        }
        let controls = self.buffer.controls().ok_or(EstimatorError::NotStarted)?;
        Ok(flow(&self.model, xe, controls, *te, t, &self.integ, counters)?)
    }

    fn filtered_active(&self) -> bool {
        self.cfg.mode.is_filtered() && !self.cfg.filters.is_empty()
    }

    /// Advance the live filter bank with the raw measurement and build the
    /// buffer row. The returned bank state is from before the update, which
    /// is what a lift replays from when this row is the window start.
    fn prepare_row(&mut self, y: &DVector<f64>) -> (DVector<f64>, BankState) {
        if !self.filtered_active() {
            return (y.clone(), Vec::new());
        }
        let pre = self.filter_live.clone();
        let (next, outs) = self.cfg.filters.step(&self.filter_live, y[0]);
        self.filter_live = next;
        let mut row = Vec::with_capacity(1 + outs.len());
        row.push(y[0]);
        row.extend_from_slice(&outs);
        (DVector::from_vec(row), pre)
    }

    fn push_history(&mut self, t: f64, row: DVector<f64>, u: DVector<f64>, pre: BankState) {
        self.raw_history.push_back(HistoryRow { t, row, u, pre });
        while self.raw_history.len() > self.cfg.window + 2 {
            self.raw_history.pop_front();
        }
    }

    fn push_estimate(&mut self, t: f64, x: DVector<f64>) {
        self.estimate_history.push_back((t, x));
        while self.estimate_history.len() > self.cfg.window + 4 {
            self.estimate_history.pop_front();
        }
    }

    fn recent_history_rows(&self) -> Vec<(f64, DVector<f64>, DVector<f64>, BankState)> {
        let skip = self.raw_history.len().saturating_sub(self.cfg.window);
        self.raw_history
            .iter()
            .skip(skip)
            .map(|h| (h.t, h.row.clone(), h.u.clone(), h.pre.clone()))
            .collect()
    }

    /// Warm start for a window whose first stamp has no chained predecessor:
    /// the stored estimate at that stamp, or for a single-sample window the
    /// current estimate propagated to `t`.
    fn warm_start_fresh(&mut self, t: f64) -> Result<DVector<f64>, String> {
        let target = self.buffer.stamps()[0];
        if (target - t).abs() <= self.base_period * 1e-6 {
            self.counters.set_phase(Phase::Estimation);
            self.advance_to(t)?;
            return Ok(self.x_now.clone());
        }
        self.lookup_estimate(target)
    }

    fn lookup_estimate(&self, target: f64) -> Result<DVector<f64>, String> {
        let tol = self.base_period * 1e-6;
        self.estimate_history
            .iter()
            .rev()
            .find(|(te, _)| (te - target).abs() <= tol)
            .map(|(_, x)| x.clone())
            .ok_or_else(|| format!("no stored estimate at t = {target}"))
    }

    fn advance_open_loop(&mut self, t: f64, phase: Phase) -> Result<(), String> {
        self.counters.set_phase(phase);
        self.advance_to(t)
    }

    fn advance_to(&mut self, t: f64) -> Result<(), String> {
        if t == self.t_now {
            return Ok(());
        }
        let controls = self.buffer.controls().expect("a control was recorded this step");
        match flow(&self.model, &self.x_now, controls, self.t_now, t, &self.integ, &self.counters)
        {
            Ok(x) => {
                self.x_now = x;
                self.t_now = t;
                Ok(())
            }
            Err(e) => Err(e.to_string()),
        }
    }

    fn run_estimation(&mut self, t: f64, zeta0: &DVector<f64>) -> Result<(f64, f64), String> {
        self.counters.set_phase(Phase::Estimation);
        let filtered = self.filtered_active();
        let (lifted, cost_pre, cost_post, d_v) = {
            let obj = WindowObjective {
                model: &self.model,
                buf: &self.buffer,
                weights: &self.weights,
                integ: &self.integ,
                bank: &self.cfg.filters,
                filtered,
                counters: &self.counters,
            };
            let cost_pre = obj.evaluate(zeta0).map_err(|e| e.to_string())?;
            let trace = optimize(&obj, zeta0, &self.cfg.optimizer, &self.counters)
                .map_err(|e| e.to_string())?;
            let refined = trace.last().expect("trace holds the start");
            let lifted = obj.lift_from(refined).map_err(|e| e.to_string())?;
            let cost_post = cost(&self.buffer, &lifted, &self.weights).map_err(|e| e.to_string())?;
            let d_v = fit_distance(self.buffer.y_rows(), &lifted.rows);
            (lifted, cost_pre, cost_post, d_v)
        };
        self.window_chain = lifted.states;
        self.x_now = self.window_chain.last().expect("window chain is nonempty").clone();
        self.t_now = t;
        self.cached_d_v = Some(d_v);
        self.chain_valid = true;
        self.counters.add_estimation();
        Ok((cost_pre, cost_post))
    }

    /// Bookkeeping for one failure event: the estimate and its clock stay
    /// where they are (the last finite point), the warm-start chain is
    /// declared stale, and the record carries the reason. No integration
    /// happens here; whatever substeps the failed attempt consumed are
    /// already on the counters.
    fn note_failure(&mut self, record: &mut StepRecord, reason: String) {
        if self.failure.is_none() {
            self.failure = Some(reason.clone());
        }
        self.failure_events += 1;
        self.chain_valid = false;
        record.failure = Some(reason);
    }

    fn prune_controls(&mut self) {
        let mut keep = self.buffer.stamps().first().copied().unwrap_or(self.t_now);
        if let Some(front) = self.raw_history.front() {
            keep = keep.min(front.t);
        }
        if let Some((te, _)) = self.estimate_history.front() {
            keep = keep.min(*te);
        }
        self.buffer.prune_controls_before(keep);
    }
}
