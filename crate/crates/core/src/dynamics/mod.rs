//! Continuous-time system models and fixed-substep integration.
//!
//! A [`ContinuousModel`] is a pair of maps `f` (state derivative) and `h`
//! (output) over dense state, input, and output vectors. Inputs are
//! piecewise-constant [`ControlSignal`]s on a base sampling grid; [`flow`]
//! integrates through every control breakpoint with a fixed number of
//! substeps per base period, so results are reproducible across machines and
//! the substep count doubles as a portable cost measure.

mod models;

pub use models::{make_model, model_catalog, ModelBuild, ModelError, ModelInfo, ModelKind, ParamValue};

use crate::metrics::Counters;
use nalgebra::DVector;
use std::collections::BTreeMap;
use thiserror::Error;

/// Named coefficients for [`make_model`]. Ordered so error listings and log
/// echoes are deterministic.
pub type ModelParams = BTreeMap<String, ParamValue>;

/// Relative slack for deciding whether two time stamps coincide or whether a
/// stamp sits on a sampling grid. Scaled by the base period at use sites.
pub(crate) const TIME_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("state diverged (non-finite component) at t = {t}")]
    Divergence { t: f64 },
    #[error("integration span is reversed: t0 = {t0}, t1 = {t1}")]
    ReversedSpan { t0: f64, t1: f64 },
    #[error("control signal is not defined at t = {t} (first sample at {first})")]
    UndefinedControl { t: f64, first: f64 },
    #[error("control sample times must be strictly increasing: {prev} then {next}")]
    NonIncreasingControl { prev: f64, next: f64 },
    #[error("control sample at t = {t} conflicts with an existing sample at the same instant")]
    ConflictingControl { t: f64 },
    #[error("time {t} is not aligned to the base period {period} (offset from {origin})")]
    MisalignedTime { t: f64, period: f64, origin: f64 },
    #[error("sample period {sample} must be a positive multiple of the base period {base}")]
    BadSamplePeriod { sample: f64, base: f64 },
    #[error("control signal must contain at least one sample")]
    EmptyControl,
    #[error("control vector has length {got}, expected {expected}")]
    ControlWidth { got: usize, expected: usize },
}

/// Explicit integration scheme. Both use a fixed, configured number of
/// substeps per base period; there is no adaptive step control anywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntegratorMethod {
    Rk4,
    Euler,
}

impl IntegratorMethod {
    pub fn name(self) -> &'static str {
        match self {
            IntegratorMethod::Rk4 => "rk4",
            IntegratorMethod::Euler => "euler",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct IntegratorConfig {
    pub method: IntegratorMethod,
    /// Substeps per base sampling period. Substep size is `period / this`.
    pub substeps_per_period: u32,
}

impl IntegratorConfig {
    pub fn rk4(substeps_per_period: u32) -> Self {
        IntegratorConfig { method: IntegratorMethod::Rk4, substeps_per_period }
    }

    pub fn euler(substeps_per_period: u32) -> Self {
        IntegratorConfig { method: IntegratorMethod::Euler, substeps_per_period }
    }
}

type StateMap = Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Continuous-time system `x' = f(x, u)`, `y = h(x, u)` with fixed
/// dimensions. The closures must honour the declared dimensions; that is a
/// programming contract, checked on every evaluation.
pub struct ContinuousModel {
    n: usize,
    m: usize,
    p: usize,
    f: StateMap,
    h: StateMap,
}

impl ContinuousModel {
    pub fn new(n: usize, m: usize, p: usize, f: StateMap, h: StateMap) -> Self {
        ContinuousModel { n, m, p, f, h }
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn output_dim(&self) -> usize {
        self.p
    }

    pub fn deriv(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.n, "state vector length {} != n = {}", x.len(), self.n);
        assert_eq!(u.len(), self.m, "input vector length {} != m = {}", u.len(), self.m);
        let dx = (self.f)(x, u);
        assert_eq!(dx.len(), self.n, "f returned length {} != n = {}", dx.len(), self.n);
        dx
    }

    pub fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.n, "state vector length {} != n = {}", x.len(), self.n);
        assert_eq!(u.len(), self.m, "input vector length {} != m = {}", u.len(), self.m);
        let y = (self.h)(x, u);
        assert_eq!(y.len(), self.p, "h returned length {} != p = {}", y.len(), self.p);
        y
    }
}

impl std::fmt::Debug for ContinuousModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ContinuousModel")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("p", &self.p)
            .finish()
    }
}

/// Piecewise-constant input on a base sampling grid. A sample `(t_j, u_j)`
/// holds from `t_j` until the next sample time. Sample times are strictly
/// increasing and aligned to multiples of the base period from the first
/// sample.
#[derive(Clone, Debug)]
pub struct ControlSignal {
    samples: Vec<(f64, DVector<f64>)>,
    period: f64,
    width: usize,
}

impl ControlSignal {
    /// A single sample holding forever from `start`.
    pub fn constant(start: f64, value: DVector<f64>, period: f64) -> Self {
        assert!(period > 0.0, "base period must be positive");
        let width = value.len();
        ControlSignal { samples: vec![(start, value)], period, width }
    }

    pub fn from_table(rows: Vec<(f64, DVector<f64>)>, period: f64) -> Result<Self, DynamicsError> {
        assert!(period > 0.0, "base period must be positive");
        let mut iter = rows.into_iter();
        let first = iter.next().ok_or(DynamicsError::EmptyControl)?;
        let mut sig = ControlSignal::constant(first.0, first.1, period);
        for (t, u) in iter {
            sig.record(t, u)?;
        }
        Ok(sig)
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn start(&self) -> f64 {
        self.samples[0].0
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Append a sample. Re-recording the most recent instant with the same
    /// value is a no-op, so feeding the same grid twice is harmless.
    pub fn record(&mut self, t: f64, u: DVector<f64>) -> Result<(), DynamicsError> {
        if u.len() != self.width {
            return Err(DynamicsError::ControlWidth { got: u.len(), expected: self.width });
        }
        let slack = self.period * TIME_SLACK;
        let (last_t, last_u) = self.samples.last().expect("control signal is never empty");
        if (t - last_t).abs() <= slack {
            if *last_u == u {
                return Ok(());
            }
            return Err(DynamicsError::ConflictingControl { t });
        }
        if t < *last_t {
            return Err(DynamicsError::NonIncreasingControl { prev: *last_t, next: t });
        }
        let origin = self.samples[0].0;
        let steps = (t - origin) / self.period;
        if (steps - steps.round()).abs() > 1e-6 {
            return Err(DynamicsError::MisalignedTime { t, period: self.period, origin });
        }
        self.samples.push((t, u));
        Ok(())
    }

    /// Value holding at time `t`.
    pub fn value_at(&self, t: f64) -> Result<&DVector<f64>, DynamicsError> {
        let slack = self.period * TIME_SLACK;
        let idx = self.samples.partition_point(|(st, _)| *st <= t + slack);
        if idx == 0 {
            return Err(DynamicsError::UndefinedControl { t, first: self.samples[0].0 });
        }
        Ok(&self.samples[idx - 1].1)
    }

    /// Sample times strictly inside `(t0, t1)`, in order. These are the points
    /// where an integrator must break its substep sequence.
    pub fn breakpoints_within(&self, t0: f64, t1: f64) -> impl Iterator<Item = f64> + '_ {
        let slack = self.period * TIME_SLACK;
        self.samples
            .iter()
            .map(|(t, _)| *t)
            .filter(move |t| *t > t0 + slack && *t < t1 - slack)
    }

    /// Drop samples that can no longer affect any evaluation at times `>= t`.
    /// The sample governing `t` itself is kept.
    pub fn prune_before(&mut self, t: f64) {
        let slack = self.period * TIME_SLACK;
        let governing = self.samples.partition_point(|(st, _)| *st <= t + slack);
        if governing > 1 {
            self.samples.drain(..governing - 1);
        }
    }
}

/// States and outputs sampled on a uniform grid.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> Option<&DVector<f64>> {
        self.states.last()
    }
}

fn rk4_step(model: &ContinuousModel, x: &DVector<f64>, u: &DVector<f64>, h: f64) -> DVector<f64> {
    let k1 = model.deriv(x, u);
    let k2 = model.deriv(&(x + &k1 * (h / 2.0)), u);
    let k3 = model.deriv(&(x + &k2 * (h / 2.0)), u);
    let k4 = model.deriv(&(x + &k3 * h), u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

fn euler_step(model: &ContinuousModel, x: &DVector<f64>, u: &DVector<f64>, h: f64) -> DVector<f64> {
    x + model.deriv(x, u) * h
}

/// Integrate the model from `t0` to `t1` under `u`, charging one counter unit
/// per substep. The span is split at every control breakpoint; each piece is
/// integrated with substeps of size `period / substeps_per_period` (the count
/// is rounded, so grid-aligned spans reproduce the exact substep sequence and
/// composing flows at a substep boundary is bitwise associative).
pub fn flow(
    model: &ContinuousModel,
    x0: &DVector<f64>,
    u: &ControlSignal,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
    counters: &Counters,
) -> Result<DVector<f64>, DynamicsError> {
    assert!(cfg.substeps_per_period >= 1, "substeps_per_period must be >= 1");
    if t1 < t0 {
        return Err(DynamicsError::ReversedSpan { t0, t1 });
    }
    let mut x = x0.clone();
    if t1 == t0 {
        return Ok(x);
    }
    let h_base = u.period() / cfg.substeps_per_period as f64;
    let mut seg_start = t0;
    let mut cuts: Vec<f64> = u.breakpoints_within(t0, t1).collect();
    cuts.push(t1);
    for seg_end in cuts {
        let uval = u.value_at(seg_start)?.clone();
        let len = seg_end - seg_start;
        let n_steps = ((len / h_base).round() as u64).max(1);
        let h = len / n_steps as f64;
        for i in 0..n_steps {
            x = match cfg.method {
                IntegratorMethod::Rk4 => rk4_step(model, &x, &uval, h),
                IntegratorMethod::Euler => euler_step(model, &x, &uval, h),
            };
            counters.add_substeps(1);
            if !x.iter().all(|v| v.is_finite()) {
                return Err(DynamicsError::Divergence { t: seg_start + (i + 1) as f64 * h });
            }
        }
        seg_start = seg_end;
    }
    Ok(x)
}

/// Integrate from `t0` to `tf` and record state and output every
/// `sample_period` (which must be a positive multiple of the control's base
/// period). Both endpoints are included; `tf == t0` yields a single sample.
pub fn simulate(
    model: &ContinuousModel,
    x0: &DVector<f64>,
    u: &ControlSignal,
    t0: f64,
    tf: f64,
    sample_period: f64,
    cfg: &IntegratorConfig,
    counters: &Counters,
) -> Result<Trajectory, DynamicsError> {
    if tf < t0 {
        return Err(DynamicsError::ReversedSpan { t0, t1: tf });
    }
    let base = u.period();
    let ratio = sample_period / base;
    if !(sample_period > 0.0) || (ratio - ratio.round()).abs() > 1e-6 || ratio.round() < 1.0 {
        return Err(DynamicsError::BadSamplePeriod { sample: sample_period, base });
    }
    let count = ((tf - t0) / sample_period + TIME_SLACK).floor() as usize;
    let mut traj = Trajectory::default();
    let mut x = x0.clone();
    for j in 0..=count {
        let t = t0 + j as f64 * sample_period;
        if j > 0 {
            let prev = t0 + (j - 1) as f64 * sample_period;
            x = flow(model, &x, u, prev, t, cfg, counters)?;
        }
        let y = model.output(&x, u.value_at(t)?);
        traj.times.push(t);
        traj.states.push(x.clone());
        traj.outputs.push(y);
    }
    Ok(traj)
}
