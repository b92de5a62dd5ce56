//! Discrete-time output filters.
//!
//! A filter is a small state machine clocked by sample arrival: a state
//! update followed by an output read. The estimator runs one copy on live
//! measurements and replays fresh copies over predicted outputs, so replay
//! from a recorded state must reproduce the live outputs exactly. Only
//! scalar input channels are supported; banks of several filters widen a
//! scalar measurement into a multi-channel row.

use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("filter period {0} must be positive")]
    BadPeriod(f64),
    #[error("smoothing coefficient {0} must lie in [0, 1)")]
    BadSmoothing(f64),
    #[error("leak coefficient {0} must lie in [0, 1]")]
    BadLeak(f64),
    #[error("unknown filter kind '{0}'")]
    UnknownKind(String),
    #[error("filter state has length {got}, expected {expected}")]
    StateWidth { got: usize, expected: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FilterKind {
    /// First-difference estimate with exponential smoothing. State is
    /// `[estimate, previous input]`; update
    /// `d+ = a*d + (1 - a)*(y - y_prev) / T`, output `d+`.
    DirtyDerivative { smoothing: f64 },
    /// Accumulator with geometric forgetting. State is `[sum]`; update
    /// `x+ = leak*x + T*y`, output `x+`.
    LossyIntegrator { leak: f64 },
}

impl FilterKind {
    pub fn name(&self) -> &'static str {
        match self {
            FilterKind::DirtyDerivative { .. } => "dirty_derivative",
            FilterKind::LossyIntegrator { .. } => "lossy_integrator",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DiscreteFilter {
    kind: FilterKind,
    period: f64,
}

impl DiscreteFilter {
    /// `period` is the spacing of the sample stream this filter is clocked
    /// by; for filters attached to the estimator that is the measurement
    /// grid spacing, not the base period.
    pub fn new(kind: FilterKind, period: f64) -> Result<Self, FilterError> {
        if !(period > 0.0) {
            return Err(FilterError::BadPeriod(period));
        }
        match kind {
            FilterKind::DirtyDerivative { smoothing } => {
                if !(0.0..1.0).contains(&smoothing) {
                    return Err(FilterError::BadSmoothing(smoothing));
                }
            }
            FilterKind::LossyIntegrator { leak } => {
                if !(0.0..=1.0).contains(&leak) {
                    return Err(FilterError::BadLeak(leak));
                }
            }
        }
        Ok(DiscreteFilter { kind, period })
    }

    pub fn kind(&self) -> FilterKind {
        self.kind
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            FilterKind::DirtyDerivative { .. } => 2,
            FilterKind::LossyIntegrator { .. } => 1,
        }
    }

    pub fn initial_state(&self) -> DVector<f64> {
        DVector::zeros(self.state_dim())
    }

    /// Advance one sample: returns the next state and the output read from it.
    pub fn step(&self, state: &DVector<f64>, y: f64) -> (DVector<f64>, f64) {
        debug_assert_eq!(state.len(), self.state_dim());
        match self.kind {
            FilterKind::DirtyDerivative { smoothing } => {
                let d = smoothing * state[0] + (1.0 - smoothing) * (y - state[1]) / self.period;
                (DVector::from_vec(vec![d, y]), d)
            }
            FilterKind::LossyIntegrator { leak } => {
                let x = leak * state[0] + self.period * y;
                (DVector::from_vec(vec![x]), x)
            }
        }
    }

    /// Run the filter over a whole sequence from `start`, returning the final
    /// state and one output per input sample.
    pub fn replay(&self, start: &DVector<f64>, inputs: &[f64]) -> (DVector<f64>, Vec<f64>) {
        let mut state = start.clone();
        let mut outputs = Vec::with_capacity(inputs.len());
        for &y in inputs {
            let (next, out) = self.step(&state, y);
            state = next;
            outputs.push(out);
        }
        (state, outputs)
    }
}

/// Joint state of every member of a bank, one vector per filter.
pub type BankState = Vec<DVector<f64>>;

/// An ordered set of filters applied to the same scalar measurement. The
/// augmented row a bank produces is `[y, f1(y), f2(y), ...]`.
#[derive(Clone, Debug, Default)]
pub struct FilterBank {
    members: Vec<DiscreteFilter>,
}

impl FilterBank {
    pub fn new(members: Vec<DiscreteFilter>) -> Self {
        FilterBank { members }
    }

    pub fn empty() -> Self {
        FilterBank { members: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[DiscreteFilter] {
        &self.members
    }

    /// Width of an augmented measurement row: the raw channel plus one
    /// filtered channel per member.
    pub fn row_width(&self) -> usize {
        1 + self.members.len()
    }

    pub fn initial_state(&self) -> BankState {
        self.members.iter().map(|f| f.initial_state()).collect()
    }

    /// Advance every member one sample; returns next states and the filtered
    /// outputs in member order.
    pub fn step(&self, states: &BankState, y: f64) -> (BankState, Vec<f64>) {
        assert_eq!(states.len(), self.members.len(), "bank state arity mismatch");
        let mut next = Vec::with_capacity(self.members.len());
        let mut outs = Vec::with_capacity(self.members.len());
        for (f, s) in self.members.iter().zip(states) {
            let (ns, o) = f.step(s, y);
            next.push(ns);
            outs.push(o);
        }
        (next, outs)
    }

    /// Replay every member over a predicted output sequence. Returns the
    /// final joint state and, per input sample, the filtered outputs.
    pub fn replay(&self, start: &BankState, inputs: &[f64]) -> (BankState, Vec<Vec<f64>>) {
        let mut states = start.clone();
        let mut rows = Vec::with_capacity(inputs.len());
        for &y in inputs {
            let (next, outs) = self.step(&states, y);
            states = next;
            rows.push(outs);
        }
        (states, rows)
    }
}
