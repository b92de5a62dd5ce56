//! Machine-independent work counters.
//!
//! All cost reporting in this crate is based on two integer counters that do
//! not depend on the host: integrator substeps and optimizer iterations.
//! A [`Counters`] instance is owned by a single run and threaded by shared
//! reference through the numerics; interior mutability keeps call sites free
//! of `&mut` plumbing. Runs are single-threaded, so `Cell` is enough.

use std::cell::Cell;

/// Which phase of an estimation run is currently charging integration work.
///
/// The estimator switches the phase before dispatching into the integrator so
/// that the final tallies split into buffer fill, in-optimization lifting, and
/// estimate propagation. The three parts sum exactly to the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Open-loop propagation while the sample buffer is still filling.
    Fill,
    /// Lifting and objective evaluations inside the optimisation loop.
    Estimation,
    /// Window re-propagation and open-loop advances after (or between) fits.
    Propagation,
}

#[derive(Debug)]
pub struct Counters {
    phase: Cell<Phase>,
    integ_fill: Cell<u64>,
    integ_estimation: Cell<u64>,
    integ_propagation: Cell<u64>,
    opt_iterations: Cell<u64>,
    estimations: Cell<u64>,
    skipped: Cell<u64>,
}

impl Default for Counters {
    fn default() -> Self {
        Self::new()
    }
}

impl Counters {
    pub fn new() -> Self {
        Counters {
            phase: Cell::new(Phase::Fill),
            integ_fill: Cell::new(0),
            integ_estimation: Cell::new(0),
            integ_propagation: Cell::new(0),
            opt_iterations: Cell::new(0),
            estimations: Cell::new(0),
            skipped: Cell::new(0),
        }
    }

    pub fn set_phase(&self, phase: Phase) {
        self.phase.set(phase);
    }

    pub fn phase(&self) -> Phase {
        self.phase.get()
    }

    /// Charge integrator substeps to the current phase.
    pub fn add_substeps(&self, n: u64) {
        let cell = match self.phase.get() {
            Phase::Fill => &self.integ_fill,
            Phase::Estimation => &self.integ_estimation,
            Phase::Propagation => &self.integ_propagation,
        };
        cell.set(cell.get() + n);
    }

    pub fn add_opt_iteration(&self) {
        self.opt_iterations.set(self.opt_iterations.get() + 1);
    }

    pub fn add_estimation(&self) {
        self.estimations.set(self.estimations.get() + 1);
    }

    pub fn add_skip(&self) {
        self.skipped.set(self.skipped.get() + 1);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            integ_fill: self.integ_fill.get(),
            integ_estimation: self.integ_estimation.get(),
            integ_propagation: self.integ_propagation.get(),
            opt_iterations: self.opt_iterations.get(),
            estimations: self.estimations.get(),
            skipped: self.skipped.get(),
        }
    }
}

/// Plain-value copy of the counters at one instant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub integ_fill: u64,
    pub integ_estimation: u64,
    pub integ_propagation: u64,
    pub opt_iterations: u64,
    pub estimations: u64,
    pub skipped: u64,
}

impl CounterSnapshot {
    pub fn integ_total(&self) -> u64 {
        self.integ_fill + self.integ_estimation + self.integ_propagation
    }
}
