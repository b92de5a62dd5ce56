//! Moving-horizon state estimation for sampled nonlinear systems.
//!
//! The estimator keeps a sliding window of output samples, integrates the
//! model through the window from a candidate initial state, and drives that
//! candidate toward the measurements with a few fixed iterations of a
//! numerical optimizer per sample. On top of the plain estimator sit two
//! variants: a filtered one that augments each measurement with the outputs
//! of discrete filters driven by the raw signal, and an adaptive one that
//! decides per sample whether re-estimating is worth the integrations it
//! costs.
//!
//! The crate also ships a scenario harness (`harness`) and a small CLI that
//! run benchmark systems end to end and report work counters that do not
//! depend on the machine: integrator substeps and optimizer iterations.

pub mod dynamics;
pub mod estimators;
mod fd;
pub mod filters;
pub mod harness;
pub mod lifting;
pub mod metrics;
pub mod optimizer;

pub use dynamics::{flow, simulate, ContinuousModel, ControlSignal, IntegratorConfig};
pub use estimators::{Estimator, MheConfig, MheMode, StepRecord};
pub use lifting::{lift, lift_filtered, SampleBuffer, WeightSet};
pub use metrics::{CounterSnapshot, Counters, Phase};
pub use optimizer::{OptimizerConfig, OptimizerKind};
