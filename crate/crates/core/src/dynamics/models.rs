//! Benchmark model catalog.
//!
//! Every model is assembled from a named-parameter map so scenario files can
//! declare coefficients directly. Unknown keys are rejected and missing keys
//! are reported together, not one at a time.

use super::{ContinuousModel, ModelParams};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Clone, Debug, PartialEq)]
pub enum ParamValue {
    Scalar(f64),
    Matrix(DMatrix<f64>),
}

impl ParamValue {
    pub fn scalar(v: f64) -> Self {
        ParamValue::Scalar(v)
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Scalar(v) => write!(f, "{v}"),
            ParamValue::Matrix(m) => {
                write!(f, "[")?;
                for (i, row) in m.row_iter().enumerate() {
                    if i > 0 {
                        write!(f, "; ")?;
                    }
                    let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                    write!(f, "{}", cells.join(" "))?;
                }
                write!(f, "]")
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    VanDerPol,
    Runaway,
    DoublePendulum,
    Lti,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::VanDerPol => "van_der_pol",
            ModelKind::Runaway => "runaway",
            ModelKind::DoublePendulum => "double_pendulum",
            ModelKind::Lti => "lti",
        }
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "van_der_pol" => Ok(ModelKind::VanDerPol),
            "runaway" => Ok(ModelKind::Runaway),
            "double_pendulum" => Ok(ModelKind::DoublePendulum),
            "lti" => Ok(ModelKind::Lti),
            other => Err(ModelError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown model kind '{0}' (see list-models)")]
    UnknownKind(String),
    #[error("{kind}: missing parameters: {}", keys.join(", "))]
    MissingParams { kind: &'static str, keys: Vec<String> },
    #[error("{kind}: unknown parameters: {}", keys.join(", "))]
    UnknownParams { kind: &'static str, keys: Vec<String> },
    #[error("{kind}: parameter '{key}' must be a {expected}")]
    WrongType { kind: &'static str, key: &'static str, expected: &'static str },
    #[error("{kind}: {reason}")]
    NonPhysical { kind: &'static str, reason: String },
    #[error("{kind}: {reason}")]
    BadShape { kind: &'static str, reason: String },
}

/// A built model plus any configuration warnings worth surfacing in run logs
/// (degenerate but legal coefficient choices).
#[derive(Debug)]
pub struct ModelBuild {
    pub model: ContinuousModel,
    pub warnings: Vec<String>,
}

/// Catalog entry for CLI listing.
pub struct ModelInfo {
    pub kind: ModelKind,
    pub summary: &'static str,
    pub required: &'static [&'static str],
    pub optional: &'static [&'static str],
    pub dims: &'static str,
}

pub fn model_catalog() -> Vec<ModelInfo> {
    vec![
        ModelInfo {
            kind: ModelKind::VanDerPol,
            summary: "Van der Pol oscillator, forced: x1' = x2, x2' = mu(1 - x1^2)x2 - x1 + u",
            required: &["mu"],
            optional: &[],
            dims: "n=2 m=1 p=1 (y = x1)",
        },
        ModelInfo {
            kind: ModelKind::Runaway,
            summary: "Burst-mode plasma interaction with an unknown constant third state; input unused",
            required: &["epsilon", "nu", "gamma1", "w_t", "s", "q"],
            optional: &[],
            dims: "n=3 m=1 p=1 (y = x2)",
        },
        ModelInfo {
            kind: ModelKind::DoublePendulum,
            summary: "Two-link planar pendulum, point masses at link ends, torque inputs at both joints",
            required: &["m1", "m2", "l1", "l2", "g"],
            optional: &["b1", "b2"],
            dims: "n=4 m=2 p=1 (y = q1)",
        },
        ModelInfo {
            kind: ModelKind::Lti,
            summary: "Linear time-invariant system x' = Ax + Bu, y = Cx",
            required: &["a", "b", "c"],
            optional: &[],
            dims: "n, m, p from matrix shapes",
        },
    ]
}

/// Tracks which keys a builder consumed so leftovers and absences can be
/// reported in one shot.
struct ParamReader<'a> {
    kind: &'static str,
    params: &'a ModelParams,
    used: BTreeSet<&'a str>,
    missing: Vec<String>,
    type_error: Option<ModelError>,
}

impl<'a> ParamReader<'a> {
    fn new(kind: &'static str, params: &'a ModelParams) -> Self {
        ParamReader { kind, params, used: BTreeSet::new(), missing: Vec::new(), type_error: None }
    }

    fn lookup(&mut self, key: &'static str) -> Option<&'a ParamValue> {
        match self.params.get_key_value(key) {
            Some((k, v)) => {
                self.used.insert(k.as_str());
                Some(v)
            }
            None => None,
        }
    }

    fn scalar(&mut self, key: &'static str) -> f64 {
        match self.lookup(key) {
            Some(ParamValue::Scalar(v)) => *v,
            Some(ParamValue::Matrix(_)) => {
                self.type_error.get_or_insert(ModelError::WrongType {
                    kind: self.kind,
                    key,
                    expected: "scalar",
                });
                f64::NAN
            }
            None => {
                self.missing.push(key.to_string());
                f64::NAN
            }
        }
    }

    fn scalar_or(&mut self, key: &'static str, default: f64) -> f64 {
        match self.lookup(key) {
            Some(ParamValue::Scalar(v)) => *v,
            Some(ParamValue::Matrix(_)) => {
                self.type_error.get_or_insert(ModelError::WrongType {
                    kind: self.kind,
                    key,
                    expected: "scalar",
                });
                f64::NAN
            }
            None => default,
        }
    }

    fn matrix(&mut self, key: &'static str) -> Option<DMatrix<f64>> {
        match self.lookup(key) {
            Some(ParamValue::Matrix(m)) => Some(m.clone()),
            Some(ParamValue::Scalar(v)) => Some(DMatrix::from_element(1, 1, *v)),
            None => {
                self.missing.push(key.to_string());
                None
            }
        }
    }

    fn finish(self) -> Result<(), ModelError> {
        if let Some(err) = self.type_error {
            return Err(err);
        }
        if !self.missing.is_empty() {
            return Err(ModelError::MissingParams { kind: self.kind, keys: self.missing });
        }
        let unknown: Vec<String> = self
            .params
            .keys()
            .filter(|k| !self.used.contains(k.as_str()))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(ModelError::UnknownParams { kind: self.kind, keys: unknown });
        }
        Ok(())
    }
}

pub fn make_model(kind: ModelKind, params: &ModelParams) -> Result<ModelBuild, ModelError> {
    match kind {
        ModelKind::VanDerPol => van_der_pol(params),
        ModelKind::Runaway => runaway(params),
        ModelKind::DoublePendulum => double_pendulum(params),
        ModelKind::Lti => lti(params),
    }
}

fn van_der_pol(params: &ModelParams) -> Result<ModelBuild, ModelError> {
    let mut r = ParamReader::new("van_der_pol", params);
    let mu = r.scalar("mu");
    r.finish()?;
    let mut warnings = Vec::new();
    if mu <= 0.0 {
        warnings.push(format!("van_der_pol: mu = {mu} removes the limit cycle"));
    }
    let model = ContinuousModel::new(
        2,
        1,
        1,
        Box::new(move |x, u| {
            DVector::from_vec(vec![x[1], mu * (1.0 - x[0] * x[0]) * x[1] - x[0] + u[0]])
        }),
        Box::new(|x, _| DVector::from_vec(vec![x[0]])),
    );
    Ok(ModelBuild { model, warnings })
}

fn runaway(params: &ModelParams) -> Result<ModelBuild, ModelError> {
    let mut r = ParamReader::new("runaway", params);
    let epsilon = r.scalar("epsilon");
    let nu = r.scalar("nu");
    let gamma1 = r.scalar("gamma1");
    let w_t = r.scalar("w_t");
    let s = r.scalar("s");
    let q = r.scalar("q");
    r.finish()?;
    if w_t <= 0.0 {
        return Err(ModelError::NonPhysical {
            kind: "runaway",
            reason: format!("saturation level w_t = {w_t} must be positive"),
        });
    }
    let mut warnings = Vec::new();
    if epsilon == 0.0 {
        warnings.push("runaway: epsilon = 0 freezes the dynamics entirely".to_string());
    }
    // Third state is a constant coupling coefficient; its derivative is
    // exactly zero so every integrator preserves it bit for bit.
    let model = ContinuousModel::new(
        3,
        1,
        1,
        Box::new(move |x, _| {
            let (x1, x2, x3) = (x[0], x[1], x[2]);
            let d1 = epsilon * (-2.0 * x1 * x2 - 2.0 * s + q);
            let d2 = epsilon * (-nu * x2 + x3 * (x1 * x2 + s) - gamma1 * x2 / (1.0 + x2 / w_t));
            DVector::from_vec(vec![d1, d2, 0.0])
        }),
        Box::new(|x, _| DVector::from_vec(vec![x[1]])),
    );
    Ok(ModelBuild { model, warnings })
}

fn double_pendulum(params: &ModelParams) -> Result<ModelBuild, ModelError> {
    let mut r = ParamReader::new("double_pendulum", params);
    let m1 = r.scalar("m1");
    let m2 = r.scalar("m2");
    let l1 = r.scalar("l1");
    let l2 = r.scalar("l2");
    let g = r.scalar("g");
    let b1 = r.scalar_or("b1", 0.0);
    let b2 = r.scalar_or("b2", 0.0);
    r.finish()?;
    for (name, v) in [("m1", m1), ("m2", m2), ("l1", l1), ("l2", l2)] {
        if v <= 0.0 {
            return Err(ModelError::NonPhysical {
                kind: "double_pendulum",
                reason: format!("{name} = {v} must be positive"),
            });
        }
    }
    for (name, v) in [("b1", b1), ("b2", b2)] {
        if v < 0.0 {
            return Err(ModelError::NonPhysical {
                kind: "double_pendulum",
                reason: format!("friction {name} = {v} must be nonnegative"),
            });
        }
    }
    let model = ContinuousModel::new(
        4,
        2,
        1,
        Box::new(move |x, tau| {
            // State [q1, q2, q1', q2']: q1 from the downward vertical, q2
            // relative to link 1. Point masses at the link ends.
            let (q1, q2, dq1, dq2) = (x[0], x[1], x[2], x[3]);
            let (s1, c2, s2) = (q1.sin(), q2.cos(), q2.sin());
            let s12 = (q1 + q2).sin();
            let m11 = (m1 + m2) * l1 * l1 + m2 * l2 * l2 + 2.0 * m2 * l1 * l2 * c2;
            let m12 = m2 * l2 * l2 + m2 * l1 * l2 * c2;
            let m22 = m2 * l2 * l2;
            let hc = m2 * l1 * l2 * s2;
            let cor1 = -hc * dq2 * dq1 - hc * (dq1 + dq2) * dq2;
            let cor2 = hc * dq1 * dq1;
            let g1 = (m1 + m2) * g * l1 * s1 + m2 * g * l2 * s12;
            let g2 = m2 * g * l2 * s12;
            let rhs = Vector2::new(
                tau[0] - cor1 - b1 * dq1 - g1,
                tau[1] - cor2 - b2 * dq2 - g2,
            );
            let mass = Matrix2::new(m11, m12, m12, m22);
            let qdd = mass.lu().solve(&rhs).expect("inertia matrix is positive definite");
            DVector::from_vec(vec![dq1, dq2, qdd[0], qdd[1]])
        }),
        Box::new(|x, _| DVector::from_vec(vec![x[0]])),
    );
    Ok(ModelBuild { model, warnings: Vec::new() })
}

fn lti(params: &ModelParams) -> Result<ModelBuild, ModelError> {
    let mut r = ParamReader::new("lti", params);
    let a = r.matrix("a");
    let b = r.matrix("b");
    let c = r.matrix("c");
    r.finish()?;
    let (a, b, c) = (a.unwrap(), b.unwrap(), c.unwrap());
    if a.nrows() != a.ncols() {
        return Err(ModelError::BadShape {
            kind: "lti",
            reason: format!("A must be square, got {}x{}", a.nrows(), a.ncols()),
        });
    }
    let n = a.nrows();
    if b.nrows() != n {
        return Err(ModelError::BadShape {
            kind: "lti",
            reason: format!("B has {} rows, expected {n}", b.nrows()),
        });
    }
    if c.ncols() != n {
        return Err(ModelError::BadShape {
            kind: "lti",
            reason: format!("C has {} columns, expected {n}", c.ncols()),
        });
    }
    let m = b.ncols();
    let p = c.nrows();
    let (a2, c2) = (a.clone(), c.clone());
    let model = ContinuousModel::new(
        n,
        m,
        p,
        Box::new(move |x, u| &a2 * x + &b * u),
        Box::new(move |x, _| &c2 * x),
    );
    Ok(ModelBuild { model, warnings: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{flow, simulate, ControlSignal, IntegratorConfig};
    use crate::metrics::Counters;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn params(entries: &[(&str, f64)]) -> ModelParams {
        entries
            .iter()
            .map(|(k, v)| (k.to_string(), ParamValue::Scalar(*v)))
            .collect()
    }

    fn pendulum_params() -> ModelParams {
        params(&[("m1", 1.0), ("m2", 1.0), ("l1", 1.0), ("l2", 1.0), ("g", 9.81)])
    }

    /// Oracle: total mechanical energy of the two-link pendulum, written from
    /// the same kinetic/potential terms that generate the equations of motion.
    fn pendulum_energy(x: &nalgebra::DVector<f64>, m1: f64, m2: f64, l1: f64, l2: f64, g: f64) -> f64 {
        let (q1, q2, dq1, dq2) = (x[0], x[1], x[2], x[3]);
        let c2 = q2.cos();
        let m11 = (m1 + m2) * l1 * l1 + m2 * l2 * l2 + 2.0 * m2 * l1 * l2 * c2;
        let m12 = m2 * l2 * l2 + m2 * l1 * l2 * c2;
        let m22 = m2 * l2 * l2;
        let kinetic = 0.5 * (m11 * dq1 * dq1 + 2.0 * m12 * dq1 * dq2 + m22 * dq2 * dq2);
        let potential = -(m1 + m2) * g * l1 * q1.cos() - m2 * g * l2 * (q1 + q2).cos();
        kinetic + potential
    }

    #[test]
    fn van_der_pol_dimensions_and_equilibrium() {
        let build = make_model(ModelKind::VanDerPol, &params(&[("mu", 1.0)])).unwrap();
        let model = build.model;
        assert_eq!((model.state_dim(), model.input_dim(), model.output_dim()), (2, 1, 1));
        let dx = model.deriv(&dvector![0.0, 0.0], &dvector![0.0]);
        assert_eq!(dx, dvector![0.0, 0.0]);
        let u = ControlSignal::constant(0.0, dvector![0.0], 0.1);
        let counters = Counters::new();
        let x = flow(&model, &dvector![0.0, 0.0], &u, 0.0, 5.0, &IntegratorConfig::rk4(10), &counters)
            .unwrap();
        assert_eq!(x, dvector![0.0, 0.0]);
    }

    #[test]
    fn runaway_keeps_third_component_constant() {
        let build = make_model(
            ModelKind::Runaway,
            &params(&[
                ("epsilon", 1.0),
                ("nu", 1.0),
                ("gamma1", 2.0),
                ("w_t", 0.5),
                ("s", 0.1),
                ("q", 1.0),
            ]),
        )
        .unwrap();
        let model = build.model;
        assert_eq!((model.state_dim(), model.output_dim()), (3, 1));
        let u = ControlSignal::constant(0.0, dvector![0.0], 0.01);
        let counters = Counters::new();
        let x0 = dvector![0.7, 0.05, 3.0];
        let traj = simulate(&model, &x0, &u, 0.0, 5.0, 0.01, &IntegratorConfig::rk4(10), &counters)
            .unwrap();
        for x in &traj.states {
            assert_eq!(x[2].to_bits(), 3.0f64.to_bits());
        }
        for (x, y) in traj.states.iter().zip(&traj.outputs) {
            assert_eq!(y[0], x[1]);
        }
    }

    #[test]
    fn runaway_epsilon_zero_warns() {
        let build = make_model(
            ModelKind::Runaway,
            &params(&[
                ("epsilon", 0.0),
                ("nu", 1.0),
                ("gamma1", 2.0),
                ("w_t", 0.5),
                ("s", 0.1),
                ("q", 1.0),
            ]),
        )
        .unwrap();
        assert_eq!(build.warnings.len(), 1);
        assert!(build.warnings[0].contains("epsilon"));
    }

    #[test]
    fn pendulum_dimensions() {
        let build = make_model(ModelKind::DoublePendulum, &pendulum_params()).unwrap();
        let model = build.model;
        assert_eq!(
            (model.state_dim(), model.input_dim(), model.output_dim()),
            (4, 2, 1)
        );
        // Hanging at rest is an equilibrium.
        let dx = model.deriv(&dvector![0.0, 0.0, 0.0, 0.0], &dvector![0.0, 0.0]);
        assert_relative_eq!(dx.norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn pendulum_conserves_energy_without_friction_or_torque() {
        let build = make_model(ModelKind::DoublePendulum, &pendulum_params()).unwrap();
        let model = build.model;
        let u = ControlSignal::constant(0.0, dvector![0.0, 0.0], 0.001);
        let counters = Counters::new();
        let x0 = dvector![0.4, 0.3, 0.0, 0.0];
        let traj = simulate(&model, &x0, &u, 0.0, 10.0, 0.5, &IntegratorConfig::rk4(1), &counters)
            .unwrap();
        let e0 = pendulum_energy(&x0, 1.0, 1.0, 1.0, 1.0, 9.81);
        for x in &traj.states {
            let e = pendulum_energy(x, 1.0, 1.0, 1.0, 1.0, 9.81);
            assert!(
                ((e - e0) / e0).abs() < 1e-4,
                "energy drifted from {e0} to {e}"
            );
        }
    }

    #[test]
    fn friction_dissipates_pendulum_energy() {
        let mut p = pendulum_params();
        p.insert("b1".into(), ParamValue::Scalar(0.2));
        p.insert("b2".into(), ParamValue::Scalar(0.2));
        let model = make_model(ModelKind::DoublePendulum, &p).unwrap().model;
        let u = ControlSignal::constant(0.0, dvector![0.0, 0.0], 0.001);
        let counters = Counters::new();
        let x0 = dvector![0.4, 0.3, 0.0, 0.0];
        let xf = flow(&model, &x0, &u, 0.0, 5.0, &IntegratorConfig::rk4(1), &counters).unwrap();
        let e0 = pendulum_energy(&x0, 1.0, 1.0, 1.0, 1.0, 9.81);
        let ef = pendulum_energy(&xf, 1.0, 1.0, 1.0, 1.0, 9.81);
        assert!(ef < e0, "friction must dissipate energy: {e0} -> {ef}");
    }

    #[test]
    fn lti_zero_dynamics_identity_flow() {
        let mut p = ModelParams::new();
        p.insert("a".into(), ParamValue::Matrix(DMatrix::zeros(2, 2)));
        p.insert("b".into(), ParamValue::Matrix(DMatrix::zeros(2, 1)));
        p.insert("c".into(), ParamValue::Matrix(DMatrix::identity(2, 2)));
        let model = make_model(ModelKind::Lti, &p).unwrap().model;
        assert_eq!((model.state_dim(), model.input_dim(), model.output_dim()), (2, 1, 2));
        let u = ControlSignal::constant(0.0, dvector![0.0], 0.1);
        let counters = Counters::new();
        let x = flow(&model, &dvector![1.5, -2.0], &u, 0.0, 3.0, &IntegratorConfig::rk4(5), &counters)
            .unwrap();
        assert_eq!(x, dvector![1.5, -2.0]);
    }

    #[test]
    fn lti_harmonic_oscillator_matches_rotation() {
        let mut p = ModelParams::new();
        p.insert(
            "a".into(),
            ParamValue::Matrix(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])),
        );
        p.insert("b".into(), ParamValue::Matrix(DMatrix::zeros(2, 1)));
        p.insert("c".into(), ParamValue::Matrix(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])));
        let model = make_model(ModelKind::Lti, &p).unwrap().model;
        let u = ControlSignal::constant(0.0, dvector![0.0], 0.01);
        let counters = Counters::new();
        let t = 1.3;
        let x = flow(&model, &dvector![1.0, 0.0], &u, 0.0, t, &IntegratorConfig::rk4(10), &counters)
            .unwrap();
        assert_relative_eq!(x[0], t.cos(), epsilon = 1e-9);
        assert_relative_eq!(x[1], -t.sin(), epsilon = 1e-9);
    }

    #[test]
    fn missing_parameters_are_listed_together() {
        let err = make_model(ModelKind::DoublePendulum, &params(&[("m1", 1.0)])).unwrap_err();
        let msg = err.to_string();
        for key in ["m2", "l1", "l2", "g"] {
            assert!(msg.contains(key), "missing key {key} not named in: {msg}");
        }
    }

    #[test]
    fn unknown_parameters_are_rejected() {
        let mut p = params(&[("mu", 1.0)]);
        p.insert("mu2".into(), ParamValue::Scalar(0.5));
        let err = make_model(ModelKind::VanDerPol, &p).unwrap_err();
        assert!(matches!(err, ModelError::UnknownParams { .. }));
        assert!(err.to_string().contains("mu2"));
    }

    #[test]
    fn nonpositive_mass_is_rejected() {
        let mut p = pendulum_params();
        p.insert("m2".into(), ParamValue::Scalar(0.0));
        let err = make_model(ModelKind::DoublePendulum, &p).unwrap_err();
        assert!(matches!(err, ModelError::NonPhysical { .. }));
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert!(matches!("pendulum3".parse::<ModelKind>(), Err(ModelError::UnknownKind(_))));
    }

    #[test]
    fn lti_shape_mismatch_is_rejected() {
        let mut p = ModelParams::new();
        p.insert("a".into(), ParamValue::Matrix(DMatrix::zeros(2, 3)));
        p.insert("b".into(), ParamValue::Matrix(DMatrix::zeros(2, 1)));
        p.insert("c".into(), ParamValue::Matrix(DMatrix::identity(2, 2)));
        let err = make_model(ModelKind::Lti, &p).unwrap_err();
        assert!(matches!(err, ModelError::BadShape { .. }));
    }
}
