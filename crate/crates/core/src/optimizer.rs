//! Fixed-budget iterative optimizers.
//!
//! The estimator runs a hard-capped number of optimizer iterations per
//! sample instead of iterating to convergence, so the per-sample work is
//! predictable. Three update rules are available: plain gradient descent, a
//! Gauss-Newton step on the weighted residual, and a full Newton step with
//! finite-difference Hessian. All derivatives are finite differences; the
//! model only ever gets evaluated through the objective.

use crate::fd;
use crate::lifting::LiftError;
use crate::metrics::Counters;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("{0}")]
pub struct EvalError(pub String);

impl From<LiftError> for EvalError {
    fn from(e: LiftError) -> Self {
        EvalError(e.to_string())
    }
}

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("objective evaluation failed at iteration {iteration}: {source}")]
    Evaluation { iteration: usize, source: EvalError },
    #[error("normal equations are singular; set damping > 0 to regularize them")]
    SingularNormalEquations,
    #[error("update produced a non-finite component at iteration {iteration}")]
    NonFiniteStep { iteration: usize },
}

/// What the optimizer minimizes. `evaluate` is the scalar cost;
/// `weighted_residual` is a stacked vector `r` with `|r|^2` equal to that
/// cost, which is what Gauss-Newton differentiates.
pub trait Objective {
    fn dim(&self) -> usize;
    fn evaluate(&self, z: &DVector<f64>) -> Result<f64, EvalError>;
    fn weighted_residual(&self, z: &DVector<f64>) -> Result<DVector<f64>, EvalError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    GradientDescent,
    GaussNewton,
    NewtonFd,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::GradientDescent => "gradient_descent",
            OptimizerKind::GaussNewton => "gauss_newton",
            OptimizerKind::NewtonFd => "newton_fd",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gradient_descent" => Ok(OptimizerKind::GradientDescent),
            "gauss_newton" => Ok(OptimizerKind::GaussNewton),
            "newton_fd" => Ok(OptimizerKind::NewtonFd),
            other => Err(format!(
                "unknown optimizer '{other}' (expected gradient_descent, gauss_newton, or newton_fd)"
            )),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Scales every update; 1.0 takes the raw Gauss-Newton or Newton step.
    pub step_size: f64,
    /// Iterations per estimation, spent unconditionally unless `early_exit`
    /// stops the loop first.
    pub iterations: usize,
    /// Levenberg-style shift added to the normal-equation matrix.
    pub damping: f64,
    /// Relative finite-difference step for gradients and Jacobians. The
    /// Hessian stencil widens this to its square root.
    pub fd_step: f64,
    /// Stop once an update moves less than this norm. `None` always spends
    /// the full budget.
    pub early_exit: Option<f64>,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, step_size: f64, iterations: usize) -> Self {
        OptimizerConfig {
            kind,
            step_size,
            iterations,
            damping: 1e-8,
            fd_step: 1e-6,
            early_exit: None,
        }
    }
}

/// One update of the chosen rule applied to `z`.
pub fn psi_step(
    obj: &dyn Objective,
    z: &DVector<f64>,
    cfg: &OptimizerConfig,
    iteration: usize,
) -> Result<DVector<f64>, OptimizerError> {
    let wrap = |source: EvalError| OptimizerError::Evaluation { iteration, source };
    let n = obj.dim();
    let delta = match cfg.kind {
        OptimizerKind::GradientDescent => {
            let mut f = |x: &DVector<f64>| obj.evaluate(x);
            fd::central_gradient(&mut f, z, cfg.fd_step).map_err(wrap)?
        }
        OptimizerKind::GaussNewton => {
            let r0 = obj.weighted_residual(z).map_err(wrap)?;
            let mut f = |x: &DVector<f64>| obj.weighted_residual(x);
            let jac = fd::forward_jacobian(&mut f, z, &r0, cfg.fd_step).map_err(wrap)?;
            let normal = jac.transpose() * &jac + DMatrix::identity(n, n) * cfg.damping;
            let rhs = jac.transpose() * r0;
            normal
                .cholesky()
                .ok_or(OptimizerError::SingularNormalEquations)?
                .solve(&rhs)
        }
        OptimizerKind::NewtonFd => {
            let mut f = |x: &DVector<f64>| obj.evaluate(x);
            let grad = fd::central_gradient(&mut f, z, cfg.fd_step).map_err(wrap)?;
            let mut f2 = |x: &DVector<f64>| obj.evaluate(x);
            let hess =
                fd::central_hessian(&mut f2, z, cfg.fd_step, cfg.fd_step.sqrt()).map_err(wrap)?;
            let damped = hess + DMatrix::identity(n, n) * cfg.damping;
            damped
                .lu()
                .solve(&grad)
                .ok_or(OptimizerError::SingularNormalEquations)?
        }
    };
    let next = z - delta * cfg.step_size;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(OptimizerError::NonFiniteStep { iteration });
    }
    Ok(next)
}

/// Run the configured number of updates from `z0`. The returned trace holds
/// the iterates including `z0`, so a full run has `iterations + 1` entries.
/// Every completed update bumps the iteration counter.
pub fn optimize(
    obj: &dyn Objective,
    z0: &DVector<f64>,
    cfg: &OptimizerConfig,
    counters: &Counters,
) -> Result<Vec<DVector<f64>>, OptimizerError> {
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    trace.push(z0.clone());
    let mut z = z0.clone();
    for i in 0..cfg.iterations {
        let next = psi_step(obj, &z, cfg, i)?;
        counters.add_opt_iteration();
        let moved = (&next - &z).norm();
        z = next;
        trace.push(z.clone());
        if let Some(tol) = cfg.early_exit {
            if moved <= tol {
                break;
            }
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    /// Scalar quadratic (x - 3)^2 with residual x - 3.
    struct Quad;

    impl Objective for Quad {
        fn dim(&self) -> usize {
            1
        }
        fn evaluate(&self, z: &DVector<f64>) -> Result<f64, EvalError> {
            Ok((z[0] - 3.0).powi(2))
        }
        fn weighted_residual(&self, z: &DVector<f64>) -> Result<DVector<f64>, EvalError> {
            Ok(dvector![z[0] - 3.0])
        }
    }

    /// Linear least squares: r(z) = A z - b.
    struct Linear {
        a: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl Objective for Linear {
        fn dim(&self) -> usize {
            self.a.ncols()
        }
        fn evaluate(&self, z: &DVector<f64>) -> Result<f64, EvalError> {
            Ok((&self.a * z - &self.b).norm_squared())
        }
        fn weighted_residual(&self, z: &DVector<f64>) -> Result<DVector<f64>, EvalError> {
            Ok(&self.a * z - &self.b)
        }
    }

    fn cfg(kind: OptimizerKind, step: f64, iters: usize) -> OptimizerConfig {
        OptimizerConfig::new(kind, step, iters)
    }

    #[test]
    fn newton_solves_a_quadratic_in_one_step() {
        let counters = Counters::new();
        let trace = optimize(
            &Quad,
            &dvector![0.0],
            &cfg(OptimizerKind::NewtonFd, 1.0, 1),
            &counters,
        )
        .unwrap();
        assert_eq!(trace.len(), 2);
        assert!((trace[1][0] - 3.0).abs() < 1e-6, "got {}", trace[1][0]);
        assert_eq!(counters.snapshot().opt_iterations, 1);
    }

    #[test]
    fn gradient_descent_takes_the_hand_computed_step() {
        // grad at 0 is -6; one step of size 0.1 moves to 0.6. Central
        // differences are exact on quadratics up to rounding.
        let counters = Counters::new();
        let trace = optimize(
            &Quad,
            &dvector![0.0],
            &cfg(OptimizerKind::GradientDescent, 0.1, 1),
            &counters,
        )
        .unwrap();
        assert!((trace[1][0] - 0.6).abs() < 1e-9, "got {}", trace[1][0]);
    }

    #[test]
    fn gauss_newton_lands_on_the_least_squares_solution() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, -1.0]);
        let b = dvector![1.0, 2.0, 2.5, -0.5];
        let obj = Linear { a: a.clone(), b: b.clone() };
        let normal = a.transpose() * &a;
        let expected = normal.lu().solve(&(a.transpose() * &b)).unwrap();
        let counters = Counters::new();
        let mut c = cfg(OptimizerKind::GaussNewton, 1.0, 1);
        c.damping = 0.0;
        let trace = optimize(&obj, &dvector![10.0, -7.0], &c, &counters).unwrap();
        assert!((&trace[1] - &expected).norm() < 1e-8, "got {}", trace[1]);
    }

    #[test]
    fn gauss_newton_matches_newton_on_linear_residuals() {
        let a = DMatrix::from_row_slice(3, 2, &[2.0, 1.0, 0.0, 1.0, 1.0, 3.0]);
        let b = dvector![1.0, -1.0, 0.5];
        let obj = Linear { a, b };
        let z0 = dvector![4.0, 4.0];
        let counters = Counters::new();
        let mut gn = cfg(OptimizerKind::GaussNewton, 1.0, 1);
        gn.damping = 0.0;
        let mut nw = cfg(OptimizerKind::NewtonFd, 1.0, 1);
        nw.damping = 0.0;
        let a_trace = optimize(&obj, &z0, &gn, &counters).unwrap();
        let b_trace = optimize(&obj, &z0, &nw, &counters).unwrap();
        assert!(
            (&a_trace[1] - &b_trace[1]).norm() < 1e-6,
            "gn {} vs newton {}",
            a_trace[1],
            b_trace[1]
        );
    }

    #[test]
    fn damping_shrinks_the_gauss_newton_step() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = dvector![5.0, 5.0];
        let obj = Linear { a, b };
        let z0 = dvector![0.0, 0.0];
        let mut norms = Vec::new();
        for damping in [0.0, 0.5, 2.0, 10.0] {
            let mut c = cfg(OptimizerKind::GaussNewton, 1.0, 1);
            c.damping = damping;
            let counters = Counters::new();
            let trace = optimize(&obj, &z0, &c, &counters).unwrap();
            norms.push((&trace[1] - &z0).norm());
        }
        for pair in norms.windows(2) {
            assert!(pair[1] < pair[0], "step norms not decreasing: {norms:?}");
        }
    }

    #[test]
    fn rank_deficient_normal_equations_error_without_damping() {
        // Second component never enters the residual, so J'J has a zero
        // eigenvalue and an undamped solve must refuse.
        struct HalfObserved;
        impl Objective for HalfObserved {
            fn dim(&self) -> usize {
                2
            }
            fn evaluate(&self, z: &DVector<f64>) -> Result<f64, EvalError> {
                Ok((z[0] - 1.0).powi(2))
            }
            fn weighted_residual(&self, z: &DVector<f64>) -> Result<DVector<f64>, EvalError> {
                Ok(dvector![z[0] - 1.0])
            }
        }
        let mut c = cfg(OptimizerKind::GaussNewton, 1.0, 1);
        c.damping = 0.0;
        let counters = Counters::new();
        let err = optimize(&HalfObserved, &dvector![0.0, 0.0], &c, &counters).unwrap_err();
        assert!(matches!(err, OptimizerError::SingularNormalEquations));
        c.damping = 1e-6;
        optimize(&HalfObserved, &dvector![0.0, 0.0], &c, &counters).unwrap();
    }

    #[test]
    fn descent_is_monotone_for_small_steps() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, 0.0, 1.0, 0.5, 0.5]);
        let b = dvector![1.0, 2.0, 0.0];
        let obj = Linear { a, b };
        let counters = Counters::new();
        let trace = optimize(
            &obj,
            &dvector![5.0, -5.0],
            &cfg(OptimizerKind::GradientDescent, 0.05, 25),
            &counters,
        )
        .unwrap();
        let costs: Vec<f64> = trace.iter().map(|z| obj.evaluate(z).unwrap()).collect();
        for pair in costs.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "cost rose: {costs:?}");
        }
        assert_eq!(counters.snapshot().opt_iterations, 25);
    }

    #[test]
    fn minimizer_is_a_fixed_point() {
        let counters = Counters::new();
        let trace = optimize(
            &Quad,
            &dvector![3.0],
            &cfg(OptimizerKind::NewtonFd, 1.0, 3),
            &counters,
        )
        .unwrap();
        for z in &trace {
            assert!((z[0] - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn early_exit_stops_once_steps_stall() {
        // Tolerance sits above the finite-difference noise floor, so the
        // stalled step is recognised on the first post-minimum iteration.
        let mut c = cfg(OptimizerKind::NewtonFd, 1.0, 10);
        c.early_exit = Some(1e-6);
        let counters = Counters::new();
        let trace = optimize(&Quad, &dvector![0.0], &c, &counters).unwrap();
        // One real step reaches the minimum; the next stalls and exits.
        assert!(trace.len() <= 3, "trace had {} entries", trace.len());
        assert!(counters.snapshot().opt_iterations < 10);
    }

    #[test]
    fn trace_includes_start_and_every_iterate() {
        let counters = Counters::new();
        let trace = optimize(
            &Quad,
            &dvector![0.0],
            &cfg(OptimizerKind::GradientDescent, 0.1, 4),
            &counters,
        )
        .unwrap();
        assert_eq!(trace.len(), 5);
        assert_eq!(trace[0][0], 0.0);
    }

    #[test]
    fn optimizer_names_round_trip() {
        for kind in [
            OptimizerKind::GradientDescent,
            OptimizerKind::GaussNewton,
            OptimizerKind::NewtonFd,
        ] {
            let parsed: OptimizerKind = kind.name().parse().unwrap();
            assert_eq!(parsed, kind);
        }
        assert!("newton".parse::<OptimizerKind>().is_err());
    }
}
