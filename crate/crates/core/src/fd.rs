//! Finite-difference stencils shared by the objective gradient and the
//! optimizer steps.
//!
//! Every stencil perturbs component `i` by `step * (1 + |x_i|)`: absolute for
//! small components, relative for large ones. Hessians difference the central
//! gradient and use a wider perturbation, `sqrt(step)`-scaled by the caller,
//! since second differences lose twice the precision of first ones.

use nalgebra::{DMatrix, DVector};

pub(crate) fn scale(step: f64, component: f64) -> f64 {
    step * (1.0 + component.abs())
}

pub(crate) fn central_gradient<E>(
    f: &mut dyn FnMut(&DVector<f64>) -> Result<f64, E>,
    x: &DVector<f64>,
    step: f64,
) -> Result<DVector<f64>, E> {
    let n = x.len();
    let mut g = DVector::zeros(n);
    let mut probe = x.clone();
    for i in 0..n {
        let h = scale(step, x[i]);
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        g[i] = (up - down) / (2.0 * h);
    }
    Ok(g)
}

/// Jacobian of a vector-valued map by forward differences, reusing the
/// caller's base evaluation `f0 = f(x)`.
pub(crate) fn forward_jacobian<E>(
    f: &mut dyn FnMut(&DVector<f64>) -> Result<DVector<f64>, E>,
    x: &DVector<f64>,
    f0: &DVector<f64>,
    step: f64,
) -> Result<DMatrix<f64>, E> {
    let n = x.len();
    let rows = f0.len();
    let mut jac = DMatrix::zeros(rows, n);
    let mut probe = x.clone();
    for i in 0..n {
        let h = scale(step, x[i]);
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i];
        jac.set_column(i, &((up - f0) / h));
    }
    Ok(jac)
}

/// Symmetrized Hessian: central differences of the central gradient.
/// `grad_step` feeds the inner gradient stencil, `hess_step` the outer one.
pub(crate) fn central_hessian<E>(
    f: &mut dyn FnMut(&DVector<f64>) -> Result<f64, E>,
    x: &DVector<f64>,
    grad_step: f64,
    hess_step: f64,
) -> Result<DMatrix<f64>, E> {
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut probe = x.clone();
    for j in 0..n {
        let h = scale(hess_step, x[j]);
        probe[j] = x[j] + h;
        let up = central_gradient(f, &probe, grad_step)?;
        probe[j] = x[j] - h;
        let down = central_gradient(f, &probe, grad_step)?;
        probe[j] = x[j];
        hess.set_column(j, &((up - down) / (2.0 * h)));
    }
    // Symmetrize: the two difference orders agree only to truncation error.
    let ht = hess.transpose();
    Ok((hess + ht) * 0.5)
}
