//! Objective evaluation:
//!
//! ```text
//! Σ_k (1/n_k)‖y_k − X_kβ_k − β_{0,k}‖² + λ Σ_k ‖β_k − β̄‖² + α Σ_k ‖β_k‖² + δ Σ_k ‖z_k − z̄‖²
//! ```
//!
//! `β̄` and `z̄` are always recomputed as row means of `B` and `Z`; the values
//! stored on a [`ModelFit`] are never read here.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::problem::{row_mean, row_mean_bool, CenteredProblem, Hyperparameters, ModelFit, MtlProblem};

/// The four unweighted pieces of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms {
    pub data: f64,
    pub bbar: f64,
    pub ridge: f64,
    pub zbar: f64,
}

impl ObjectiveTerms {
    pub fn total(&self, hyper: &Hyperparameters) -> f64 {
        self.data + hyper.lambda * self.bbar + hyper.alpha * self.ridge + hyper.effective_delta() * self.zbar
    }
}

pub fn objective(problem: &MtlProblem, fit: &ModelFit, hyper: &Hyperparameters) -> Result<f64> {
    Ok(objective_terms(problem, fit)?.total(hyper))
}

pub fn objective_terms(problem: &MtlProblem, fit: &ModelFit) -> Result<ObjectiveTerms> {
    let (p, k) = (problem.p(), problem.k());
    if fit.b.shape() != (p, k) || fit.z.shape() != (p, k) || fit.intercepts.len() != k {
        return Err(Error::Dimension(format!(
            "fit has B {:?}, Z {:?}, {} intercepts; problem is p = {p}, K = {k}",
            fit.b.shape(),
            fit.z.shape(),
            fit.intercepts.len()
        )));
    }
    if fit.b.iter().chain(fit.intercepts.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model coefficients".into()));
    }
    let mut data = 0.0;
    for (k, task) in problem.tasks().iter().enumerate() {
        let r = &task.y - &task.x * fit.b.column(k);
        data += r.add_scalar(-fit.intercepts[k]).norm_squared() / task.n() as f64;
    }
    let value = ObjectiveTerms {
        data,
        bbar: bbar_term(&fit.b),
        ridge: ridge_term(&fit.b),
        zbar: zbar_term(&fit.z),
    };
    if ![value.data, value.bbar, value.ridge].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("objective".into()));
    }
    Ok(value)
}

/// `Σ_k ‖β_k − β̄‖²` with `β̄` the row mean of `b`.
pub fn bbar_term(b: &DMatrix<f64>) -> f64 {
    let mean = row_mean(b);
    b.column_iter().fold(0.0, |acc, col| acc + (col - &mean).norm_squared())
}

pub fn ridge_term(b: &DMatrix<f64>) -> f64 {
    b.column_iter().fold(0.0, |acc, col| acc + col.norm_squared())
}

/// `Σ_k ‖z_k − z̄‖²` with `z̄` the row mean of `z`.
pub fn zbar_term(z: &DMatrix<bool>) -> f64 {
    let mean = row_mean_bool(z);
    let mut total = 0.0;
    for k in 0..z.ncols() {
        for j in 0..z.nrows() {
            let d = if z[(j, k)] { 1.0 } else { 0.0 } - mean[j];
            total += d * d;
        }
    }
    total
}

/// Objective on centered data, i.e. with intercepts at their optimum.
pub(crate) fn centered_objective(cp: &CenteredProblem, b: &DMatrix<f64>, z: &DMatrix<bool>, hyper: &Hyperparameters) -> f64 {
    let mut data = 0.0;
    for (k, t) in cp.tasks.iter().enumerate() {
        data += residual(&t.data.x, &t.data.y, b.column(k).as_slice()).norm_squared() / t.data.n() as f64;
    }
    let terms = ObjectiveTerms { data, bbar: bbar_term(b), ridge: ridge_term(b), zbar: zbar_term(z) };
    terms.total(hyper)
}

/// `y − Xβ`, skipping zero coefficients.
pub(crate) fn residual(x: &DMatrix<f64>, y: &DVector<f64>, beta: &[f64]) -> DVector<f64> {
    let mut r = y.clone();
    for (j, &bj) in beta.iter().enumerate() {
        if bj != 0.0 {
            r.axpy(-bj, &x.column(j), 1.0);
        }
    }
    r
}
