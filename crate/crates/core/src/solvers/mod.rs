//! Penalized quantile regression and lasso solvers.

mod cv;
mod lasso;
mod qr;
mod simplex;

pub use cv::{cross_validate_lambda0, cv_curve, default_lambda0_grid, fold_assignment, CvConfig};
pub use lasso::{soft_threshold, solve_lasso_ls, GramProblem};
pub use qr::{qr_certificate, qr_objective, solve_qr_lasso, QrProblem, WarmStart};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CoefVector, QuantileLevel};

/// Check loss `rho_tau(u) = u (tau - 1{u <= 0})`.
#[inline]
pub fn pinball_loss(u: f64, tau: QuantileLevel) -> f64 {
    let t = tau.value();
    if u > 0.0 {
        t * u
    } else {
        (t - 1.0) * u
    }
}

/// Algorithm for the l1-penalized quantile regression.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QrAlgorithm {
    /// Exact vertex method; `max_iter` bounds the pivots.
    #[default]
    Simplex,
    Admm,
}

/// Settings for the l1-penalized quantile regression solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QrSolverConfig {
    pub lambda: f64,
    pub algorithm: QrAlgorithm,
    pub max_iter: usize,
    pub tol: f64,
    pub admm_rho: f64,
    pub zero_threshold: f64,
}

impl Default for QrSolverConfig {
    fn default() -> Self {
        QrSolverConfig {
            lambda: 0.0,
            algorithm: QrAlgorithm::Simplex,
            max_iter: 10_000,
            tol: 1e-7,
            admm_rho: 1.0,
            zero_threshold: 1e-8,
        }
    }
}

impl QrSolverConfig {
    pub fn with_lambda(self, lambda: f64) -> Self {
        QrSolverConfig { lambda, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        check_common(self.lambda, self.max_iter, self.tol, self.zero_threshold)?;
        if !(self.admm_rho > 0.0 && self.admm_rho.is_finite()) {
            return Err(Error::InvalidConfig("admm_rho must be positive".into()));
        }
        Ok(())
    }
}

/// Settings for the coordinate-descent lasso.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LassoSolverConfig {
    pub lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub zero_threshold: f64,
}

impl Default for LassoSolverConfig {
    fn default() -> Self {
        LassoSolverConfig {
            lambda: 0.0,
            max_iter: 10_000,
            tol: 1e-7,
            zero_threshold: 1e-8,
        }
    }
}

impl LassoSolverConfig {
    pub fn with_lambda(self, lambda: f64) -> Self {
        LassoSolverConfig { lambda, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        check_common(self.lambda, self.max_iter, self.tol, self.zero_threshold)
    }
}

fn check_common(lambda: f64, max_iter: usize, tol: f64, zero_threshold: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
    }
    if max_iter == 0 {
        return Err(Error::InvalidConfig("max_iter must be positive".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig("tol must be positive".into()));
    }
    if !(zero_threshold > 0.0) {
        return Err(Error::InvalidConfig("zero_threshold must be positive".into()));
    }
    Ok(())
}

/// Outcome of a single solve.
///
/// `certificate` is the infinity norm of the smallest subgradient of the
/// objective found at `coef`; zero at an exact optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub coef: CoefVector,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub certificate: f64,
}
