//! Cyclic coordinate descent for `(1/(2n)) |y - X b|^2 + lambda |b|_1`.
//!
//! Works on the covariance form `G = X'X/n`, `c = X'y/n`, keeping the
//! partial-residual correlations `q = c - G b` up to date after each move.
//! Pooled problems are assembled by summing per-block Gram matrices.

use nalgebra::{DMatrix, DVector};

use super::{LassoSolverConfig, SolveReport};
use crate::error::{Error, Result};
use crate::model::CoefVector;

/// `sign(z) max(|z| - gamma, 0)`.
#[inline]
pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Sufficient statistics of a least-squares problem, normalized by `n`.
#[derive(Debug, Clone)]
pub struct GramProblem {
    gram: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    n: usize,
}

impl GramProblem {
    pub fn from_data(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "X has {} rows but y has {} entries",
                x.nrows(),
                y.len()
            )));
        }
        let n = x.nrows().max(1) as f64;
        Ok(GramProblem {
            gram: x.tr_mul(x) / n,
            xty: x.tr_mul(y) / n,
            yty: y.norm_squared() / n,
            n: x.nrows(),
        })
    }

    /// Unnormalized blocks `(X'X, X'y, y'y, n)` pooled in the given order.
    pub fn pooled<'a, I>(blocks: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a DMatrix<f64>, &'a DVector<f64>, f64, usize)>,
    {
        let mut acc: Option<(DMatrix<f64>, DVector<f64>, f64, usize)> = None;
        for (g, c, yy, n) in blocks {
            acc = Some(match acc {
                None => (g.clone(), c.clone(), yy, n),
                Some((ag, ac, ayy, an)) => {
                    if ag.shape() != g.shape() || ac.len() != c.len() {
                        return Err(Error::DimensionMismatch("pooled blocks differ in p".into()));
                    }
                    (ag + g, ac + c, ayy + yy, an + n)
                }
            });
        }
        let (g, c, yy, n) = acc.ok_or_else(|| Error::EmptyDataset("no blocks to pool".into()))?;
        let nf = n.max(1) as f64;
        Ok(GramProblem { gram: g / nf, xty: c / nf, yty: yy / nf, n })
    }

    pub fn p(&self) -> usize {
        self.xty.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn objective(&self, beta: &DVector<f64>, lambda: f64) -> f64 {
        let quad = beta.dot(&(&self.gram * beta));
        0.5 * self.yty - self.xty.dot(beta) + 0.5 * quad + lambda * beta.lp_norm(1)
    }

    /// Largest KKT violation at `beta`.
    pub fn kkt_violation(&self, beta: &DVector<f64>, lambda: f64) -> f64 {
        let q = &self.xty - &self.gram * beta;
        q.iter()
            .zip(beta.iter())
            .map(|(&qj, &bj)| {
                if bj != 0.0 {
                    (qj - lambda * bj.signum()).abs()
                } else {
                    (qj.abs() - lambda).max(0.0)
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn solve(&self, cfg: &LassoSolverConfig, warm: Option<&DVector<f64>>) -> Result<SolveReport> {
        cfg.validate()?;
        let p = self.p();
        let lambda = cfg.lambda;
        let mut beta = match warm {
            Some(b) if b.len() == p => b.clone(),
            Some(_) => return Err(Error::DimensionMismatch("warm start length".into())),
            None => DVector::zeros(p),
        };
        let mut q = &self.xty - &self.gram * &beta;
        let mut iterations = 0;
        let mut converged = false;
        #[cfg(debug_assertions)]
        let mut last_obj = self.objective(&beta, lambda);

        let mut active: Vec<usize> = Vec::with_capacity(p);
        while iterations < cfg.max_iter {
            iterations += 1;
            let full = self.sweep(0..p, lambda, &mut beta, &mut q);
            #[cfg(debug_assertions)]
            {
                let obj = self.objective(&beta, lambda);
                debug_assert!(
                    obj <= last_obj + 1e-10 * (1.0 + last_obj.abs()),
                    "coordinate descent objective increased: {last_obj} -> {obj}"
                );
                last_obj = obj;
            }
            if full < cfg.tol {
                converged = true;
                break;
            }
            active.clear();
            active.extend((0..p).filter(|&j| beta[j] != 0.0));
            while iterations < cfg.max_iter {
                iterations += 1;
                let delta = self.sweep(active.iter().copied(), lambda, &mut beta, &mut q);
                if delta < cfg.tol {
                    break;
                }
            }
        }

        let coef = CoefVector::new(beta).hard_zero(cfg.zero_threshold);
        let certificate = self.kkt_violation(coef.as_dvector(), lambda);
        Ok(SolveReport {
            objective: self.objective(coef.as_dvector(), lambda),
            coef,
            iterations,
            converged,
            certificate,
        })
    }

    /// One pass over `coords`; returns the largest coefficient change.
    fn sweep<I: Iterator<Item = usize>>(
        &self,
        coords: I,
        lambda: f64,
        beta: &mut DVector<f64>,
        q: &mut DVector<f64>,
    ) -> f64 {
        let mut max_delta: f64 = 0.0;
        for j in coords {
            let gjj = self.gram[(j, j)];
            if gjj <= 0.0 {
                continue;
            }
            let old = beta[j];
            let new = soft_threshold(q[j] + gjj * old, lambda) / gjj;
            let delta = new - old;
            if delta != 0.0 {
                beta[j] = new;
                q.axpy(-delta, &self.gram.column(j), 1.0);
                max_delta = max_delta.max(delta.abs());
            }
        }
        max_delta
    }
}

/// Solves the lasso on raw data.
pub fn solve_lasso_ls(x: &DMatrix<f64>, y: &DVector<f64>, cfg: &LassoSolverConfig) -> Result<SolveReport> {
    GramProblem::from_data(x, y)?.solve(cfg, None)
}
