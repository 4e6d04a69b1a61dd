//! l1-penalized quantile regression.
//!
//! Two algorithms solve `(1/n) sum rho_tau(y_i - x_i'b) + lambda |b|_1`:
//! an exact simplex on the augmented weighted l1 fit (see `simplex`), and
//! ADMM on the rescaled split
//!
//! ```text
//! min  sum rho_tau(r_i) + n lambda |z|_1   s.t.  X b + r = y,  b = z
//! ```
//!
//! Both ADMM constraints share one penalty parameter, so the `b`-update solves
//! `(I + X'X) b = X'(y - r - u) + z - w` with a matrix that does not depend on
//! `rho`. Its inverse is formed once per design, in the `n x n` Woodbury form
//! when `p > n`.
//!
//! The optimum is a vertex of a polyhedral problem. Every few ADMM iterations
//! the support `S` of `z` is used to guess the interpolated rows `Z` (the `|S|`
//! smallest residuals); solving `X[Z,S] b_S = y_Z` and the matching dual system
//! gives an exact candidate, accepted only if it passes the subgradient
//! certificate.

use nalgebra::{DMatrix, DVector};

use std::sync::OnceLock;

use super::simplex::{self, SimplexBasis};
use super::{pinball_loss, QrAlgorithm, QrSolverConfig, SolveReport};
use crate::error::{Error, Result};
use crate::model::{CoefVector, Dataset, QuantileLevel};

const CHECK_EVERY: usize = 5;
const POLISH_EVERY: usize = 10;

enum Factor {
    /// `(I_p + X'X)^{-1}`
    Primal(DMatrix<f64>),
    /// `(I_n + XX')^{-1}`
    Dual(DMatrix<f64>),
}

/// A quantile regression design with its cached factorization, reusable
/// across penalty values.
pub struct QrProblem<'a> {
    data: &'a Dataset,
    tau: QuantileLevel,
    factor: OnceLock<Factor>,
    col_scale: f64,
    zero_resid: f64,
}

/// Solver state carried between solves on one design, for warm starts along
/// a penalty path.
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    admm: Option<AdmmState>,
    basis: Option<SimplexBasis>,
}

#[derive(Debug, Clone)]
struct AdmmState {
    beta: DVector<f64>,
    z: DVector<f64>,
    r: DVector<f64>,
    u: DVector<f64>,
    w: DVector<f64>,
    rho: f64,
}

impl AdmmState {
    fn cold(data: &Dataset, rho: f64) -> Self {
        AdmmState {
            beta: DVector::zeros(data.p()),
            z: DVector::zeros(data.p()),
            r: data.y().clone(),
            u: DVector::zeros(data.n()),
            w: DVector::zeros(data.p()),
            rho,
        }
    }
}

/// Mean check loss plus `lambda |beta|_1`.
pub fn qr_objective(data: &Dataset, tau: QuantileLevel, lambda: f64, beta: &CoefVector) -> f64 {
    let r = data.residuals(beta);
    let loss: f64 = r.iter().map(|&v| pinball_loss(v, tau)).sum::<f64>() / data.n() as f64;
    loss + lambda * beta.l1_norm()
}

/// Infinity norm of the best subgradient of the objective at `beta`, using
/// `g` to choose the check-loss subgradient on (numerically) zero residuals.
///
/// Each `g_i` is clipped into the subdifferential of `rho_tau` at residual
/// `i`; the l1 part is chosen optimally per coordinate.
pub fn qr_certificate(
    data: &Dataset,
    tau: QuantileLevel,
    lambda: f64,
    beta: &CoefVector,
    g: &DVector<f64>,
) -> f64 {
    let zero_resid = zero_residual_tol(data);
    certificate_inner(data, tau, lambda, beta.as_dvector(), g, zero_resid)
}

fn zero_residual_tol(data: &Dataset) -> f64 {
    let y_inf = data.y().amax();
    1e-9 * (1.0 + y_inf)
}

fn certificate_inner(
    data: &Dataset,
    tau: QuantileLevel,
    lambda: f64,
    beta: &DVector<f64>,
    g: &DVector<f64>,
    zero_resid: f64,
) -> f64 {
    let t = tau.value();
    let x = data.x();
    let mut r = data.y().clone();
    r.gemv(-1.0, x, beta, 1.0);
    let g = DVector::from_iterator(
        r.len(),
        r.iter().zip(g.iter()).map(|(&ri, &gi)| {
            if ri.abs() <= zero_resid {
                gi.clamp(t - 1.0, t)
            } else if ri > 0.0 {
                t
            } else {
                t - 1.0
            }
        }),
    );
    let mut a = DVector::zeros(beta.len());
    a.gemv_tr(-1.0 / data.n() as f64, x, &g, 0.0);
    a.iter()
        .zip(beta.iter())
        .map(|(&aj, &bj)| {
            if bj != 0.0 {
                (aj + lambda * bj.signum()).abs()
            } else {
                (aj.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

impl<'a> QrProblem<'a> {
    pub fn new(data: &'a Dataset, tau: QuantileLevel) -> Self {
        let n = data.n();
        let col_scale = data
            .x()
            .column_iter()
            .map(|c| c.iter().map(|v| v.abs()).sum::<f64>() / n as f64)
            .fold(0.0, f64::max);
        QrProblem {
            data,
            tau,
            factor: OnceLock::new(),
            col_scale,
            zero_resid: zero_residual_tol(data),
        }
    }

    fn factor(&self) -> &Factor {
        self.factor.get_or_init(|| {
            let x = self.data.x();
            let (n, p) = (self.data.n(), self.data.p());
            if p <= n {
                let mut m = x.tr_mul(x);
                for i in 0..p {
                    m[(i, i)] += 1.0;
                }
                Factor::Primal(spd_inverse(m))
            } else {
                let mut m = x * x.transpose();
                for i in 0..n {
                    m[(i, i)] += 1.0;
                }
                Factor::Dual(spd_inverse(m))
            }
        })
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    /// Tolerance the subgradient certificate must meet.
    pub fn certificate_tol(&self, tol: f64) -> f64 {
        tol * (1.0 + self.col_scale)
    }

    fn solve_normal(&self, b: &DVector<f64>, out: &mut DVector<f64>, scratch: &mut DVector<f64>) {
        match self.factor() {
            Factor::Primal(minv) => out.gemv(1.0, minv, b, 0.0),
            Factor::Dual(kinv) => {
                let x = self.data.x();
                // b - X' K X b
                let xb = x * b;
                scratch.gemv(1.0, kinv, &xb, 0.0);
                out.copy_from(b);
                out.gemv_tr(-1.0, x, scratch, 1.0);
            }
        }
    }

    /// Cold-start solve.
    pub fn solve(&self, cfg: &QrSolverConfig) -> Result<SolveReport> {
        self.solve_warm(cfg, &mut WarmStart::default())
    }

    /// Solve starting from (and updating) `warm`.
    pub fn solve_warm(&self, cfg: &QrSolverConfig, warm: &mut WarmStart) -> Result<SolveReport> {
        cfg.validate()?;
        match cfg.algorithm {
            QrAlgorithm::Simplex => Ok(self.solve_simplex(cfg, &mut warm.basis)),
            QrAlgorithm::Admm => {
                let state = warm.admm.get_or_insert_with(|| AdmmState::cold(self.data, cfg.admm_rho));
                self.solve_admm(cfg, state)
            }
        }
    }

    fn solve_simplex(&self, cfg: &QrSolverConfig, basis: &mut Option<SimplexBasis>) -> SolveReport {
        let mu = self.data.n() as f64 * cfg.lambda;
        let out = simplex::solve(self.data, self.tau.value(), mu, cfg.max_iter, basis);
        let coef = CoefVector::new(out.beta).hard_zero(cfg.zero_threshold);
        let certificate =
            certificate_inner(self.data, self.tau, cfg.lambda, coef.as_dvector(), &out.g, self.zero_resid);
        SolveReport {
            objective: qr_objective(self.data, self.tau, cfg.lambda, &coef),
            coef,
            iterations: out.pivots,
            converged: out.optimal,
            certificate,
        }
    }

    fn solve_admm(&self, cfg: &QrSolverConfig, state: &mut AdmmState) -> Result<SolveReport> {
        let (n, p) = (self.data.n(), self.data.p());
        if state.beta.len() != p || state.r.len() != n {
            return Err(Error::DimensionMismatch("warm-start state does not match data".into()));
        }
        let x = self.data.x();
        let y = self.data.y();
        let t = self.tau.value();
        let lambda = cfg.lambda;
        let nl = n as f64 * lambda;
        let cert_tol = self.certificate_tol(cfg.tol);

        if let Some(rep) = self.try_polish(&state.z, &state.r, cfg, 0) {
            if rep.certificate <= cert_tol {
                return Ok(rep);
            }
        }

        let mut t_n = DVector::zeros(n);
        let mut dr = DVector::zeros(n);
        let mut xb = DVector::zeros(n);
        let mut b_p = DVector::zeros(p);
        let mut dz = DVector::zeros(p);
        let mut scratch = DVector::zeros(n);
        let mut tmp_p = DVector::zeros(p);
        let mut iterations = 0;
        let mut residuals_met = false;

        for it in 1..=cfg.max_iter {
            iterations = it;
            let rho = state.rho;
            for i in 0..n {
                t_n[i] = y[i] - state.r[i] - state.u[i];
            }
            b_p.gemv_tr(1.0, x, &t_n, 0.0);
            b_p += &state.z;
            b_p -= &state.w;
            self.solve_normal(&b_p, &mut state.beta, &mut scratch);
            xb.gemv(1.0, x, &state.beta, 0.0);

            let hi = t / rho;
            let lo = (1.0 - t) / rho;
            for i in 0..n {
                let v = y[i] - xb[i] - state.u[i];
                let rn = if v > hi {
                    v - hi
                } else if v < -lo {
                    v + lo
                } else {
                    0.0
                };
                dr[i] = rn - state.r[i];
                state.r[i] = rn;
            }
            let thr = nl / rho;
            for j in 0..p {
                let zn = soft(state.beta[j] + state.w[j], thr);
                dz[j] = zn - state.z[j];
                state.z[j] = zn;
            }
            let mut pri2 = 0.0;
            for i in 0..n {
                let e = xb[i] + state.r[i] - y[i];
                state.u[i] += e;
                pri2 += e * e;
            }
            for j in 0..p {
                let e = state.beta[j] - state.z[j];
                state.w[j] += e;
                pri2 += e * e;
            }

            if it % CHECK_EVERY == 0 {
                tmp_p.gemv_tr(1.0, x, &dr, 0.0);
                tmp_p -= &dz;
                let dual = rho * tmp_p.norm();
                let pri = pri2.sqrt();
                let scale_pri = xb
                    .norm()
                    .max(state.r.norm())
                    .max(y.norm())
                    .max(state.beta.norm())
                    .max(state.z.norm());
                tmp_p.gemv_tr(1.0, x, &state.u, 0.0);
                tmp_p += &state.w;
                let scale_dual = rho * tmp_p.norm();
                let eps_pri = ((n + p) as f64).sqrt() * cfg.tol + cfg.tol * scale_pri;
                let eps_dual = (p as f64).sqrt() * cfg.tol + cfg.tol * scale_dual;
                if pri <= eps_pri && dual <= eps_dual {
                    residuals_met = true;
                    break;
                }
            }
            if it % POLISH_EVERY == 0 {
                if let Some(rep) = self.try_polish(&state.z, &state.r, cfg, it) {
                    if rep.certificate <= cert_tol {
                        state.beta.copy_from(rep.coef.as_dvector());
                        return Ok(rep);
                    }
                }
            }
        }

        if let Some(rep) = self.try_polish(&state.z, &state.r, cfg, iterations) {
            if rep.certificate <= cert_tol {
                return Ok(rep);
            }
        }
        let coef = CoefVector::new(state.z.clone()).hard_zero(cfg.zero_threshold);
        let g = -state.rho * &state.u;
        let certificate =
            certificate_inner(self.data, self.tau, lambda, coef.as_dvector(), &g, self.zero_resid);
        Ok(SolveReport {
            objective: qr_objective(self.data, self.tau, lambda, &coef),
            coef,
            iterations,
            converged: residuals_met,
            certificate,
        })
    }

    /// Exact vertex candidate from the support of `z`.
    fn try_polish(
        &self,
        z: &DVector<f64>,
        r_split: &DVector<f64>,
        cfg: &QrSolverConfig,
        iterations: usize,
    ) -> Option<SolveReport> {
        let (n, p) = (self.data.n(), self.data.p());
        let x = self.data.x();
        let y = self.data.y();
        let t = self.tau.value();
        let support: Vec<usize> = (0..p).filter(|&j| z[j] != 0.0).collect();
        let s = support.len();
        if s > n {
            return None;
        }
        let mut beta = DVector::zeros(p);
        let mut in_z = vec![false; n];
        let mut g = DVector::zeros(n);
        if s > 0 {
            let mut r = y.clone();
            r.gemv(-1.0, x, z, 1.0);
            let mut order: Vec<usize> = (0..n).collect();
            // Rows the split variable pins at zero come first.
            order.sort_by(|&a, &b| {
                (r_split[a] != 0.0)
                    .cmp(&(r_split[b] != 0.0))
                    .then(r[a].abs().total_cmp(&r[b].abs()))
                    .then(a.cmp(&b))
            });
            let rows = &order[..s];
            let a = x.select_rows(rows).select_columns(&support);
            let ys = DVector::from_iterator(s, rows.iter().map(|&i| y[i]));
            let bs = a.clone().lu().solve(&ys)?;
            if bs.iter().any(|v| !v.is_finite()) {
                return None;
            }
            for (k, &j) in support.iter().enumerate() {
                beta[j] = if bs[k].abs() < cfg.zero_threshold { 0.0 } else { bs[k] };
            }
            for &i in rows {
                in_z[i] = true;
            }
            let mut r = y.clone();
            r.gemv(-1.0, x, &beta, 1.0);
            // Fixed subgradients off the interpolated rows.
            for i in 0..n {
                if !in_z[i] {
                    g[i] = if r[i] > 0.0 { t } else { t - 1.0 };
                }
            }
            // X[:,S]' g = n lambda sign(beta_S), solved for g on Z.
            let mut rhs = DVector::zeros(s);
            for (k, &j) in support.iter().enumerate() {
                let col = x.column(j);
                let fixed: f64 = (0..n).filter(|&i| !in_z[i]).map(|i| col[i] * g[i]).sum();
                rhs[k] = n as f64 * cfg.lambda * beta[j].signum() - fixed;
            }
            let gz = a.transpose().lu().solve(&rhs)?;
            for (k, &i) in rows.iter().enumerate() {
                g[i] = gz[k];
            }
        } else {
            for i in 0..n {
                g[i] = if y[i] > 0.0 { t } else if y[i] < 0.0 { t - 1.0 } else { t - 0.5 };
            }
        }
        // Out-of-range multipliers are clipped here, which shows up as a
        // stationarity violation.
        let certificate = certificate_inner(self.data, self.tau, cfg.lambda, &beta, &g, self.zero_resid);
        let coef = CoefVector::new(beta);
        Some(SolveReport {
            objective: qr_objective(self.data, self.tau, cfg.lambda, &coef),
            coef,
            iterations,
            converged: true,
            certificate,
        })
    }
}

fn spd_inverse(m: DMatrix<f64>) -> DMatrix<f64> {
    // I + A'A has eigenvalues >= 1.
    nalgebra::Cholesky::new(m)
        .expect("identity-shifted Gram matrix is positive definite")
        .inverse()
}

#[inline]
fn soft(v: f64, thr: f64) -> f64 {
    if v > thr {
        v - thr
    } else if v < -thr {
        v + thr
    } else {
        0.0
    }
}

/// Solves `(1/n) sum rho_tau(y_i - x_i'beta) + lambda |beta|_1`.
pub fn solve_qr_lasso(data: &Dataset, tau: QuantileLevel, cfg: &QrSolverConfig) -> Result<SolveReport> {
    QrProblem::new(data, tau).solve(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn intercept_only() -> Dataset {
        Dataset::new(DMatrix::from_element(5, 1, 1.0), DVector::from_vec(vec![1., 2., 3., 4., 5.]))
            .unwrap()
    }

    fn random_data(seed: u64, n: usize, p: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |i, _| {
            x[(i, 0)] - 0.5 * x[(i, p - 1)] + rng.sample::<f64, _>(StandardNormal)
        });
        Dataset::new(x, y).unwrap()
    }

    /// Objective over the breakpoints {y_i} of the intercept-only model.
    fn brute_force_intercept(data: &Dataset, tau: QuantileLevel) -> f64 {
        data.y()
            .iter()
            .map(|&b| qr_objective(data, tau, 0.0, &CoefVector::from_slice(&[b])))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn median_minimizes_symmetric_check_loss() {
        let d = intercept_only();
        let tau = QuantileLevel::new(0.5).unwrap();
        let rep = solve_qr_lasso(&d, tau, &QrSolverConfig::default()).unwrap();
        assert!(rep.converged);
        assert!((rep.coef[0] - 3.0).abs() < 1e-9);
        assert!((rep.objective - brute_force_intercept(&d, tau)).abs() < 1e-12);
    }

    #[test]
    fn upper_quantile_objective_matches_breakpoint_enumeration() {
        let d = intercept_only();
        let tau = QuantileLevel::new(0.8).unwrap();
        let rep = solve_qr_lasso(&d, tau, &QrSolverConfig::default()).unwrap();
        let oracle = brute_force_intercept(&d, tau);
        assert!((oracle - 0.4).abs() < 1e-12);
        assert!((rep.objective - oracle).abs() < 1e-9);
    }

    #[test]
    fn huge_penalty_gives_zero_and_passes_certificate_at_origin() {
        let d = random_data(3, 20, 4);
        let tau = QuantileLevel::new(0.8).unwrap();
        // (1/n) max_j |sum_i x_ij| max(tau, 1 - tau) bounds the subgradient at 0.
        let bound = d
            .x()
            .column_iter()
            .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
            / 20.0;
        let cfg = QrSolverConfig::default().with_lambda(10.0 * bound);
        let rep = solve_qr_lasso(&d, tau, &cfg).unwrap();
        assert_eq!(rep.coef.sparsity(), 0);
        assert_eq!(rep.iterations, 0);
        assert!(rep.certificate <= 1e-12);
    }

    fn admm() -> QrSolverConfig {
        QrSolverConfig { algorithm: QrAlgorithm::Admm, ..Default::default() }
    }

    #[test]
    fn random_instances_pass_certificate() {
        let tau = QuantileLevel::new(0.3).unwrap();
        for seed in 0..10 {
            let d = random_data(seed, 25, 6);
            let prob = QrProblem::new(&d, tau);
            for base in [QrSolverConfig::default(), admm()] {
                let cfg = base.with_lambda(0.05);
                let rep = prob.solve(&cfg).unwrap();
                assert!(rep.converged, "seed {seed}");
                assert!(rep.certificate <= prob.certificate_tol(cfg.tol), "seed {seed}: {}", rep.certificate);
            }
        }
    }

    #[test]
    fn algorithms_agree_on_objective() {
        let tau = QuantileLevel::new(0.8).unwrap();
        for (seed, n, p) in [(1, 30, 10), (2, 15, 25), (4, 60, 20)] {
            let d = random_data(seed, n, p);
            let prob = QrProblem::new(&d, tau);
            for lam in [0.2, 0.05, 0.01] {
                let a = prob.solve(&QrSolverConfig::default().with_lambda(lam)).unwrap();
                let b = prob.solve(&admm().with_lambda(lam)).unwrap();
                assert!((a.objective - b.objective).abs() < 1e-6 * (1.0 + a.objective), "{seed} {lam}");
            }
        }
    }

    #[test]
    fn wide_design_uses_woodbury_form() {
        let d = random_data(11, 12, 30);
        let tau = QuantileLevel::new(0.5).unwrap();
        let prob = QrProblem::new(&d, tau);
        for base in [QrSolverConfig::default(), admm()] {
            let cfg = base.with_lambda(0.1);
            let rep = prob.solve(&cfg).unwrap();
            assert!(rep.converged);
            assert!(rep.certificate <= prob.certificate_tol(cfg.tol));
        }
    }

    #[test]
    fn warm_start_reaches_same_objective() {
        let d = random_data(5, 40, 8);
        let tau = QuantileLevel::new(0.8).unwrap();
        let prob = QrProblem::new(&d, tau);
        for base in [QrSolverConfig::default(), admm()] {
            let mut warm = WarmStart::default();
            for &lam in &[0.3, 0.1, 0.03, 0.1] {
                let cfg = base.with_lambda(lam);
                let w = prob.solve_warm(&cfg, &mut warm).unwrap();
                let c = prob.solve(&cfg).unwrap();
                assert!((w.objective - c.objective).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn unpenalized_fit_interpolates_when_wide() {
        let d = random_data(9, 6, 10);
        let tau = QuantileLevel::new(0.5).unwrap();
        let rep = solve_qr_lasso(&d, tau, &QrSolverConfig::default()).unwrap();
        assert!(rep.converged);
        assert!(rep.objective < 1e-9);
    }

    #[test]
    fn solve_is_deterministic() {
        let d = random_data(8, 30, 5);
        let tau = QuantileLevel::new(0.6).unwrap();
        let cfg = QrSolverConfig::default().with_lambda(0.02);
        assert_eq!(solve_qr_lasso(&d, tau, &cfg).unwrap(), solve_qr_lasso(&d, tau, &cfg).unwrap());
    }
}
