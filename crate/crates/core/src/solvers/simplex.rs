//! Exact vertex solver for the penalized check loss.
//!
//! The scaled objective `sum rho_tau(y_i - x_i'b) + mu |b|_1` (with
//! `mu = n lambda`) is an asymmetric weighted l1 fit on the design augmented
//! with one pseudo-row `e_j'` (response 0, weight `mu` on both sides) per
//! coefficient. A vertex interpolates `p` of the `n + p` rows; pseudo-rows in
//! the basis are exactly the zero coefficients. Starting from the all-pseudo
//! basis (`b = 0`), each pivot drops one basis row along the steepest edge and
//! takes the exact minimizing step, a weighted median over the residual
//! breakpoints, in the style of Barrodale and Roberts.
//!
//! Changing `mu` leaves every basis feasible, so a basis from the previous
//! penalty is a valid warm start.

use nalgebra::{DMatrix, DVector};

use crate::model::Dataset;

const NOT_BASIC: usize = usize::MAX;
const REFACTOR_EVERY: usize = 50;

/// Basis carried between solves on the same design.
#[derive(Debug, Clone)]
pub(crate) struct SimplexBasis {
    rows: Vec<usize>,
    binv: DMatrix<f64>,
    beta: DVector<f64>,
    /// Fingerprint of the data `binv` was computed for.
    key: u64,
    /// Rank-one updates applied since `binv` was last computed directly.
    updates: usize,
}

impl SimplexBasis {
    /// All pseudo-rows: the origin.
    fn cold(n: usize, p: usize, key: u64) -> Self {
        SimplexBasis {
            rows: (n..n + p).collect(),
            binv: DMatrix::identity(p, p),
            beta: DVector::zeros(p),
            key,
            updates: 0,
        }
    }
}

fn fingerprint(data: &Dataset) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in data.x().iter().chain(data.y().iter()) {
        h = (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
    }
    h ^ ((data.n() as u64) << 32) ^ data.p() as u64
}

pub(crate) struct SimplexOutcome {
    pub beta: DVector<f64>,
    /// Check-loss multipliers of the data rows.
    pub g: DVector<f64>,
    pub pivots: usize,
    pub optimal: bool,
}

struct Lp<'a> {
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    n: usize,
    p: usize,
    tau: f64,
    mu: f64,
}

impl Lp<'_> {
    /// Row ids: `0..n` data rows, `n..n+p` pseudo-rows.
    fn cplus(&self, k: usize) -> f64 {
        if k < self.n {
            self.tau
        } else {
            self.mu
        }
    }

    fn cminus(&self, k: usize) -> f64 {
        if k < self.n {
            1.0 - self.tau
        } else {
            self.mu
        }
    }

    fn target(&self, k: usize) -> f64 {
        if k < self.n {
            self.y[k]
        } else {
            0.0
        }
    }

    /// `a_k' M` for a row id `k`.
    fn row_times(&self, k: usize, m: &DMatrix<f64>) -> DVector<f64> {
        if k < self.n {
            m.tr_mul(&self.x.row(k).transpose())
        } else {
            m.row(k - self.n).transpose()
        }
    }

    fn basis_matrix(&self, rows: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(self.p, self.p, |i, j| {
            let k = rows[i];
            if k < self.n {
                self.x[(k, j)]
            } else if k - self.n == j {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Recomputes the basis inverse and vertex from scratch.
    fn refactor(&self, st: &mut SimplexBasis) -> bool {
        let a = self.basis_matrix(&st.rows);
        let lu = a.lu();
        let Some(binv) = lu.try_inverse() else {
            return false;
        };
        let b = DVector::from_iterator(self.p, st.rows.iter().map(|&k| self.target(k)));
        let mut beta = &binv * &b;
        for &k in &st.rows {
            if k >= self.n {
                beta[k - self.n] = 0.0;
            }
        }
        st.binv = binv;
        st.beta = beta;
        st.updates = 0;
        true
    }

    fn residuals(&self, st: &SimplexBasis, pos: &[usize]) -> DVector<f64> {
        let mut r = DVector::<f64>::zeros(self.n + self.p);
        let mut rd = self.y.clone();
        rd.gemv(-1.0, self.x, &st.beta, 1.0);
        r.rows_mut(0, self.n).copy_from(&rd);
        for j in 0..self.p {
            r[self.n + j] = -st.beta[j];
        }
        for k in 0..self.n + self.p {
            if pos[k] != NOT_BASIC {
                r[k] = 0.0;
            }
        }
        r
    }
}

pub(crate) fn solve(
    data: &Dataset,
    tau: f64,
    mu: f64,
    max_pivots: usize,
    warm: &mut Option<SimplexBasis>,
) -> SimplexOutcome {
    let lp = Lp { x: data.x(), y: data.y(), n: data.n(), p: data.p(), tau, mu };
    let (n, p) = (lp.n, lp.p);
    let nrows = n + p;

    let key = fingerprint(data);
    let mut st = match warm.take() {
        Some(s) if s.key == key && s.rows.len() == p && s.rows.iter().all(|&k| k < nrows) => s,
        _ => SimplexBasis::cold(n, p, key),
    };
    let mut pos = vec![NOT_BASIC; nrows];
    for (i, &k) in st.rows.iter().enumerate() {
        pos[k] = i;
    }
    if st.updates > 0 && !lp.refactor(&mut st) {
        st = SimplexBasis::cold(n, p, key);
        pos.fill(NOT_BASIC);
        for j in 0..p {
            pos[n + j] = j;
        }
    }
    let mut r = lp.residuals(&st, &pos);
    let resid_eps = 1e-11 * (1.0 + lp.y.amax());
    let slope_eps = 1e-12 * (n as f64 + p as f64 * mu.max(1.0));

    let mut pivots = 0;
    let mut optimal = false;
    let mut d_data = DVector::<f64>::zeros(n);
    let mut delta_data = DVector::<f64>::zeros(n);
    let mut breaks: Vec<(f64, f64, usize)> = Vec::with_capacity(nrows);

    loop {
        if st.updates >= REFACTOR_EVERY {
            if lp.refactor(&mut st) {
                r = lp.residuals(&st, &pos);
            }
            st.updates = 0;
        }

        // Multipliers of nonbasic rows; exact-zero residuals are degenerate.
        let mut degenerate = Vec::new();
        for k in 0..n {
            d_data[k] = if pos[k] != NOT_BASIC {
                0.0
            } else if r[k] > resid_eps {
                lp.tau
            } else if r[k] < -resid_eps {
                lp.tau - 1.0
            } else {
                degenerate.push(k);
                0.0
            };
        }
        let mut s = lp.x.tr_mul(&d_data);
        for j in 0..p {
            let k = n + j;
            if pos[k] != NOT_BASIC {
                continue;
            }
            if r[k] > resid_eps {
                s[j] += mu;
            } else if r[k] < -resid_eps {
                s[j] -= mu;
            } else {
                degenerate.push(k);
            }
        }
        let g = st.binv.tr_mul(&s);

        // Degenerate rows leave zero in whichever direction the edge pushes
        // them, always adding cost.
        let mut deg_plus = DVector::<f64>::zeros(p);
        let mut deg_minus = DVector::<f64>::zeros(p);
        for &k in &degenerate {
            let dk = lp.row_times(k, &st.binv);
            for i in 0..p {
                let dl = dk[i];
                if dl > 0.0 {
                    deg_plus[i] += lp.cminus(k) * dl;
                    deg_minus[i] += lp.cplus(k) * dl;
                } else {
                    deg_plus[i] -= lp.cplus(k) * dl;
                    deg_minus[i] -= lp.cminus(k) * dl;
                }
            }
        }

        let mut best: Option<(f64, f64, usize, f64)> = None;
        for i in 0..p {
            let k = st.rows[i];
            let norm = st.binv.column(i).norm();
            if norm == 0.0 {
                continue;
            }
            let up = lp.cminus(k) - g[i] + deg_plus[i];
            let down = lp.cplus(k) + g[i] + deg_minus[i];
            for (slope, sign) in [(up, 1.0), (down, -1.0)] {
                if slope < -slope_eps {
                    let score = slope / norm;
                    if best.is_none_or(|b| score < b.0) {
                        best = Some((score, slope, i, sign));
                    }
                }
            }
        }
        let Some((_, slope, leave, sign)) = best else {
            optimal = true;
            break;
        };
        if pivots >= max_pivots {
            break;
        }

        let w = st.binv.column(leave) * sign;
        delta_data.gemv(1.0, lp.x, &w, 0.0);
        breaks.clear();
        for k in 0..nrows {
            if pos[k] != NOT_BASIC || r[k].abs() <= resid_eps {
                continue;
            }
            let dk = if k < n { delta_data[k] } else { w[k - n] };
            if dk == 0.0 {
                continue;
            }
            let t = r[k] / dk;
            if t > 0.0 {
                breaks.push((t, (lp.cplus(k) + lp.cminus(k)) * dk.abs(), k));
            }
        }
        breaks.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
        let mut sigma = slope;
        let mut entering = None;
        for &(t, weight, k) in &breaks {
            sigma += weight;
            if sigma >= 0.0 {
                entering = Some((t, k));
                break;
            }
        }
        let Some((step, enter)) = entering else {
            // Unbounded descent cannot happen for nonnegative weights; stop
            // rather than loop on round-off.
            break;
        };

        st.beta.axpy(step, &w, 1.0);
        for k in 0..nrows {
            if pos[k] == NOT_BASIC {
                let dk = if k < n { delta_data[k] } else { w[k - n] };
                r[k] -= step * dk;
            }
        }
        let left = st.rows[leave];
        r[left] = -sign * step;
        r[enter] = 0.0;

        let a_binv = lp.row_times(enter, &st.binv);
        let piv = a_binv[leave];
        let col = st.binv.column(leave).clone_owned();
        let mut coeff = a_binv / piv;
        coeff[leave] -= 1.0 / piv;
        st.binv.ger(-1.0, &col, &coeff, 1.0);

        pos[left] = NOT_BASIC;
        pos[enter] = leave;
        st.rows[leave] = enter;
        if enter >= n {
            st.beta[enter - n] = 0.0;
        }
        pivots += 1;
        st.updates += 1;
    }

    if st.updates > 0 && lp.refactor(&mut st) {
        r = lp.residuals(&st, &pos);
    }
    // Final multipliers: fixed off the basis, solved on it.
    let mut gd = DVector::<f64>::zeros(n);
    for k in 0..n {
        if pos[k] == NOT_BASIC {
            gd[k] = if r[k] > 0.0 { lp.tau } else if r[k] < 0.0 { lp.tau - 1.0 } else { 0.0 };
        }
    }
    let mut s = lp.x.tr_mul(&gd);
    for j in 0..p {
        let k = n + j;
        if pos[k] == NOT_BASIC {
            s[j] += mu * r[k].signum();
        }
    }
    let gb = st.binv.tr_mul(&s);
    for (i, &k) in st.rows.iter().enumerate() {
        if k < n {
            gd[k] = -gb[i];
        }
    }

    let beta = st.beta.clone();
    *warm = Some(st);
    SimplexOutcome { beta, g: gd, pivots, optimal }
}
