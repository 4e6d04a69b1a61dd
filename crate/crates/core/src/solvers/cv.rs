//! K-fold cross-validation of the quantile regression penalty.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::qr::{QrProblem, WarmStart};
use super::{pinball_loss, QrSolverConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{Dataset, QuantileLevel};

const GRID_SIZE: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub folds: usize,
    /// Explicit grid; `None` uses [`default_lambda0_grid`].
    pub grid: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig { folds: 5, grid: None, seed: 0 }
    }
}

/// 30 log-spaced values on `[1e-3, 1] * sqrt(log(max(p, n)) / n)`.
pub fn default_lambda0_grid(n: usize, p: usize) -> Vec<f64> {
    let scale = ((p.max(n) as f64).ln() / n as f64).sqrt();
    let (lo, hi) = (1e-3f64.ln(), 0.0f64);
    (0..GRID_SIZE)
        .map(|i| scale * (lo + (hi - lo) * i as f64 / (GRID_SIZE - 1) as f64).exp())
        .collect()
}

/// Fold label of each row: a seeded shuffle split into contiguous blocks.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 || folds > n {
        return Err(Error::TooFewSamples(format!("{folds} folds for {n} rows")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut label = vec![0; n];
    for f in 0..folds {
        for &i in &idx[f * n / folds..(f + 1) * n / folds] {
            label[i] = f;
        }
    }
    Ok(label)
}

/// Mean held-out check loss for each grid value, in grid order.
pub fn cv_curve(
    data: &Dataset,
    tau: QuantileLevel,
    grid: &[f64],
    folds: usize,
    seed: u64,
    solver: &QrSolverConfig,
    exec: Execution,
) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if grid.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
        return Err(Error::InvalidConfig("grid values must be finite and >= 0".into()));
    }
    let label = fold_assignment(data.n(), folds, seed)?;
    // Warm starts run from the largest penalty down.
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));

    let per_fold = exec.map_range(folds, |f| -> Result<Vec<f64>> {
        let train: Vec<usize> = (0..data.n()).filter(|&i| label[i] != f).collect();
        let test: Vec<usize> = (0..data.n()).filter(|&i| label[i] == f).collect();
        let train = data.select_rows(&train);
        let test = data.select_rows(&test);
        let prob = QrProblem::new(&train, tau);
        let mut state = WarmStart::default();
        let mut losses = vec![0.0; grid.len()];
        for &g in &order {
            let rep = prob.solve_warm(&solver.with_lambda(grid[g]), &mut state)?;
            let r = test.residuals(&rep.coef);
            losses[g] = r.iter().map(|&v| pinball_loss(v, tau)).sum::<f64>() / test.n() as f64;
        }
        Ok(losses)
    });
    let mut mean = vec![0.0; grid.len()];
    for fold in per_fold {
        for (m, l) in mean.iter_mut().zip(fold?) {
            *m += l / folds as f64;
        }
    }
    Ok(mean)
}

/// Grid value with the smallest mean held-out check loss; ties go to the
/// larger penalty.
pub fn cross_validate_lambda0(
    data: &Dataset,
    tau: QuantileLevel,
    grid: &[f64],
    folds: usize,
    seed: u64,
    solver: &QrSolverConfig,
    exec: Execution,
) -> Result<f64> {
    let curve = cv_curve(data, tau, grid, folds, seed, solver, exec)?;
    let mut best = 0;
    for i in 1..grid.len() {
        let better = curve[i] < curve[best] || (curve[i] == curve[best] && grid[i] > grid[best]);
        if better {
            best = i;
        }
    }
    Ok(grid[best])
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn grid_shape() {
        let g = default_lambda0_grid(150, 150);
        assert_eq!(g.len(), 30);
        let top = (150f64.ln() / 150.0).sqrt();
        assert!((g[29] - top).abs() < 1e-12);
        assert!((g[0] - 1e-3 * top).abs() < 1e-15);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn folds_are_balanced_and_seeded() {
        let a = fold_assignment(23, 5, 7).unwrap();
        assert_eq!(a, fold_assignment(23, 5, 7).unwrap());
        for f in 0..5 {
            let c = a.iter().filter(|&&l| l == f).count();
            assert!(c == 4 || c == 5);
        }
        assert!(fold_assignment(3, 5, 0).is_err());
        assert!(fold_assignment(10, 1, 0).is_err());
    }

    #[test]
    fn singleton_grid_and_errors() {
        let d = Dataset::new(
            DMatrix::from_fn(10, 2, |i, j| (i + j) as f64),
            DVector::from_fn(10, |i, _| i as f64),
        )
        .unwrap();
        let tau = QuantileLevel::new(0.5).unwrap();
        let cfg = QrSolverConfig::default();
        let ex = Execution::Sequential;
        assert_eq!(cross_validate_lambda0(&d, tau, &[0.3], 5, 1, &cfg, ex).unwrap(), 0.3);
        assert_eq!(cross_validate_lambda0(&d, tau, &[], 5, 1, &cfg, ex), Err(Error::EmptyGrid));
        assert!(matches!(
            cross_validate_lambda0(&d, tau, &[0.1], 11, 1, &cfg, ex),
            Err(Error::TooFewSamples(_))
        ));
    }
}
