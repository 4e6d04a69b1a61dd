//! Synthetic target/source collections with known ground truth.
//!
//! Every random draw comes from a ChaCha8 sub-stream keyed by
//! `(seed, replication, study, purpose)`, so a replication can be regenerated
//! on its own and in any order.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{CoefVector, Dataset, InformativeSet, QuantileLevel, StudyCollection};

/// Mean absolute perturbation per perturbed coordinate of a non-informative
/// source, times `p`.
pub const NON_INFORMATIVE_SPREAD: f64 = 140.0;
/// Fraction of the target sample size reserved for the holdout set.
pub const HOLDOUT_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    #[default]
    Homogeneous,
    Heterogeneous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCase {
    #[default]
    Normal,
    Cauchy,
}

impl std::fmt::Display for ErrorCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ErrorCase::Normal => "normal",
            ErrorCase::Cauchy => "cauchy",
        })
    }
}

/// One simulation design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignSpec {
    pub kind: DesignKind,
    pub p: usize,
    pub n0: usize,
    pub n_k: usize,
    #[serde(alias = "K")]
    pub k: usize,
    pub s0: usize,
    pub d: f64,
    pub num_informative: usize,
    pub eta: f64,
    pub error_case: ErrorCase,
    pub tau: f64,
    pub seed: u64,
}

impl Default for DesignSpec {
    fn default() -> Self {
        DesignSpec {
            kind: DesignKind::Homogeneous,
            p: 150,
            n0: 150,
            n_k: 150,
            k: 20,
            s0: 20,
            d: 2.0,
            num_informative: 20,
            eta: 20.0,
            error_case: ErrorCase::Normal,
            tau: 0.8,
            seed: 0,
        }
    }
}

impl DesignSpec {
    pub fn validate(&self) -> Result<()> {
        QuantileLevel::new(self.tau)?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.p == 0 {
            return bad("p must be positive".into());
        }
        if self.p % 2 != 0 {
            return bad(format!("p must be even, got {}", self.p));
        }
        if self.s0 > self.p {
            return bad(format!("s0 = {} exceeds p = {}", self.s0, self.p));
        }
        if self.num_informative > self.k {
            return bad(format!("num_informative = {} exceeds K = {}", self.num_informative, self.k));
        }
        if !(self.d.is_finite() && self.d >= 0.0) {
            return bad(format!("d must be finite and nonnegative, got {}", self.d));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if holdout_size(self.n0) == 0 {
            return Err(Error::TooFewSamples(format!("n0 = {} leaves an empty holdout", self.n0)));
        }
        if self.n0 == 0 || (self.k > 0 && self.n_k == 0) {
            return Err(Error::TooFewSamples("every study needs at least one row".into()));
        }
        if self.kind == DesignKind::Heterogeneous && 2 * self.k > self.p {
            return Err(Error::BandTooWide { band: 2 * self.k, p: self.p });
        }
        Ok(())
    }

    pub fn quantile(&self) -> QuantileLevel {
        QuantileLevel::new(self.tau).expect("validated quantile")
    }
}

pub fn holdout_size(n0: usize) -> usize {
    (HOLDOUT_FRACTION * n0 as f64 + 1e-9).floor() as usize
}

/// Symmetric Toeplitz covariance, stored by its first row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Covariance {
    Identity { p: usize },
    Toeplitz { first_row: Vec<f64> },
}

impl Covariance {
    pub fn dim(&self) -> usize {
        match self {
            Covariance::Identity { p } => *p,
            Covariance::Toeplitz { first_row } => first_row.len(),
        }
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        match self {
            Covariance::Identity { .. } => f64::from(u8::from(i == j)),
            Covariance::Toeplitz { first_row } => first_row[i.abs_diff(j)],
        }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let p = self.dim();
        DMatrix::from_fn(p, p, |i, j| self.entry(i, j))
    }

    /// `b' Sigma b`.
    pub fn quad_form(&self, b: &DVector<f64>) -> f64 {
        match self {
            Covariance::Identity { .. } => b.norm_squared(),
            Covariance::Toeplitz { .. } => (self.matrix() * b).dot(b),
        }
    }

    /// Lower factor `L` with `L L' = Sigma`.
    pub fn factor(&self) -> Result<DMatrix<f64>> {
        if let Covariance::Identity { p } = self {
            return Ok(DMatrix::identity(*p, *p));
        }
        let m = self.matrix();
        if let Some(ch) = m.clone().cholesky() {
            return Ok(ch.l());
        }
        let eig = m.symmetric_eigen();
        let scale = eig.eigenvalues.amax().max(1.0);
        if eig.eigenvalues.iter().any(|&v| v < -1e-10 * scale || !v.is_finite()) {
            return Err(Error::NotPsd);
        }
        let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        Ok(eig.eigenvectors * DMatrix::from_diagonal(&roots))
    }
}

/// `Sigma_ij = 0.5^|i - j|`.
pub fn toeplitz_homogeneous(p: usize) -> Covariance {
    Covariance::Toeplitz { first_row: (0..p).map(|i| 0.5f64.powi(i as i32)).collect() }
}

/// Banded Toeplitz with first row `(1, 1/(k+1) x (2k-1), 0, ...)`; `k = 0`
/// gives the identity.
pub fn toeplitz_heterogeneous(p: usize, k: usize) -> Result<Covariance> {
    if k == 0 {
        return Ok(Covariance::Identity { p });
    }
    if 2 * k > p {
        return Err(Error::BandTooWide { band: 2 * k, p });
    }
    let mut first_row = vec![0.0; p];
    first_row[0] = 1.0;
    for v in &mut first_row[1..2 * k] {
        *v = 1.0 / (k as f64 + 1.0);
    }
    Ok(Covariance::Toeplitz { first_row })
}

/// What a sub-stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Coefficients = 0,
    Design = 1,
    Errors = 2,
    HoldoutDesign = 3,
    HoldoutErrors = 4,
    Split = 5,
    Folds = 6,
}

/// Independent generator for one `(replication, study, purpose)` triple.
pub fn stream(seed: u64, replication: u64, study: usize, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = (replication << 32) | ((study as u64 & 0xff_ffff) << 8) | purpose as u64;
    rng.set_stream(id);
    rng
}

/// Rows drawn i.i.d. from `N(0, Sigma)`.
pub fn sample_gaussian_rows<R: Rng + ?Sized>(
    n: usize,
    cov: &Covariance,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let l = cov.factor()?;
    Ok(sample_with_factor(n, &l, rng))
}

fn sample_with_factor<R: Rng + ?Sized>(n: usize, l: &DMatrix<f64>, rng: &mut R) -> DMatrix<f64> {
    let p = l.nrows();
    let z: Vec<f64> = (0..n * p).map(|_| rng.sample(StandardNormal)).collect();
    DMatrix::from_row_slice(n, p, &z) * l.transpose()
}

/// Mean-absolute-deviation parameterized Laplace draw.
fn laplace<R: Rng + ?Sized>(b: f64, rng: &mut R) -> f64 {
    let e: f64 = rng.sample(Exp1);
    if rng.random::<bool>() { b * e } else { -b * e }
}

/// True coefficients, covariances and the informative labels of one draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub beta: Vec<CoefVector>,
    pub informative: InformativeSet,
    pub sigma: Vec<Covariance>,
    /// Laplace scale used for each source (index 0 is the target, 0).
    pub spread: Vec<f64>,
}

impl GroundTruth {
    /// `||beta_0 - beta_k||_1` for every study.
    pub fn distances(&self) -> Vec<f64> {
        let b0 = self.beta[0].as_dvector();
        self.beta.iter().map(|b| (b.as_dvector() - b0).abs().sum()).collect()
    }
}

/// Coefficients for every study of one replication, with per-study covariances.
pub fn generate_coefficients(spec: &DesignSpec, replication: u64) -> Result<GroundTruth> {
    spec.validate()?;
    let p = spec.p;
    let mut b0 = DVector::zeros(p);
    b0.rows_mut(0, spec.s0).fill(1.0);

    let mut beta = vec![CoefVector::new(b0.clone())];
    let mut spread = vec![0.0];
    for k in 1..=spec.k {
        let b = if k <= spec.num_informative {
            2.0 * spec.d / p as f64
        } else {
            NON_INFORMATIVE_SPREAD / p as f64
        };
        let mut rng = stream(spec.seed, replication, k, Purpose::Coefficients);
        let mut h = index::sample(&mut rng, p, p / 2).into_vec();
        h.sort_unstable();
        let mut bk = b0.clone();
        for j in h {
            bk[j] += laplace(b, &mut rng);
        }
        beta.push(CoefVector::new(bk));
        spread.push(b);
    }

    let sigma = (0..=spec.k)
        .map(|k| match spec.kind {
            DesignKind::Homogeneous => Ok(toeplitz_homogeneous(p)),
            DesignKind::Heterogeneous => toeplitz_heterogeneous(p, k),
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(GroundTruth {
        beta,
        informative: InformativeSet::new((1..=spec.num_informative).collect())?,
        sigma,
        spread,
    })
}

/// Errors whose `tau`-quantile is exactly zero, scaled by `b' Sigma b / eta`.
pub fn sample_errors<R: Rng + ?Sized>(
    n: usize,
    case: ErrorCase,
    tau: QuantileLevel,
    beta: &CoefVector,
    cov: &Covariance,
    eta: f64,
    rng: &mut R,
) -> DVector<f64> {
    let scale = cov.quad_form(beta.as_dvector()) / eta;
    if scale <= 0.0 || !scale.is_finite() {
        return DVector::zeros(n);
    }
    let q = 1.0 - tau.value();
    match case {
        ErrorCase::Normal => {
            let sd = scale.sqrt();
            let shift = Normal::new(0.0, sd).expect("positive sd").inverse_cdf(q);
            DVector::from_fn(n, |_, _| shift + sd * rng.sample::<f64, _>(StandardNormal))
        }
        ErrorCase::Cauchy => {
            let shift = scale * (std::f64::consts::PI * (q - 0.5)).tan();
            let dist = Cauchy::new(shift, scale).expect("positive scale");
            DVector::from_fn(n, |_, _| dist.sample(rng))
        }
    }
}

fn draw_study(
    spec: &DesignSpec,
    truth: &GroundTruth,
    factor: &DMatrix<f64>,
    replication: u64,
    study: usize,
    n: usize,
    purposes: (Purpose, Purpose),
) -> Result<Dataset> {
    let mut xr = stream(spec.seed, replication, study, purposes.0);
    let x = sample_with_factor(n, factor, &mut xr);
    let mut er = stream(spec.seed, replication, study, purposes.1);
    let beta = &truth.beta[study];
    let eps = sample_errors(n, spec.error_case, spec.quantile(), beta, &truth.sigma[study], spec.eta, &mut er);
    let y = &x * beta.as_dvector() + eps;
    Dataset::new(x, y)
}

/// One replication: collection, truth, and a target-model holdout set.
pub fn generate_replication(
    spec: &DesignSpec,
    replication: u64,
) -> Result<(StudyCollection, GroundTruth, Dataset)> {
    let truth = generate_coefficients(spec, replication)?;
    let factors: Vec<DMatrix<f64>> = truth.sigma.iter().map(Covariance::factor).collect::<Result<_>>()?;
    let main = (Purpose::Design, Purpose::Errors);
    let target = draw_study(spec, &truth, &factors[0], replication, 0, spec.n0, main)?;
    let sources = (1..=spec.k)
        .map(|k| draw_study(spec, &truth, &factors[k], replication, k, spec.n_k, main))
        .collect::<Result<Vec<_>>>()?;
    let holdout = draw_study(
        spec,
        &truth,
        &factors[0],
        replication,
        0,
        holdout_size(spec.n0),
        (Purpose::HoldoutDesign, Purpose::HoldoutErrors),
    )?;
    let collection = StudyCollection::new(target, sources, spec.quantile())?;
    Ok((collection, truth, holdout))
}

/// Replication 0 of `spec`.
pub fn generate_collection(spec: &DesignSpec) -> Result<(StudyCollection, GroundTruth, Dataset)> {
    generate_replication(spec, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn sample_cov(x: &DMatrix<f64>, i: usize, j: usize) -> f64 {
        let n = x.nrows() as f64;
        let (mi, mj) = (x.column(i).mean(), x.column(j).mean());
        x.column(i).iter().zip(x.column(j).iter()).map(|(a, b)| (a - mi) * (b - mj)).sum::<f64>() / n
    }

    #[test]
    fn homogeneous_entries() {
        let c = toeplitz_homogeneous(6);
        assert_eq!(c.entry(0, 0), 1.0);
        assert_eq!(c.entry(0, 2), 0.25);
        assert_eq!(c.entry(1, 4), 0.125);
        assert_eq!(c.matrix(), c.matrix().transpose());
    }

    #[test]
    fn heterogeneous_rows() {
        let Covariance::Toeplitz { first_row } = toeplitz_heterogeneous(5, 1).unwrap() else {
            panic!("expected Toeplitz")
        };
        assert_eq!(first_row, vec![1.0, 0.5, 0.0, 0.0, 0.0]);
        let Covariance::Toeplitz { first_row } = toeplitz_heterogeneous(6, 2).unwrap() else {
            panic!("expected Toeplitz")
        };
        let t = 1.0 / 3.0;
        assert_eq!(first_row, vec![1.0, t, t, t, 0.0, 0.0]);
        assert_eq!(toeplitz_heterogeneous(4, 0).unwrap(), Covariance::Identity { p: 4 });
        assert!(matches!(toeplitz_heterogeneous(5, 3), Err(Error::BandTooWide { band: 6, p: 5 })));
    }

    #[test]
    fn gaussian_rows_match_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = sample_gaussian_rows(10_000, &Covariance::Identity { p: 2 }, &mut rng).unwrap();
        for (i, j) in [(0, 0), (0, 1), (1, 1)] {
            assert!((sample_cov(&x, i, j) - f64::from(u8::from(i == j))).abs() < 0.05);
        }
        let x = sample_gaussian_rows(10_000, &toeplitz_homogeneous(3), &mut rng).unwrap();
        assert!((sample_cov(&x, 0, 1) - 0.5).abs() < 0.05);
        assert_eq!(sample_gaussian_rows(0, &toeplitz_homogeneous(3), &mut rng).unwrap().shape(), (0, 3));
    }

    #[test]
    fn cholesky_reproduces_banded_covariance() {
        let cov = toeplitz_heterogeneous(6, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = sample_gaussian_rows(100_000, &cov, &mut rng).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert!((sample_cov(&x, i, j) - cov.entry(i, j)).abs() < 0.05, "({i},{j})");
            }
        }
    }

    #[test]
    fn singular_covariance_uses_eigen_factor() {
        let cov = Covariance::Toeplitz { first_row: vec![1.0, 1.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = sample_gaussian_rows(50, &cov, &mut rng).unwrap();
        for i in 0..50 {
            assert_relative_eq!(x[(i, 0)], x[(i, 1)], epsilon = 1e-9);
        }
        let bad = Covariance::Toeplitz { first_row: vec![1.0, 2.0] };
        assert!(matches!(sample_gaussian_rows(5, &bad, &mut rng), Err(Error::NotPsd)));
    }

    #[test]
    fn target_coefficients() {
        let g = generate_coefficients(&DesignSpec::default(), 0).unwrap();
        let b0 = g.beta[0].as_slice();
        assert!(b0[..20].iter().all(|&v| v == 1.0));
        assert!(b0[20..].iter().all(|&v| v == 0.0));
        assert_eq!(g.beta.len(), 21);
        assert_eq!(g.informative, InformativeSet::full(20));
    }

    #[test]
    fn perturbation_sizes() {
        let spec = DesignSpec { num_informative: 1, k: 2, ..DesignSpec::default() };
        let (mut inf, mut non) = (0.0, 0.0);
        for r in 0..200 {
            let g = generate_coefficients(&spec, r).unwrap();
            let dist = g.distances();
            inf += dist[1] / 200.0;
            non += dist[2] / 200.0;
            let moved = g.beta[2].as_slice().iter().zip(g.beta[0].as_slice()).filter(|(a, b)| a != b).count();
            assert_eq!(moved, 75);
        }
        assert!((inf - 2.0).abs() < 0.3, "{inf}");
        assert!((non - 70.0).abs() < 10.5, "{non}");
    }

    #[test]
    fn spreads_are_recorded() {
        let spec = DesignSpec { num_informative: 3, k: 5, d: 10.0, ..DesignSpec::default() };
        let g = generate_coefficients(&spec, 4).unwrap();
        assert_eq!(g.spread[0], 0.0);
        for k in 1..=5 {
            let want = if k <= 3 { 20.0 / 150.0 } else { 140.0 / 150.0 };
            assert_relative_eq!(g.spread[k], want);
        }
    }

    fn coverage(case: ErrorCase, seed: u64) -> f64 {
        let beta = CoefVector::from_slice(&[1.0, 1.0, 0.0]);
        let tau = QuantileLevel::new(0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = sample_errors(100_000, case, tau, &beta, &toeplitz_homogeneous(3), 20.0, &mut rng);
        e.iter().filter(|&&v| v <= 0.0).count() as f64 / 1e5
    }

    #[test]
    fn error_quantile_is_zero() {
        let c = coverage(ErrorCase::Normal, 5);
        assert!((0.795..=0.805).contains(&c), "{c}");
        let c = coverage(ErrorCase::Cauchy, 6);
        assert!((0.79..=0.81).contains(&c), "{c}");
    }

    #[test]
    fn errors_vanish_at_high_snr() {
        let beta = CoefVector::from_slice(&[1.0, -2.0]);
        let cov = toeplitz_homogeneous(2);
        let tau = QuantileLevel::new(0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let e = sample_errors(1000, ErrorCase::Normal, tau, &beta, &cov, 1e8, &mut rng);
        let mean = e.mean();
        let sd = (e.map(|v| (v - mean).powi(2)).sum() / 999.0).sqrt();
        assert!(sd < 1e-3 * cov.quad_form(beta.as_dvector()).sqrt());
    }

    #[test]
    fn empty_source_list() {
        let spec = DesignSpec { k: 0, num_informative: 0, p: 10, s0: 3, n0: 20, ..DesignSpec::default() };
        let (c, g, h) = generate_collection(&spec).unwrap();
        assert_eq!(c.k(), 0);
        assert_eq!(g.beta.len(), 1);
        assert_eq!(h.n(), 4);
    }

    #[test]
    fn default_shapes_and_determinism() {
        let spec = DesignSpec::default();
        let (c, g, h) = generate_collection(&spec).unwrap();
        assert_eq!(c.k(), 20);
        for k in 0..=20 {
            assert_eq!(c.study(k).x().shape(), (150, 150));
        }
        assert_eq!(h.x().shape(), (30, 150));
        let (c2, g2, h2) = generate_collection(&spec).unwrap();
        assert_eq!(g, g2);
        assert_eq!(h, h2);
        for k in 0..=20 {
            assert_eq!(c.study(k), c2.study(k));
        }
        let (c3, _, _) = generate_replication(&spec, 1).unwrap();
        assert_ne!(c.target.y(), c3.target.y());
    }

    #[test]
    fn heterogeneous_target_is_identity() {
        let spec = DesignSpec { kind: DesignKind::Heterogeneous, k: 3, num_informative: 2, p: 10, s0: 2, ..DesignSpec::default() };
        let g = generate_coefficients(&spec, 0).unwrap();
        assert_eq!(g.sigma[0], Covariance::Identity { p: 10 });
        assert_eq!(g.sigma[3], toeplitz_heterogeneous(10, 3).unwrap());
        let wide = DesignSpec { kind: DesignKind::Heterogeneous, k: 6, num_informative: 2, p: 10, s0: 2, ..DesignSpec::default() };
        assert!(matches!(generate_coefficients(&wide, 0), Err(Error::BandTooWide { .. })));
    }

    #[test]
    fn invalid_specs() {
        let base = DesignSpec::default();
        for bad in [
            DesignSpec { p: 151, ..base.clone() },
            DesignSpec { s0: 200, ..base.clone() },
            DesignSpec { num_informative: 21, ..base.clone() },
            DesignSpec { eta: 0.0, ..base.clone() },
            DesignSpec { tau: 1.0, ..base.clone() },
            DesignSpec { n0: 4, ..base.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn streams_are_order_free(seed in any::<u64>(), r in 0u64..100, study in 0usize..30) {
            let a: Vec<u64> = (0..4).map({
                let mut s = stream(seed, r, study, Purpose::Design);
                move |_| s.random()
            }).collect();
            let _ = stream(seed, r + 1, study, Purpose::Design).random::<u64>();
            let b: Vec<u64> = (0..4).map({
                let mut s = stream(seed, r, study, Purpose::Design);
                move |_| s.random()
            }).collect();
            prop_assert_eq!(&a, &b);
            let c: u64 = stream(seed, r, study, Purpose::Errors).random();
            prop_assert_ne!(a[0], c);
        }

        #[test]
        fn perturbations_live_on_half(seed in any::<u64>(), d in 0.1f64..50.0) {
            let spec = DesignSpec { seed, d, k: 3, num_informative: 2, p: 20, s0: 4, ..DesignSpec::default() };
            let g = generate_coefficients(&spec, 0).unwrap();
            for k in 1..=3 {
                let moved = g.beta[k].as_slice().iter().zip(g.beta[0].as_slice()).filter(|(a, b)| a != b).count();
                prop_assert!(moved <= 10);
            }
        }
    }
}
