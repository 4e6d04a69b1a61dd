//! Transfer estimation with a given informative set, and the baselines.
//!
//! A fit runs four steps: per-study penalized quantile regression, kernel
//! density and surrogate responses, a pooled lasso of the surrogates over the
//! target and the informative sources, and a target-only lasso correction
//! that is subtracted from the pooled coefficient.
//!
//! [`Prepared`] caches the per-study work (initial fit, density, surrogate
//! and Gram blocks) so that several informative sets can be fitted on one
//! collection without repeating it.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{CoefVector, Dataset, InformativeSet, QuantileLevel, StudyCollection};
use crate::solvers::{
    cross_validate_lambda0, default_lambda0_grid, CvConfig, GramProblem, LassoSolverConfig, QrProblem,
    QrSolverConfig,
};
use crate::surrogate::{
    bandwidth, estimate_density_at_zero, surrogate_responses, BandwidthKind, BandwidthRule, DensityEstimate,
    DensityNorm, KernelSpec,
};

/// A penalty level, either given or resolved by the default rule.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Penalty {
    #[default]
    Auto,
    Fixed(f64),
}

impl Serialize for Penalty {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Penalty::Auto => s.serialize_str("auto"),
            Penalty::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Penalty {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Word(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) if v >= 0.0 && v.is_finite() => Ok(Penalty::Fixed(v)),
            Repr::Num(v) => Err(serde::de::Error::custom(format!("penalty must be >= 0, got {v}"))),
            Repr::Word(w) if w == "auto" => Ok(Penalty::Auto),
            Repr::Word(w) => Err(serde::de::Error::custom(format!("expected a number or \"auto\", got {w:?}"))),
        }
    }
}

/// Which data an automatic initial penalty is tuned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lambda0Scope {
    /// Each study cross-validates its own penalty.
    #[default]
    PerStudy,
    /// The target's penalty is used for every study.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TransferConfig {
    pub lambda0: Penalty,
    pub lambda0_scope: Lambda0Scope,
    pub lambda1: Penalty,
    pub lambda2: Penalty,
    pub bandwidth: BandwidthRule,
    pub qr: QrSolverConfig,
    pub lasso: LassoSolverConfig,
    pub cv: CvConfig,
    pub execution: Execution,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Final estimate with the intermediate quantities.
///
/// Per-study vectors are indexed by study (0 = target) and hold `None` for
/// studies the fit did not use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferFit {
    pub beta_hat: CoefVector,
    pub beta_fused: CoefVector,
    pub delta_hat: CoefVector,
    pub initial_fits: Vec<Option<CoefVector>>,
    pub densities: Vec<Option<DensityEstimate>>,
    /// Initial penalty of each study used.
    pub initial_lambda0: Vec<Option<f64>>,
    pub set_used: InformativeSet,
    pub lambdas: Lambdas,
    /// Every solve met its stopping rule.
    pub converged: bool,
}

/// `sqrt(2 log(max(p, n_max)) / n_total)`.
pub fn lambda1_rule(p: usize, n_max: usize, n_total: usize) -> f64 {
    (2.0 * (p.max(n_max) as f64).ln() / n_total as f64).sqrt()
}

/// `sqrt(2 log(max(p, n0)) / n0)`.
pub fn lambda2_rule(p: usize, n0: usize) -> f64 {
    lambda1_rule(p, n0, n0)
}

/// Cross-validated or fixed initial penalty for `target`.
pub fn resolve_lambda0(target: &Dataset, tau: QuantileLevel, cfg: &TransferConfig) -> Result<f64> {
    match cfg.lambda0 {
        Penalty::Fixed(v) => Ok(v),
        Penalty::Auto => {
            let grid = match &cfg.cv.grid {
                Some(g) => g.clone(),
                None => default_lambda0_grid(target.n(), target.p()),
            };
            cross_validate_lambda0(target, tau, &grid, cfg.cv.folds, cfg.cv.seed, &cfg.qr, cfg.execution)
        }
    }
}

fn resolve_fusion(target: &Dataset, sources: &[Dataset], a: &InformativeSet, cfg: &TransferConfig) -> (f64, f64) {
    let n0 = target.n();
    let p = target.p();
    let l1 = match cfg.lambda1 {
        Penalty::Fixed(v) => v,
        Penalty::Auto => {
            let n_a: usize = a.members().iter().map(|&k| sources[k - 1].n()).sum();
            let n_max = a.members().iter().map(|&k| sources[k - 1].n()).fold(n0, usize::max);
            lambda1_rule(p, n_max, n_a + n0)
        }
    };
    let l2 = match cfg.lambda2 {
        Penalty::Fixed(v) => v,
        Penalty::Auto => lambda2_rule(p, n0),
    };
    (l1, l2)
}

/// All three penalties for fitting `c` with informative set `a`.
pub fn resolve_lambdas(c: &StudyCollection, a: &InformativeSet, cfg: &TransferConfig) -> Result<Lambdas> {
    a.check_within(c.k())?;
    let lambda0 = resolve_lambda0(&c.target, c.tau, cfg)?;
    let (lambda1, lambda2) = resolve_fusion(&c.target, &c.sources, a, cfg);
    Ok(Lambdas { lambda0, lambda1, lambda2 })
}

/// Per-study artifacts of the first two steps.
#[derive(Debug, Clone)]
pub struct StudyArtifacts {
    pub lambda0: f64,
    pub fit: CoefVector,
    pub converged: bool,
    pub density: DensityEstimate,
    /// `None` when the density is unusable.
    pub surrogate: Option<DVector<f64>>,
    xtx: DMatrix<f64>,
    xty: Option<DVector<f64>>,
    yty: f64,
}

type Slot = Arc<OnceLock<Result<Arc<StudyArtifacts>>>>;

/// A target and its sources with per-study work computed on demand.
pub struct Prepared<'a> {
    target: &'a Dataset,
    sources: &'a [Dataset],
    tau: QuantileLevel,
    cfg: TransferConfig,
    lambda0: f64,
    /// `None`: each source tunes its own initial penalty.
    source_lambda0: Option<f64>,
    target_bandwidth: (BandwidthKind, usize),
    studies: Vec<Slot>,
}

impl<'a> Prepared<'a> {
    /// Resolves the initial penalties as configured.
    pub fn new(c: &'a StudyCollection, cfg: &TransferConfig) -> Result<Self> {
        let lambda0 = resolve_lambda0(&c.target, c.tau, cfg)?;
        Ok(Self::with_target_lambda0(&c.target, &c.sources, c.tau, cfg, lambda0))
    }

    /// Uses `lambda0` on the target; sources follow the configured scope.
    pub fn with_target_lambda0(
        target: &'a Dataset,
        sources: &'a [Dataset],
        tau: QuantileLevel,
        cfg: &TransferConfig,
        lambda0: f64,
    ) -> Self {
        let source_lambda0 = match (cfg.lambda0, cfg.lambda0_scope) {
            (Penalty::Fixed(v), _) => Some(v),
            (Penalty::Auto, Lambda0Scope::Shared) => Some(lambda0),
            (Penalty::Auto, Lambda0Scope::PerStudy) => None,
        };
        Self::build(target, sources, tau, cfg, lambda0, source_lambda0)
    }

    /// Uses the given initial penalty for every study.
    pub fn with_lambda0(
        target: &'a Dataset,
        sources: &'a [Dataset],
        tau: QuantileLevel,
        cfg: &TransferConfig,
        lambda0: f64,
    ) -> Self {
        Self::build(target, sources, tau, cfg, lambda0, Some(lambda0))
    }

    fn build(
        target: &'a Dataset,
        sources: &'a [Dataset],
        tau: QuantileLevel,
        cfg: &TransferConfig,
        lambda0: f64,
        source_lambda0: Option<f64>,
    ) -> Self {
        Prepared {
            target,
            sources,
            tau,
            cfg: cfg.clone(),
            lambda0,
            source_lambda0,
            target_bandwidth: (cfg.bandwidth.kind, target.n()),
            studies: (0..=sources.len()).map(|_| Slot::default()).collect(),
        }
    }

    /// Same sources with a different target. Source work is shared when it
    /// does not depend on the target.
    pub fn for_target<'b>(&self, target: &'b Dataset, lambda0: f64) -> Prepared<'b>
    where
        'a: 'b,
    {
        let mut p = Prepared::with_target_lambda0(target, self.sources, self.tau, &self.cfg, lambda0);
        if p.source_lambda0 == self.source_lambda0 {
            for k in 1..p.studies.len() {
                p.studies[k] = Arc::clone(&self.studies[k]);
            }
        }
        p
    }

    /// Overrides the bandwidth formula and sample size used for the target.
    pub fn with_target_bandwidth(mut self, kind: BandwidthKind, n: usize) -> Self {
        self.target_bandwidth = (kind, n);
        self
    }

    /// Initial penalty of the target.
    pub fn lambda0(&self) -> f64 {
        self.lambda0
    }

    pub fn k(&self) -> usize {
        self.sources.len()
    }

    pub fn config(&self) -> &TransferConfig {
        &self.cfg
    }

    fn dataset(&self, k: usize) -> &Dataset {
        if k == 0 {
            self.target
        } else {
            &self.sources[k - 1]
        }
    }

    /// Steps 1 and 2 for study `k`, computed once.
    pub fn study(&self, k: usize) -> Result<Arc<StudyArtifacts>> {
        self.studies[k].get_or_init(|| self.compute(k).map(Arc::new).map_err(|e| e.for_study(k))).clone()
    }

    /// Computes the listed studies, in parallel when configured.
    pub fn ensure(&self, ks: &[usize]) {
        self.cfg.execution.map(ks, |&k| {
            let _ = self.study(k);
        });
    }

    fn compute(&self, k: usize) -> Result<StudyArtifacts> {
        let d = self.dataset(k);
        let lambda0 = match (k, self.source_lambda0) {
            (0, _) => self.lambda0,
            (_, Some(v)) => v,
            (_, None) => resolve_lambda0(d, self.tau, &self.cfg)?,
        };
        let qr = self.cfg.qr.with_lambda(lambda0);
        let rep = QrProblem::new(d, self.tau).solve(&qr)?;
        let s = self.cfg.bandwidth.sparsity.resolve(&rep.coef);
        let (kind, n) = if k == 0 { self.target_bandwidth } else { (self.cfg.bandwidth.kind, d.n()) };
        let h = bandwidth(kind, s, n)?;
        let density = estimate_density_at_zero(d, &rep.coef, h, &KernelSpec::default(), DensityNorm::Sample);
        let surrogate = surrogate_responses(d, &rep.coef, &density, self.tau).ok();
        let x = d.x();
        Ok(StudyArtifacts {
            lambda0,
            xtx: x.tr_mul(x),
            xty: surrogate.as_ref().map(|s| x.tr_mul(s)),
            yty: surrogate.as_ref().map_or(0.0, |s| s.norm_squared()),
            fit: rep.coef,
            converged: rep.converged,
            density,
            surrogate,
        })
    }

    fn usable(&self, k: usize) -> Result<Arc<StudyArtifacts>> {
        let a = self.study(k)?;
        if a.surrogate.is_none() {
            return Err(Error::DegenerateDensity { study: k, f0: a.density.f0 });
        }
        Ok(a)
    }

    /// Step 3 with penalty `lambda1`: the pooled coefficient.
    pub fn fuse(&self, a: &InformativeSet, lambda1: f64) -> Result<(CoefVector, bool)> {
        a.check_within(self.k())?;
        let ids: Vec<usize> = std::iter::once(0).chain(a.members().iter().copied()).collect();
        self.ensure(&ids);
        let arts = ids.iter().map(|&k| self.usable(k)).collect::<Result<Vec<_>>>()?;
        let pooled = GramProblem::pooled(arts.iter().zip(&ids).map(|(s, &k)| {
            (&s.xtx, s.xty.as_ref().expect("usable study has a surrogate"), s.yty, self.dataset(k).n())
        }))?;
        let rep = pooled.solve(&self.cfg.lasso.with_lambda(lambda1), None)?;
        Ok((rep.coef, rep.converged))
    }

    /// Steps 1 to 3 with the default or configured fusion penalty.
    pub fn fuse_auto(&self, a: &InformativeSet) -> Result<(CoefVector, bool)> {
        a.check_within(self.k())?;
        let (l1, _) = resolve_fusion(self.target, self.sources, a, &self.cfg);
        self.fuse(a, l1)
    }

    /// All four steps with informative set `a`.
    pub fn fit(&self, a: &InformativeSet) -> Result<TransferFit> {
        a.check_within(self.k())?;
        let (lambda1, lambda2) = resolve_fusion(self.target, self.sources, a, &self.cfg);
        let (fused, fused_ok) = self.fuse(a, lambda1)?;

        let t = self.usable(0)?;
        let ys = t.surrogate.as_ref().expect("usable target has a surrogate");
        let x0 = self.target.x();
        let resid = x0 * fused.as_dvector() - ys;
        let rhs = x0.tr_mul(&resid);
        let debias = GramProblem::pooled([(&t.xtx, &rhs, resid.norm_squared(), self.target.n())])?;
        let rep = debias.solve(&self.cfg.lasso.with_lambda(lambda2), None)?;
        let delta = rep.coef;
        let beta_hat = CoefVector::new(fused.as_dvector() - delta.as_dvector());

        let mut initial_fits = vec![None; self.k() + 1];
        let mut densities = vec![None; self.k() + 1];
        let mut initial_lambda0 = vec![None; self.k() + 1];
        let mut converged = fused_ok && rep.converged;
        for k in std::iter::once(0).chain(a.members().iter().copied()) {
            let s = self.study(k)?;
            initial_fits[k] = Some(s.fit.clone());
            densities[k] = Some(s.density);
            initial_lambda0[k] = Some(s.lambda0);
            converged &= s.converged;
        }
        Ok(TransferFit {
            beta_hat,
            beta_fused: fused,
            delta_hat: delta,
            initial_fits,
            densities,
            initial_lambda0,
            set_used: a.clone(),
            lambdas: Lambdas { lambda0: self.lambda0, lambda1, lambda2 },
            converged,
        })
    }

    /// The initial fit on the target alone.
    pub fn target_only(&self) -> Result<TransferFit> {
        let s = self.study(0)?;
        let mut initial_fits = vec![None; self.k() + 1];
        initial_fits[0] = Some(s.fit.clone());
        let mut densities = vec![None; self.k() + 1];
        densities[0] = Some(s.density);
        let mut initial_lambda0 = vec![None; self.k() + 1];
        initial_lambda0[0] = Some(s.lambda0);
        let (lambda1, lambda2) = resolve_fusion(self.target, self.sources, &InformativeSet::empty(), &self.cfg);
        Ok(TransferFit {
            beta_hat: s.fit.clone(),
            beta_fused: s.fit.clone(),
            delta_hat: CoefVector::zeros(self.target.p()),
            initial_fits,
            densities,
            initial_lambda0,
            set_used: InformativeSet::empty(),
            lambdas: Lambdas { lambda0: self.lambda0, lambda1, lambda2 },
            converged: s.converged,
        })
    }
}

/// Penalized quantile regression on the target alone.
pub fn fit_target_only(c: &StudyCollection, cfg: &TransferConfig) -> Result<TransferFit> {
    Prepared::new(c, cfg)?.target_only()
}

/// Transfer fit with a known informative set.
pub fn fit_oracle(c: &StudyCollection, a: &InformativeSet, cfg: &TransferConfig) -> Result<TransferFit> {
    a.check_within(c.k())?;
    Prepared::new(c, cfg)?.fit(a)
}

/// Transfer fit treating every source as informative.
pub fn fit_naive(c: &StudyCollection, cfg: &TransferConfig) -> Result<TransferFit> {
    fit_oracle(c, &InformativeSet::full(c.k()), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::solve_qr_lasso;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn study(seed: u64, n: usize, p: usize, shift: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |i, _| {
            x[(i, 0)] + x[(i, 1)] + shift * x[(i, 2)] + 0.5 * rng.sample::<f64, _>(StandardNormal)
        });
        Dataset::new(x, y).unwrap()
    }

    fn collection(k: usize) -> StudyCollection {
        let sources = (1..=k).map(|s| study(100 + s as u64, 60, 8, 0.1 * s as f64)).collect();
        StudyCollection::new(study(1, 50, 8, 0.0), sources, QuantileLevel::new(0.5).unwrap()).unwrap()
    }

    fn cfg() -> TransferConfig {
        TransferConfig {
            lambda0: Penalty::Fixed(0.05),
            execution: Execution::Sequential,
            ..Default::default()
        }
    }

    #[test]
    fn penalty_serde() {
        let p: Penalty = serde_json::from_str("\"auto\"").unwrap();
        assert_eq!(p, Penalty::Auto);
        let p: Penalty = serde_json::from_str("0.25").unwrap();
        assert_eq!(p, Penalty::Fixed(0.25));
        assert!(serde_json::from_str::<Penalty>("-1").is_err());
        assert!(serde_json::from_str::<Penalty>("\"big\"").is_err());
        assert_eq!(serde_json::to_string(&Penalty::Auto).unwrap(), "\"auto\"");
    }

    #[test]
    fn lambda_rules() {
        assert!((lambda1_rule(150, 150, 150) - 0.258_48).abs() < 1e-5);
        assert!((lambda2_rule(150, 150) - 0.258_48).abs() < 1e-5);
        assert!((lambda1_rule(150, 150, 3150) - 0.056_40).abs() < 1e-5);
    }

    #[test]
    fn resolve_passes_fixed_values_through() {
        let c = collection(2);
        let cfg = TransferConfig {
            lambda1: Penalty::Fixed(0.3),
            lambda2: Penalty::Fixed(0.4),
            ..cfg()
        };
        let l = resolve_lambdas(&c, &InformativeSet::full(2), &cfg).unwrap();
        assert_eq!((l.lambda0, l.lambda1, l.lambda2), (0.05, 0.3, 0.4));
        let l = resolve_lambdas(&c, &InformativeSet::full(2), &self::cfg()).unwrap();
        assert!((l.lambda1 - lambda1_rule(8, 60, 170)).abs() < 1e-15);
        assert!((l.lambda2 - lambda2_rule(8, 50)).abs() < 1e-15);
    }

    #[test]
    fn target_only_matches_solver_and_ignores_sources() {
        let c = collection(3);
        let fit = fit_target_only(&c, &cfg()).unwrap();
        let direct = solve_qr_lasso(&c.target, c.tau, &QrSolverConfig::default().with_lambda(0.05)).unwrap();
        assert_eq!(fit.beta_hat, direct.coef);
        assert_eq!(fit.delta_hat.sparsity(), 0);
        assert!(fit.set_used.is_empty());
        let alone = StudyCollection::new(c.target.clone(), vec![], c.tau).unwrap();
        assert_eq!(fit_target_only(&alone, &cfg()).unwrap().beta_hat, fit.beta_hat);
        let huge = TransferConfig { lambda0: Penalty::Fixed(1e3), ..cfg() };
        assert_eq!(fit_target_only(&c, &huge).unwrap().beta_hat.sparsity(), 0);
    }

    #[test]
    fn final_estimate_is_fused_minus_correction() {
        let c = collection(3);
        let fit = fit_oracle(&c, &InformativeSet::new(vec![1, 3]).unwrap(), &cfg()).unwrap();
        for j in 0..8 {
            assert_eq!(fit.beta_hat[j], fit.beta_fused[j] - fit.delta_hat[j]);
        }
        assert!(fit.initial_fits[2].is_none() && fit.initial_fits[3].is_some());
    }

    #[test]
    fn empty_set_runs_all_steps_on_target() {
        let c = collection(2);
        let cfg = cfg();
        let fit = fit_oracle(&c, &InformativeSet::empty(), &cfg).unwrap();
        // The correction solves the debias lasso exactly.
        let prep = Prepared::new(&c, &cfg).unwrap();
        let t = prep.study(0).unwrap();
        let ys = t.surrogate.as_ref().unwrap();
        let resid = c.target.x() * fit.beta_fused.as_dvector() - ys;
        let g = GramProblem::from_data(c.target.x(), &resid).unwrap();
        assert!(g.kkt_violation(fit.delta_hat.as_dvector(), fit.lambdas.lambda2) < 1e-6);
        let alone = StudyCollection::new(c.target.clone(), vec![], c.tau).unwrap();
        assert_eq!(fit_naive(&alone, &cfg).unwrap().beta_hat, fit.beta_hat);
    }

    #[test]
    fn duplicated_source_needs_no_correction() {
        let c0 = collection(0);
        let c = StudyCollection::new(c0.target.clone(), vec![c0.target.clone()], c0.tau).unwrap();
        let tol = 1e-7;
        let cfg = TransferConfig {
            // Pooled residual correlations are bounded by lambda1.
            lambda1: Penalty::Fixed(tol),
            lambda2: Penalty::Fixed(10.0 * tol),
            ..cfg()
        };
        let fit = fit_oracle(&c, &InformativeSet::full(1), &cfg).unwrap();
        assert!(fit.delta_hat.l1_norm() <= tol, "{}", fit.delta_hat.l1_norm());
    }

    #[test]
    fn naive_uses_every_source() {
        let c = collection(3);
        let a = fit_naive(&c, &cfg()).unwrap();
        let b = fit_oracle(&c, &InformativeSet::full(3), &cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.set_used.members(), &[1, 2, 3]);
    }

    #[test]
    fn source_order_does_not_matter() {
        let c = collection(3);
        let swapped =
            StudyCollection::new(c.target.clone(), vec![c.sources[2].clone(), c.sources[1].clone(), c.sources[0].clone()], c.tau)
                .unwrap();
        let a = fit_oracle(&c, &InformativeSet::new(vec![1, 3]).unwrap(), &cfg()).unwrap();
        let b = fit_oracle(&swapped, &InformativeSet::new(vec![1, 3]).unwrap(), &cfg()).unwrap();
        assert!((a.beta_hat.as_dvector() - b.beta_hat.as_dvector()).amax() < 1e-10);
    }

    #[test]
    fn unusable_density_names_the_study() {
        let c = collection(2);
        let cfg = TransferConfig {
            lambda0: Penalty::Fixed(1e3),
            bandwidth: BandwidthRule { kind: BandwidthKind::Fixed(1e-12), ..Default::default() },
            ..cfg()
        };
        match fit_oracle(&c, &InformativeSet::full(2), &cfg) {
            Err(Error::DegenerateDensity { study, .. }) => assert_eq!(study, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_range_set_is_rejected() {
        let c = collection(2);
        assert!(fit_oracle(&c, &InformativeSet::new(vec![3]).unwrap(), &cfg()).is_err());
    }
}
