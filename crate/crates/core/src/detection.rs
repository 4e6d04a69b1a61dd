//! Informative-source detection by splitting the target sample.
//!
//! The target is split into a training half `I` and a testing half `I^c`.
//! A target-only fit on `I` and one pooled fit per source (on `I` plus that
//! source) are scored by a squared surrogate loss on `I^c`; sources scoring
//! within a factor `1 + eps0` of the target-only fit are kept.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{CoefVector, Dataset, InformativeSet, QuantileLevel, StudyCollection};
use crate::solvers::QrProblem;
use crate::surrogate::{bandwidth, estimate_density_at_zero, surrogate_responses, DensityNorm, KernelSpec};
use crate::transfer::{resolve_lambda0, Prepared, TransferConfig, TransferFit};

pub const DEFAULT_EPSILON0: f64 = 0.01;

/// Selection slack `eps0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Epsilon {
    Fixed(f64),
    /// [`DEFAULT_EPSILON0`].
    #[default]
    Auto,
    /// `min(DEFAULT_EPSILON0, c_eps)` with `c_eps` from [`estimate_c_eps`].
    AutoCeps,
}

impl std::str::FromStr for Epsilon {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Epsilon::Auto),
            "auto-ceps" => Ok(Epsilon::AutoCeps),
            _ => match s.parse::<f64>() {
                Ok(v) if v > 0.0 => Ok(Epsilon::Fixed(v)),
                _ => Err(Error::InvalidConfig(format!("epsilon0 must be positive, \"auto\" or \"auto-ceps\", got {s:?}"))),
            },
        }
    }
}

impl Serialize for Epsilon {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Epsilon::Fixed(v) => s.serialize_f64(*v),
            Epsilon::Auto => s.serialize_str("auto"),
            Epsilon::AutoCeps => s.serialize_str("auto-ceps"),
        }
    }
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Word(String),
        }
        let text = match Repr::deserialize(d)? {
            Repr::Num(v) => v.to_string(),
            Repr::Word(w) => w,
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DetectionConfig {
    pub epsilon0: Epsilon,
    pub split_seed: u64,
    pub transfer: TransferConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub detected: InformativeSet,
    /// Test loss of the target-only fit on the training half.
    pub loss_baseline: f64,
    /// Test loss per source; `None` when the source was excluded by a failure.
    pub loss_per_source: Vec<Option<f64>>,
    /// `None` for the known-size variant.
    pub epsilon_used: Option<f64>,
    pub c_eps: Option<f64>,
    pub split: (Vec<usize>, Vec<usize>),
    pub warnings: Vec<String>,
}

/// Seeded split of `0..n0` into a training part of size `floor(n0/2)` and
/// its complement, each sorted.
pub fn split_target(n0: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n0 < 4 {
        return Err(Error::TooFewSamples(format!("splitting needs n0 >= 4, got {n0}")));
    }
    let mut idx: Vec<usize> = (0..n0).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = idx.split_at(n0 / 2);
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_unstable();
    b.sort_unstable();
    Ok((a, b))
}

/// Squared surrogate loss on the testing half of a split target.
#[derive(Debug, Clone)]
pub struct TargetLoss {
    test: Dataset,
    surrogate: nalgebra::DVector<f64>,
    full_n: usize,
}

impl TargetLoss {
    /// Fits the testing half with `lambda0` and builds its surrogate with the
    /// split bandwidth and the `2 / (n0 h)` density normalization.
    pub fn new(test: Dataset, full_n: usize, tau: QuantileLevel, cfg: &TransferConfig, lambda0: f64) -> Result<Self> {
        let rep = QrProblem::new(&test, tau).solve(&cfg.qr.with_lambda(lambda0))?;
        let rule = cfg.bandwidth.for_detection();
        let h = bandwidth(rule.kind, rule.sparsity.resolve(&rep.coef), full_n)?;
        let dens =
            estimate_density_at_zero(&test, &rep.coef, h, &KernelSpec::default(), DensityNorm::HalfSplit { full_n });
        let surrogate = surrogate_responses(&test, &rep.coef, &dens, tau)?;
        Ok(TargetLoss { test, surrogate, full_n })
    }

    /// `(2 / n0) sum_{I^c} (y~_i - x_i'beta)^2`.
    pub fn loss(&self, beta: &CoefVector) -> f64 {
        let r = &self.surrogate - self.test.x() * beta.as_dvector();
        r.norm_squared() / (self.full_n as f64 / 2.0)
    }
}

/// Loss of `beta` on the testing rows `test` of a target of size `full_n`.
pub fn empirical_target_loss(
    test: &Dataset,
    full_n: usize,
    beta: &CoefVector,
    tau: QuantileLevel,
    cfg: &TransferConfig,
    lambda0: f64,
) -> Result<f64> {
    Ok(TargetLoss::new(test.clone(), full_n, tau, cfg, lambda0)?.loss(beta))
}

/// `min_k (b_k - b_0)' S (b_k - b_0) / q0` with `S = X0'X0 / n0`.
///
/// `initial_fits[0]` is the target fit, `initial_fits[k]` source `k`.
pub fn estimate_c_eps(target: &Dataset, initial_fits: &[CoefVector], q0_hat: f64) -> Result<f64> {
    if !(q0_hat > 0.0) {
        return Err(Error::ZeroBaselineLoss);
    }
    if initial_fits.len() < 2 {
        return Err(Error::InvalidConfig("c_eps needs at least one source fit".into()));
    }
    let b0 = initial_fits[0].as_dvector();
    let n0 = target.n() as f64;
    let mut best = f64::INFINITY;
    for b in &initial_fits[1..] {
        let diff = b.as_dvector() - b0;
        let form = (target.x() * diff).norm_squared() / n0;
        best = best.min(form);
    }
    Ok(best / q0_hat)
}

/// Losses of the split screening, before any thresholding.
#[derive(Debug, Clone)]
pub struct Screening {
    pub split: (Vec<usize>, Vec<usize>),
    pub baseline: f64,
    pub per_source: Vec<Option<f64>>,
    pub warnings: Vec<String>,
    pub target_loss: TargetLoss,
}

impl Screening {
    /// `{k : loss_k <= (1 + eps) baseline}`.
    pub fn threshold(&self, eps: f64) -> InformativeSet {
        let cut = (1.0 + eps) * self.baseline;
        let members = (1..=self.per_source.len())
            .filter(|&k| self.per_source[k - 1].is_some_and(|l| l <= cut))
            .collect();
        InformativeSet::new(members).expect("indices are in range and distinct")
    }

    /// The `m` smallest losses, ties to the smaller index.
    pub fn smallest(&self, m: usize) -> InformativeSet {
        let mut ranked: Vec<(f64, usize)> =
            (1..=self.per_source.len()).filter_map(|k| self.per_source[k - 1].map(|l| (l, k))).collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let members = ranked.into_iter().take(m).map(|(_, k)| k).collect();
        InformativeSet::new(members).expect("indices are in range and distinct")
    }

    fn report(&self, detected: InformativeSet, eps: Option<f64>, c_eps: Option<f64>) -> DetectionReport {
        DetectionReport {
            detected,
            loss_baseline: self.baseline,
            loss_per_source: self.per_source.clone(),
            epsilon_used: eps,
            c_eps,
            split: self.split.clone(),
            warnings: self.warnings.clone(),
        }
    }
}

/// Fits both halves and scores the target-only and single-source fits.
///
/// The training half's cross-validated (or fixed) initial penalty is used for
/// both target halves; sources follow the configured penalty scope.
pub fn screen(c: &StudyCollection, dcfg: &DetectionConfig) -> Result<Screening> {
    screen_with(c, dcfg, None)
}

/// [`screen`] reusing source work from a full-target [`Prepared`] where the
/// configuration allows it.
pub fn screen_with(c: &StudyCollection, dcfg: &DetectionConfig, full: Option<&Prepared>) -> Result<Screening> {
    if c.k() == 0 {
        return Err(Error::InvalidConfig("detection needs at least one source".into()));
    }
    let cfg = &dcfg.transfer;
    let n0 = c.target.n();
    let (train_idx, test_idx) = split_target(n0, dcfg.split_seed)?;
    let train = c.target.select_rows(&train_idx);
    let test = c.target.select_rows(&test_idx);
    let lambda0 = resolve_lambda0(&train, c.tau, cfg)?;

    let prep = match full {
        Some(f) => f.for_target(&train, lambda0),
        None => Prepared::with_target_lambda0(&train, &c.sources, c.tau, cfg, lambda0),
    }
    .with_target_bandwidth(cfg.bandwidth.for_detection().kind, n0);
    let all: Vec<usize> = (0..=c.k()).collect();
    prep.ensure(&all);
    let base = prep.study(0)?;
    let target_loss = TargetLoss::new(test, n0, c.tau, cfg, lambda0)?;
    let baseline = target_loss.loss(&base.fit);

    let fused = cfg.execution.map_range(c.k(), |i| {
        let set = InformativeSet::new(vec![i + 1]).expect("single valid member");
        prep.fuse_auto(&set).map(|(b, _)| b)
    });
    let mut per_source = Vec::with_capacity(c.k());
    let mut warnings = Vec::new();
    for (i, f) in fused.into_iter().enumerate() {
        match f {
            Ok(b) => per_source.push(Some(target_loss.loss(&b))),
            Err(e) if e.is_numerical() => {
                warnings.push(format!("source {} excluded: {e}", i + 1));
                per_source.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Screening { split: (train_idx, test_idx), baseline, per_source, warnings, target_loss })
}

fn c_eps_from(c: &StudyCollection, s: &Screening, full: &Prepared) -> Result<f64> {
    let all: Vec<usize> = (0..=c.k()).collect();
    full.ensure(&all);
    let fits = all.iter().map(|&k| full.study(k).map(|a| a.fit.clone())).collect::<Result<Vec<_>>>()?;
    let q0 = s.target_loss.loss(&fits[0]);
    estimate_c_eps(&c.target, &fits, q0)
}

/// Thresholds a screening; `full` supplies full-target initial fits for
/// [`Epsilon::AutoCeps`] and is built on demand when absent.
pub fn detect_from(
    c: &StudyCollection,
    s: &Screening,
    epsilon: Epsilon,
    cfg: &TransferConfig,
    full: Option<&Prepared>,
) -> Result<DetectionReport> {
    let (eps, c_eps) = match epsilon {
        Epsilon::Fixed(v) => (v, None),
        Epsilon::Auto => (DEFAULT_EPSILON0, None),
        Epsilon::AutoCeps => {
            let ce = match full {
                Some(p) => c_eps_from(c, s, p)?,
                None => c_eps_from(c, s, &Prepared::new(c, cfg)?)?,
            };
            (DEFAULT_EPSILON0.min(ce), Some(ce))
        }
    };
    Ok(s.report(s.threshold(eps), Some(eps), c_eps))
}

pub fn detect(c: &StudyCollection, dcfg: &DetectionConfig) -> Result<DetectionReport> {
    let s = screen(c, dcfg)?;
    detect_from(c, &s, dcfg.epsilon0, &dcfg.transfer, None)
}

/// Keeps the `m` sources with the smallest screening losses.
pub fn pseudo_detect(c: &StudyCollection, m: usize, dcfg: &DetectionConfig) -> Result<DetectionReport> {
    if m == 0 || m > c.k() {
        return Err(Error::InvalidM { m, k: c.k() });
    }
    let s = screen(c, dcfg)?;
    let mut r = s.report(s.smallest(m), None, None);
    if r.detected.len() < m {
        r.warnings.push(format!("only {} sources available for m = {m}", r.detected.len()));
    }
    Ok(r)
}

fn empty_report() -> DetectionReport {
    DetectionReport {
        detected: InformativeSet::empty(),
        loss_baseline: 0.0,
        loss_per_source: vec![],
        epsilon_used: None,
        c_eps: None,
        split: (vec![], vec![]),
        warnings: vec!["no sources: detection skipped".into()],
    }
}

/// Detection followed by the transfer fit on the full target.
pub fn fit_translasso(c: &StudyCollection, dcfg: &DetectionConfig) -> Result<(TransferFit, DetectionReport)> {
    let full = Prepared::new(c, &dcfg.transfer)?;
    if c.k() == 0 {
        return Ok((full.fit(&InformativeSet::empty())?, empty_report()));
    }
    let s = screen_with(c, dcfg, Some(&full))?;
    let report = detect_from(c, &s, dcfg.epsilon0, &dcfg.transfer, Some(&full))?;
    Ok((full.fit(&report.detected)?, report))
}

/// Known-size variant: keeps the `m` best-scoring sources, then fits.
pub fn fit_pseudo(c: &StudyCollection, m: usize, dcfg: &DetectionConfig) -> Result<(TransferFit, DetectionReport)> {
    let report = pseudo_detect(c, m, dcfg)?;
    Ok((Prepared::new(c, &dcfg.transfer)?.fit(&report.detected)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Execution;
    use crate::transfer::Penalty;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn split_sizes_and_determinism() {
        let (a, b) = split_target(10, 3).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let (a, b) = split_target(11, 3).unwrap();
        assert_eq!((a.len(), b.len()), (5, 6));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
        assert_eq!(split_target(11, 3).unwrap(), (a, b));
        assert_ne!(split_target(40, 1).unwrap(), split_target(40, 2).unwrap());
        assert!(split_target(3, 0).is_err());
    }

    #[test]
    fn epsilon_parsing() {
        assert_eq!("auto".parse::<Epsilon>().unwrap(), Epsilon::Auto);
        assert_eq!("auto-ceps".parse::<Epsilon>().unwrap(), Epsilon::AutoCeps);
        assert_eq!("0.05".parse::<Epsilon>().unwrap(), Epsilon::Fixed(0.05));
        assert!("0".parse::<Epsilon>().is_err());
        assert!("x".parse::<Epsilon>().is_err());
        let e: Epsilon = serde_json::from_str("0.2").unwrap();
        assert_eq!(e, Epsilon::Fixed(0.2));
    }

    fn ident_target() -> Dataset {
        Dataset::new(DMatrix::identity(3, 3), DVector::zeros(3)).unwrap()
    }

    #[test]
    fn c_eps_examples() {
        let t = Dataset::new(DMatrix::identity(3, 3) * 3f64.sqrt(), DVector::zeros(3)).unwrap();
        let b0 = CoefVector::zeros(3);
        let e1 = CoefVector::from_slice(&[1.0, 0.0, 0.0]);
        assert!((estimate_c_eps(&t, &[b0.clone(), e1.clone()], 2.0).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(estimate_c_eps(&ident_target(), &[b0.clone(), b0.clone(), b0.clone()], 1.0).unwrap(), 0.0);
        let forms = [2.0, 1.0, 3.0].map(|s: f64| CoefVector::from_slice(&[s * 3f64.sqrt(), 0.0, 0.0]));
        let fits = [b0.clone(), forms[0].clone(), forms[1].clone(), forms[2].clone()];
        // forms: 4, 1, 9 on the identity target with n0 = 3
        assert!((estimate_c_eps(&ident_target(), &fits, 2.0).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(estimate_c_eps(&ident_target(), &fits, 0.0), Err(Error::ZeroBaselineLoss));
    }

    fn screening(losses: &[f64]) -> Screening {
        Screening {
            split: (vec![], vec![]),
            baseline: 1.0,
            per_source: losses.iter().map(|&l| Some(l)).collect(),
            warnings: vec![],
            target_loss: TargetLoss {
                test: ident_target(),
                surrogate: DVector::zeros(3),
                full_n: 6,
            },
        }
    }

    #[test]
    fn known_size_selection() {
        let s = screening(&[0.3, 0.1, 0.2]);
        assert_eq!(s.smallest(1).members(), &[2]);
        assert_eq!(s.smallest(3).members(), &[1, 2, 3]);
        let s = screening(&[0.1, 0.1, 0.2]);
        assert_eq!(s.smallest(1).members(), &[1]);
        for m in 1..3 {
            assert!(s.smallest(m).is_subset(&s.smallest(m + 1)));
        }
    }

    #[test]
    fn threshold_is_monotone_in_eps() {
        let s = screening(&[0.99, 1.005, 1.02, 1.5, 3.0]);
        assert_eq!(s.threshold(0.01).members(), &[1, 2]);
        let mut prev = s.threshold(0.0);
        for eps in [0.001, 0.01, 0.05, 0.6, 5.0] {
            let cur = s.threshold(eps);
            assert!(prev.is_subset(&cur));
            prev = cur;
        }
        assert_eq!(s.threshold(f64::INFINITY).len(), 5);
        let mut with_failure = s.clone();
        with_failure.per_source[0] = None;
        assert!(!with_failure.threshold(f64::INFINITY).contains(1));
    }

    #[test]
    fn target_loss_ordering() {
        let tl = TargetLoss {
            test: ident_target(),
            surrogate: DVector::from_vec(vec![1.0, 2.0, 3.0]),
            full_n: 6,
        };
        assert_eq!(tl.loss(&CoefVector::from_slice(&[1.0, 2.0, 3.0])), 0.0);
        let near = CoefVector::from_slice(&[1.0, 2.0, 2.5]);
        let far = CoefVector::from_slice(&[0.5, 2.0, 2.0]);
        assert!(tl.loss(&near) < tl.loss(&far));
        assert_eq!(tl.loss(&near), tl.loss(&near.clone()));
    }

    fn study(rng: &mut ChaCha8Rng, n: usize, beta: &[f64]) -> Dataset {
        let p = beta.len();
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |i, _| {
            (0..p).map(|j| x[(i, j)] * beta[j]).sum::<f64>() + rng.sample::<f64, _>(StandardNormal)
        });
        Dataset::new(x, y).unwrap()
    }

    fn dcfg() -> DetectionConfig {
        DetectionConfig {
            transfer: TransferConfig { lambda0: Penalty::Fixed(0.02), execution: Execution::Sequential, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn screening_separates_close_and_far_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b0 = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let far = [1.0, -2.0, 3.0, 0.0, -2.0, 0.0];
        let target = study(&mut rng, 80, &b0);
        let sources = vec![study(&mut rng, 200, &b0), study(&mut rng, 200, &far)];
        let c = StudyCollection::new(target, sources, QuantileLevel::new(0.5).unwrap()).unwrap();
        let r = detect(&c, &dcfg()).unwrap();
        assert_eq!(r.detected.members(), &[1]);
        assert!(r.loss_per_source[1].unwrap() > r.loss_baseline);
        let (fit, rep) = fit_translasso(&c, &dcfg()).unwrap();
        assert_eq!(rep, r);
        assert_eq!(fit.set_used, r.detected);
        let auto = DetectionConfig { epsilon0: Epsilon::AutoCeps, ..dcfg() };
        let r = detect(&c, &auto).unwrap();
        let ce = r.c_eps.unwrap();
        assert_eq!(r.epsilon_used, Some(ce.min(0.01)));
        assert!(pseudo_detect(&c, 0, &dcfg()).is_err());
        assert_eq!(pseudo_detect(&c, 1, &dcfg()).unwrap().detected.members(), &[1]);
    }

    #[test]
    fn relabeling_sources_permutes_the_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b0 = [1.0, 0.5, 0.0, 0.0];
        let far = [-1.0, 2.0, 2.0, 0.0];
        let target = study(&mut rng, 60, &b0);
        let s1 = study(&mut rng, 150, &b0);
        let s2 = study(&mut rng, 150, &far);
        let tau = QuantileLevel::new(0.5).unwrap();
        let a = StudyCollection::new(target.clone(), vec![s1.clone(), s2.clone()], tau).unwrap();
        let b = StudyCollection::new(target, vec![s2, s1], tau).unwrap();
        let ra = detect(&a, &dcfg()).unwrap();
        let rb = detect(&b, &dcfg()).unwrap();
        let mapped: Vec<usize> = ra.detected.members().iter().map(|&k| 3 - k).collect();
        assert_eq!(InformativeSet::new(mapped).unwrap(), rb.detected);
    }

    #[test]
    fn no_sources_skips_detection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = StudyCollection::new(study(&mut rng, 30, &[1.0, 0.0]), vec![], QuantileLevel::new(0.5).unwrap())
            .unwrap();
        let (fit, rep) = fit_translasso(&c, &dcfg()).unwrap();
        assert!(rep.detected.is_empty());
        let oracle = crate::transfer::fit_oracle(&c, &InformativeSet::empty(), &dcfg().transfer).unwrap();
        assert_eq!(fit, oracle);
        assert!(detect(&c, &dcfg()).is_err());
    }
}
