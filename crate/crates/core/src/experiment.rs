//! Monte Carlo comparison of the estimators over simulated replications.
//!
//! Replication `r` draws its data, fold shuffle and detection split from
//! streams keyed by `(base_seed, r)`, so results do not depend on how
//! replications are scheduled across workers.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detection::{detect_from, screen_with, DetectionConfig, Epsilon, Screening};
use crate::error::{Error, Result};
use crate::evaluation::{detection_accuracy, mse_beta, oos_quantile_loss, Method};
use crate::exec::Execution;
use crate::model::{InformativeSet, StudyCollection};
use crate::simulation::{generate_replication, stream, DesignSpec, ErrorCase, GroundTruth, Purpose};
use crate::surrogate::Sparsity;
use crate::transfer::{Prepared, TransferConfig, TransferFit};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub design: DesignSpec,
    pub methods: Vec<Method>,
    pub replications: usize,
    /// Seeds every replication; overrides `design.seed`.
    pub base_seed: u64,
    pub output_path: Option<String>,
    pub epsilon0: Epsilon,
    /// Plug the true target sparsity into the bandwidth rule.
    pub known_sparsity: bool,
    pub transfer: TransferConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            design: DesignSpec::default(),
            methods: Method::ALL.to_vec(),
            replications: 20,
            base_seed: 0,
            output_path: None,
            epsilon0: Epsilon::Auto,
            known_sparsity: true,
            transfer: TransferConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidConfig("replications must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("no methods requested".into()));
        }
        let mut m = self.methods.clone();
        m.sort();
        if m.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("duplicate method".into()));
        }
        if let Epsilon::Fixed(e) = self.epsilon0 {
            if !(e.is_finite() && e > 0.0) {
                return Err(Error::InvalidConfig(format!("epsilon0 must be positive, got {e}")));
            }
        }
        self.seeded_design().validate()
    }

    /// The design with `base_seed` applied.
    pub fn seeded_design(&self) -> DesignSpec {
        DesignSpec { seed: self.base_seed, ..self.design.clone() }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn sha256(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub d: f64,
    pub num_informative: usize,
    pub eta: f64,
    pub error_case: ErrorCase,
    pub replication: u64,
    pub mse_beta: f64,
    pub quantile_loss: f64,
    pub detection_exact: Option<bool>,
    pub jaccard: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationOutcome {
    pub rows: Vec<ResultRow>,
    pub warnings: Vec<String>,
}

fn replication_config(spec: &ExperimentSpec, r: u64) -> DetectionConfig {
    let mut transfer = spec.transfer.clone();
    transfer.execution = Execution::Sequential;
    transfer.cv.seed = stream(spec.base_seed, r, 0, Purpose::Folds).random();
    if spec.known_sparsity {
        transfer.bandwidth.sparsity = Sparsity::Known(spec.design.s0);
    }
    DetectionConfig {
        epsilon0: spec.epsilon0,
        split_seed: stream(spec.base_seed, r, 0, Purpose::Split).random(),
        transfer,
    }
}

struct Fitted {
    fit: TransferFit,
    detected: Option<InformativeSet>,
}

fn fit_method(
    m: Method,
    c: &StudyCollection,
    truth: &GroundTruth,
    prep: &Prepared,
    dcfg: &DetectionConfig,
    screening: &mut Option<Screening>,
) -> Result<Fitted> {
    let plain = |fit| Ok(Fitted { fit, detected: None });
    match m {
        Method::TargetOnly => plain(prep.target_only()?),
        Method::Oracle => plain(prep.fit(&truth.informative)?),
        Method::Naive => plain(prep.fit(&InformativeSet::full(c.k()))?),
        Method::Pseudo | Method::TransLasso => {
            let detected = if c.k() == 0 || (m == Method::Pseudo && truth.informative.is_empty()) {
                InformativeSet::empty()
            } else {
                if screening.is_none() {
                    *screening = Some(screen_with(c, dcfg, Some(prep))?);
                }
                let s = screening.as_ref().expect("screening was just computed");
                if m == Method::Pseudo {
                    s.smallest(truth.informative.len())
                } else {
                    detect_from(c, s, dcfg.epsilon0, &dcfg.transfer, Some(prep))?.detected
                }
            };
            Ok(Fitted { fit: prep.fit(&detected)?, detected: Some(detected) })
        }
    }
}

/// Simulates replication `r` and scores every requested method on it.
///
/// Numerical failures of a single method yield a row of NaN metrics and a
/// warning; other errors abort.
pub fn run_replication(spec: &ExperimentSpec, r: u64) -> Result<ReplicationOutcome> {
    let design = spec.seeded_design();
    let (c, truth, holdout) = generate_replication(&design, r)?;
    let dcfg = replication_config(spec, r);
    let prep = Prepared::new(&c, &dcfg.transfer)?;
    let mut screening = None;
    let mut rows = Vec::with_capacity(spec.methods.len());
    let mut warnings = Vec::new();
    for &m in &spec.methods {
        let mut row = ResultRow {
            method: m,
            d: design.d,
            num_informative: design.num_informative,
            eta: design.eta,
            error_case: design.error_case,
            replication: r,
            mse_beta: f64::NAN,
            quantile_loss: f64::NAN,
            detection_exact: None,
            jaccard: None,
        };
        match fit_method(m, &c, &truth, &prep, &dcfg, &mut screening) {
            Ok(f) => {
                row.mse_beta = mse_beta(&f.fit.beta_hat, &truth.beta[0])?;
                row.quantile_loss = oos_quantile_loss(&holdout, &f.fit.beta_hat, c.tau)?;
                if let Some(a) = &f.detected {
                    let (exact, jac) = detection_accuracy(a, &truth.informative);
                    row.detection_exact = Some(exact);
                    row.jaccard = Some(jac);
                }
                if !f.fit.converged {
                    warnings.push(format!("replication {r}, {m}: solver did not converge"));
                }
            }
            Err(e) if e.is_numerical() => warnings.push(format!("replication {r}, {m}: {e}")),
            Err(e) => return Err(e),
        }
        rows.push(row);
    }
    if let Some(s) = &screening {
        warnings.extend(s.warnings.iter().map(|w| format!("replication {r}: {w}")));
    }
    Ok(ReplicationOutcome { rows, warnings })
}

/// Runs every replication; `progress` is called as each one finishes.
pub fn run_experiment<F>(spec: &ExperimentSpec, exec: Execution, progress: F) -> Result<ReplicationOutcome>
where
    F: Fn(u64) + Sync + Send,
{
    spec.validate()?;
    let outs = exec.map_range(spec.replications, |r| {
        let out = run_replication(spec, r as u64);
        progress(r as u64);
        out
    });
    let mut all = ReplicationOutcome { rows: Vec::new(), warnings: Vec::new() };
    for o in outs {
        let o = o?;
        all.rows.extend(o.rows);
        all.warnings.extend(o.warnings);
    }
    Ok(all)
}

fn provenance(spec: &ExperimentSpec) -> String {
    format!("# tlqr {TOOL_VERSION} spec_sha256={}", spec.sha256())
}

/// Results table preceded by a `#` provenance line.
pub fn write_results_csv<W: Write>(mut w: W, spec: &ExperimentSpec, rows: &[ResultRow]) -> Result<()> {
    let io = |e: std::io::Error| Error::Io(e.to_string());
    writeln!(w, "{}", provenance(spec)).map_err(io)?;
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    wtr.flush().map_err(io)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub failed: usize,
    pub mse_mean: f64,
    pub mse_sd: f64,
    pub quantile_loss_mean: f64,
    pub quantile_loss_sd: f64,
    /// `"mean (sd)"` to two decimals.
    pub mse: String,
    pub quantile_loss: String,
    pub detection_rate: Option<f64>,
    pub mean_jaccard: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub tool_version: String,
    pub spec_sha256: String,
    pub design: DesignSpec,
    pub replications: usize,
    pub methods: Vec<MethodSummary>,
}

/// Mean and sample standard deviation of the finite values.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let f: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if f.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = f.len() as f64;
    let m = f.iter().sum::<f64>() / n;
    let sd = if f.len() > 1 { (f.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (m, sd)
}

pub fn format_mean_sd(m: f64, sd: f64) -> String {
    format!("{m:.2} ({sd:.2})")
}

pub fn summarize(spec: &ExperimentSpec, rows: &[ResultRow]) -> Summary {
    let methods = spec
        .methods
        .iter()
        .map(|&m| {
            let mine: Vec<&ResultRow> = rows.iter().filter(|r| r.method == m).collect();
            let mse: Vec<f64> = mine.iter().map(|r| r.mse_beta).collect();
            let ql: Vec<f64> = mine.iter().map(|r| r.quantile_loss).collect();
            let (mse_mean, mse_sd) = mean_sd(&mse);
            let (ql_mean, ql_sd) = mean_sd(&ql);
            let exact: Vec<f64> = mine.iter().filter_map(|r| r.detection_exact).map(|b| f64::from(u8::from(b))).collect();
            let jac: Vec<f64> = mine.iter().filter_map(|r| r.jaccard).collect();
            let avg = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            MethodSummary {
                method: m,
                runs: mine.len(),
                failed: mse.iter().filter(|x| !x.is_finite()).count(),
                mse_mean,
                mse_sd,
                quantile_loss_mean: ql_mean,
                quantile_loss_sd: ql_sd,
                mse: format_mean_sd(mse_mean, mse_sd),
                quantile_loss: format_mean_sd(ql_mean, ql_sd),
                detection_rate: avg(&exact),
                mean_jaccard: avg(&jac),
            }
        })
        .collect();
    Summary {
        tool_version: TOOL_VERSION.to_string(),
        spec_sha256: spec.sha256(),
        design: spec.seeded_design(),
        replications: spec.replications,
        methods,
    }
}
