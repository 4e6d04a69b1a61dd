use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tlqr::detection::{fit_pseudo, fit_translasso, DetectionConfig, DetectionReport, Epsilon};
use tlqr::error::Error;
use tlqr::evaluation::{group_contributions, Standardizer};
use tlqr::exec::{with_workers, Execution};
use tlqr::experiment::{run_experiment, summarize, write_results_csv, ExperimentSpec, TOOL_VERSION};
use tlqr::io::{read_dataset_from, read_groups, write_dataset};
use tlqr::model::{CoefVector, Dataset, InformativeSet, QuantileLevel, StudyCollection};
use tlqr::simulation::{generate_replication, GroundTruth};
use tlqr::surrogate::DensityEstimate;
use tlqr::transfer::{fit_naive, fit_oracle, fit_target_only, Lambdas, TransferFit};

use crate::{ContribArgs, ExperimentArgs, FitArgs, MethodArg, SimulateArgs};

/// A message and the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub const USAGE: u8 = 1;
    pub const DATA: u8 = 2;
    pub const NUMERICAL: u8 = 3;

    fn usage(message: impl Into<String>) -> Self {
        Failure { code: Self::USAGE, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure { code: Self::DATA, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() {
            Failure::NUMERICAL
        } else {
            match e {
                Error::InvalidConfig(_)
                | Error::InvalidQuantile(_)
                | Error::InvalidM { .. }
                | Error::InvalidMember(_)
                | Error::EmptyGrid
                | Error::BandTooWide { .. } => Failure::USAGE,
                _ => Failure::DATA,
            }
        };
        Failure { code, message: e.to_string() }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read_text(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let f = File::create(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Failure::data(e.to_string()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))
}

fn read_spec(path: &Path) -> Outcome<ExperimentSpec> {
    let spec: ExperimentSpec = serde_json::from_str(&read_text(path)?)
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

/// Fitted model document written by `fit` and read by `contrib`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelDocument {
    pub tool_version: String,
    /// Hash of the resolved settings and the input files.
    pub input_sha256: String,
    pub method: String,
    pub tau: f64,
    pub beta_hat: CoefVector,
    pub set_used: InformativeSet,
    pub lambdas: Lambdas,
    pub initial_lambda0: Vec<Option<f64>>,
    pub densities: Vec<Option<DensityEstimate>>,
    pub converged: bool,
    pub detection: Option<DetectionReport>,
    pub standardizer: Option<Standardizer>,
    pub settings: DetectionConfig,
}

fn method_name(m: MethodArg) -> &'static str {
    match m {
        MethodArg::TargetOnly => "target-only",
        MethodArg::Oracle => "oracle",
        MethodArg::Naive => "naive",
        MethodArg::Pseudo => "pseudo",
        MethodArg::Translasso => "translasso",
    }
}

fn fit_settings(a: &FitArgs) -> Outcome<DetectionConfig> {
    let mut cfg = match &a.config {
        Some(path) => serde_json::from_str(&read_text(path)?)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?,
        None => DetectionConfig::default(),
    };
    if let Some(e) = &a.epsilon0 {
        cfg.epsilon0 = e.parse::<Epsilon>()?;
    }
    if let Some(seed) = a.seed {
        cfg.split_seed = seed;
        cfg.transfer.cv.seed = seed;
    }
    cfg.transfer.execution = Execution::Parallel;
    Ok(cfg)
}

pub fn fit(a: &FitArgs) -> Outcome {
    let tau = QuantileLevel::new(a.tau)?;
    let cfg = fit_settings(a)?;
    if a.method == MethodArg::Oracle && a.informative.is_none() {
        return Err(Failure::usage("--method oracle requires --informative"));
    }
    if a.method == MethodArg::Pseudo && a.m.is_none() {
        return Err(Failure::usage("--method pseudo requires --m"));
    }

    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&cfg).expect("settings serialize"));
    hasher.update(format!("{}|{}|{:?}|{:?}|{}", method_name(a.method), a.tau, a.informative, a.m, a.standardize));
    let mut read = |path: &Path| -> Outcome<Dataset> {
        let bytes = fs::read(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        hasher.update(&bytes);
        Ok(read_dataset_from(bytes.as_slice(), &path.display().to_string())?)
    };
    let mut target = read(&a.target)?;
    let mut sources = a.sources.iter().map(|p| read(p)).collect::<Outcome<Vec<_>>>()?;
    let input_sha256 = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();

    let standardizer = a.standardize.then(|| Standardizer::fit(&target));
    if let Some(s) = &standardizer {
        target = s.apply(&target)?;
        sources = sources.iter().map(|d| s.apply(d)).collect::<tlqr::error::Result<_>>()?;
    }
    let c = StudyCollection::new(target, sources, tau)?;

    let (fit, detection): (TransferFit, Option<DetectionReport>) = match a.method {
        MethodArg::TargetOnly => (fit_target_only(&c, &cfg.transfer)?, None),
        MethodArg::Naive => (fit_naive(&c, &cfg.transfer)?, None),
        MethodArg::Oracle => {
            let set = InformativeSet::new(a.informative.clone().unwrap_or_default())?;
            (fit_oracle(&c, &set, &cfg.transfer)?, None)
        }
        MethodArg::Pseudo => {
            let (f, r) = fit_pseudo(&c, a.m.unwrap_or(0), &cfg)?;
            (f, Some(r))
        }
        MethodArg::Translasso => {
            let (f, r) = fit_translasso(&c, &cfg)?;
            (f, Some(r))
        }
    };
    if let Some(r) = &detection {
        for w in &r.warnings {
            eprintln!("warning: {w}");
        }
    }
    if !fit.converged {
        eprintln!("warning: a solver stopped at its iteration limit");
    }

    let doc = ModelDocument {
        tool_version: TOOL_VERSION.to_string(),
        input_sha256,
        method: method_name(a.method).to_string(),
        tau: tau.value(),
        beta_hat: fit.beta_hat,
        set_used: fit.set_used,
        lambdas: fit.lambdas,
        initial_lambda0: fit.initial_lambda0,
        densities: fit.densities,
        converged: fit.converged,
        detection,
        standardizer,
        settings: cfg,
    };
    write_json(&a.out, &doc)
}

pub fn experiment(a: &ExperimentArgs) -> Outcome {
    let spec = read_spec(&a.spec)?;
    if a.jobs == Some(0) {
        return Err(Failure::usage("--jobs must be at least 1"));
    }
    create_dir(&a.out)?;
    let total = spec.replications;
    let done = AtomicUsize::new(0);
    let outcome = with_workers(a.jobs, || {
        run_experiment(&spec, Execution::Parallel, |r| {
            let n = done.fetch_add(1, Ordering::SeqCst) + 1;
            eprintln!("replication {r} finished ({n}/{total})");
        })
    })?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }

    let csv_path = a.out.join("results.csv");
    let f = File::create(&csv_path).map_err(|e| Failure::data(format!("{}: {e}", csv_path.display())))?;
    write_results_csv(BufWriter::new(f), &spec, &outcome.rows)?;

    let summary = summarize(&spec, &outcome.rows);
    for m in &summary.methods {
        eprintln!("{:<12} mse {}  quantile loss {}", m.method.name(), m.mse, m.quantile_loss);
    }
    write_json(&a.out.join("summary.json"), &summary)
}

#[derive(Serialize)]
struct TruthDocument<'a> {
    tool_version: &'a str,
    spec_sha256: String,
    replication: u64,
    truth: &'a GroundTruth,
}

pub fn simulate(a: &SimulateArgs) -> Outcome {
    let spec = read_spec(&a.spec)?;
    let (c, truth, holdout) = generate_replication(&spec.seeded_design(), a.replication)?;
    create_dir(&a.out)?;
    write_dataset(&a.out.join("target.csv"), &c.target)?;
    for (k, s) in c.sources.iter().enumerate() {
        write_dataset(&a.out.join(format!("source_{}.csv", k + 1)), s)?;
    }
    write_dataset(&a.out.join("holdout.csv"), &holdout)?;
    let doc = TruthDocument {
        tool_version: TOOL_VERSION,
        spec_sha256: spec.sha256(),
        replication: a.replication,
        truth: &truth,
    };
    write_json(&a.out.join("truth.json"), &doc)
}

#[derive(Deserialize)]
struct ModelCoefficients {
    beta_hat: CoefVector,
}

#[derive(Serialize)]
struct Share {
    category: String,
    share: f64,
}

#[derive(Serialize)]
struct ContribDocument {
    tool_version: &'static str,
    model_sha256: String,
    contributions: Vec<Share>,
    #[serde(skip_serializing_if = "Option::is_none")]
    warning: Option<String>,
}

pub fn contrib(a: &ContribArgs) -> Outcome {
    let text = read_text(&a.model)?;
    let model: ModelCoefficients =
        serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", a.model.display())))?;
    let groups = read_groups(&a.groups, model.beta_hat.len())?;
    let c = group_contributions(&model.beta_hat, &groups)?;
    let warning = c.zero_coefficient.then(|| "all coefficients are zero; shares are reported as 0".to_string());
    if let Some(w) = &warning {
        eprintln!("warning: {w}");
    }
    let doc = ContribDocument {
        tool_version: TOOL_VERSION,
        model_sha256: sha256_hex(text.as_bytes()),
        contributions: c.shares.into_iter().map(|(category, share)| Share { category, share }).collect(),
        warning,
    };
    write_json(&a.out, &doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(Failure::from(Error::InvalidQuantile(2.0)).code, Failure::USAGE);
        assert_eq!(Failure::from(Error::Parse("x".into())).code, Failure::DATA);
        assert_eq!(Failure::from(Error::MissingCategory(3)).code, Failure::DATA);
        assert_eq!(Failure::from(Error::ZeroBaselineLoss).code, Failure::NUMERICAL);
        assert_eq!(Failure::from(Error::DegenerateDensity { study: 1, f0: 0.0 }).code, Failure::NUMERICAL);
    }
}
