//! Estimation and prediction metrics, detection accuracy and group-level
//! contribution summaries.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CoefVector, Dataset, InformativeSet, QuantileLevel};
use crate::solvers::pinball_loss;

/// Estimators compared by the replication harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TargetOnly,
    Oracle,
    Naive,
    Pseudo,
    TransLasso,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::TargetOnly, Method::Oracle, Method::Naive, Method::Pseudo, Method::TransLasso];

    pub fn name(self) -> &'static str {
        match self {
            Method::TargetOnly => "target_only",
            Method::Oracle => "oracle",
            Method::Naive => "naive",
            Method::Pseudo => "pseudo",
            Method::TransLasso => "trans_lasso",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown method '{s}'")))
    }
}

/// Metrics of one method on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: Method,
    pub mse_beta: f64,
    pub quantile_loss: f64,
    pub detected_set: Option<InformativeSet>,
    pub detection_exact: Option<bool>,
    pub jaccard: Option<f64>,
}

/// Squared l2 distance.
pub fn mse_beta(est: &CoefVector, truth: &CoefVector) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "estimate has {} coefficients, truth has {}",
            est.len(),
            truth.len()
        )));
    }
    Ok((est.as_dvector() - truth.as_dvector()).norm_squared())
}

/// Mean pinball loss of `est` on `holdout`.
pub fn oos_quantile_loss(holdout: &Dataset, est: &CoefVector, tau: QuantileLevel) -> Result<f64> {
    if holdout.n() == 0 {
        return Err(Error::EmptyDataset("holdout".into()));
    }
    if est.len() != holdout.p() {
        return Err(Error::DimensionMismatch(format!(
            "estimate has {} coefficients, holdout has {} columns",
            est.len(),
            holdout.p()
        )));
    }
    let r = holdout.residuals(est);
    Ok(r.iter().map(|&u| pinball_loss(u, tau)).sum::<f64>() / holdout.n() as f64)
}

/// Exact recovery flag and Jaccard index (1 when both sets are empty).
pub fn detection_accuracy(detected: &InformativeSet, truth: &InformativeSet) -> (bool, f64) {
    let inter = detected.members().iter().filter(|&&m| truth.contains(m)).count();
    let union = detected.len() + truth.len() - inter;
    let jaccard = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    (detected == truth, jaccard)
}

/// Category label of every feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMap {
    assignment: Vec<String>,
}

impl GroupMap {
    /// One label per feature; the length must equal `p`.
    pub fn new(assignment: Vec<String>, p: usize) -> Result<Self> {
        if assignment.len() < p {
            return Err(Error::MissingCategory(assignment.len()));
        }
        if assignment.len() > p {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {p} features",
                assignment.len()
            )));
        }
        if let Some(j) = assignment.iter().position(|s| s.trim().is_empty()) {
            return Err(Error::MissingCategory(j));
        }
        Ok(GroupMap { assignment })
    }

    pub fn label(&self, j: usize) -> &str {
        &self.assignment[j]
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Distinct labels in order of first appearance.
    pub fn categories(&self) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for s in &self.assignment {
            if !seen.contains(&s.as_str()) {
                seen.push(s);
            }
        }
        seen
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contributions {
    /// `(category, share)` in order of first appearance.
    pub shares: Vec<(String, f64)>,
    /// Set when every coefficient is zero and all shares are 0.
    pub zero_coefficient: bool,
}

/// Share of total absolute coefficient mass per category. Only meaningful
/// when the features are on a common scale.
pub fn group_contributions(est: &CoefVector, groups: &GroupMap) -> Result<Contributions> {
    if est.len() != groups.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} coefficients for {} labelled features",
            est.len(),
            groups.len()
        )));
    }
    let total = est.l1_norm();
    let shares = groups
        .categories()
        .into_iter()
        .map(|c| {
            let mass: f64 = (0..est.len()).filter(|&j| groups.label(j) == c).map(|j| est[j].abs()).sum();
            (c.to_string(), if total > 0.0 { mass / total } else { 0.0 })
        })
        .collect();
    Ok(Contributions { shares, zero_coefficient: total == 0.0 })
}

/// Column z-scoring with statistics from a training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    /// Constant columns keep unit scale.
    pub fn fit(train: &Dataset) -> Self {
        let n = train.n() as f64;
        let x = train.x();
        let mut mean = Vec::with_capacity(train.p());
        let mut sd = Vec::with_capacity(train.p());
        for col in x.column_iter() {
            let m = col.mean();
            let v = col.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            mean.push(m);
            sd.push(if v > 0.0 { v.sqrt() } else { 1.0 });
        }
        Standardizer { mean, sd }
    }

    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        if d.p() != self.mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "standardizer fitted on {} columns, data has {}",
                self.mean.len(),
                d.p()
            )));
        }
        let mut x = d.x().clone();
        for (j, mut col) in x.column_iter_mut().enumerate() {
            col.apply(|v| *v = (*v - self.mean[j]) / self.sd[j]);
        }
        Dataset::new(x, DVector::clone(d.y()))
    }
}
