//! Domain types shared by every stage of the pipeline.
//!
//! Studies are indexed with the target at 0 and sources at `1..=K`. Models
//! carry no intercept; add a constant column to the design if one is wanted.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Design matrix and response of one study.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let d = Dataset { x, y };
        d.validate("dataset")?;
        Ok(d)
    }

    /// Builds a dataset from row-major records.
    pub fn from_rows(rows: &[Vec<f64>], y: Vec<f64>) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
        Dataset::new(x, DVector::from_vec(y))
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.x.nrows() != self.y.len() {
            return Err(Error::DimensionMismatch(format!(
                "{what}: X has {} rows but y has {} entries",
                self.x.nrows(),
                self.y.len()
            )));
        }
        if self.x.nrows() == 0 || self.x.ncols() == 0 {
            return Err(Error::EmptyDataset(what.to_string()));
        }
        if self.x.iter().chain(self.y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(())
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Rows selected by `idx`, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        let x = self.x.select_rows(idx);
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i]));
        Dataset { x, y }
    }

    /// Residuals `y - X beta`.
    pub fn residuals(&self, beta: &CoefVector) -> DVector<f64> {
        &self.y - &self.x * beta.as_dvector()
    }
}

/// Quantile level `tau` in the open unit interval.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct QuantileLevel(f64);

impl QuantileLevel {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau < 1.0 {
            Ok(QuantileLevel(tau))
        } else {
            Err(Error::InvalidQuantile(tau))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for QuantileLevel {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        QuantileLevel::new(v)
    }
}

impl From<QuantileLevel> for f64 {
    fn from(q: QuantileLevel) -> f64 {
        q.0
    }
}

/// Target study plus `K` sources sharing the feature dimension.
#[derive(Debug, Clone)]
pub struct StudyCollection {
    pub target: Dataset,
    pub sources: Vec<Dataset>,
    pub tau: QuantileLevel,
}

impl StudyCollection {
    pub fn new(target: Dataset, sources: Vec<Dataset>, tau: QuantileLevel) -> Result<Self> {
        let c = StudyCollection { target, sources, tau };
        validate_collection(&c)?;
        Ok(c)
    }

    pub fn k(&self) -> usize {
        self.sources.len()
    }

    pub fn p(&self) -> usize {
        self.target.p()
    }

    /// Study by index: 0 is the target, `k >= 1` is source `k`.
    pub fn study(&self, k: usize) -> &Dataset {
        if k == 0 {
            &self.target
        } else {
            &self.sources[k - 1]
        }
    }
}

/// Checks every dataset invariant and that all studies share `p`.
pub fn validate_collection(c: &StudyCollection) -> Result<()> {
    c.target.validate("target")?;
    let p = c.target.p();
    for (i, s) in c.sources.iter().enumerate() {
        s.validate(&format!("source {}", i + 1))?;
        if s.p() != p {
            return Err(Error::DimensionMismatch(format!(
                "source {} has {} features, target has {p}",
                i + 1,
                s.p()
            )));
        }
    }
    Ok(())
}

/// A coefficient estimate. Sparsity is defined by exact zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<f64>", into = "Vec<f64>")]
pub struct CoefVector(DVector<f64>);

impl CoefVector {
    pub fn new(beta: DVector<f64>) -> Self {
        CoefVector(beta)
    }

    pub fn zeros(p: usize) -> Self {
        CoefVector(DVector::zeros(p))
    }

    pub fn from_slice(v: &[f64]) -> Self {
        CoefVector(DVector::from_column_slice(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_dvector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn into_dvector(self) -> DVector<f64> {
        self.0
    }

    pub fn support(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, v)| v.abs() > 0.0)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn sparsity(&self) -> usize {
        self.0.iter().filter(|v| v.abs() > 0.0).count()
    }

    /// Sets entries with magnitude below `threshold` to exactly zero.
    pub fn hard_zero(mut self, threshold: f64) -> Self {
        for v in self.0.iter_mut() {
            if v.abs() < threshold {
                *v = 0.0;
            }
        }
        self
    }

    pub fn l1_norm(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }
}

impl From<Vec<f64>> for CoefVector {
    fn from(v: Vec<f64>) -> Self {
        CoefVector(DVector::from_vec(v))
    }
}

impl From<CoefVector> for Vec<f64> {
    fn from(c: CoefVector) -> Vec<f64> {
        c.0.as_slice().to_vec()
    }
}

impl std::ops::Index<usize> for CoefVector {
    type Output = f64;
    fn index(&self, j: usize) -> &f64 {
        &self.0[j]
    }
}

/// `sum_j |a_j - b_j|`.
pub fn l1_distance(a: &CoefVector, b: &CoefVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "coefficient lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.0.iter().zip(b.0.iter()).map(|(x, y)| (x - y).abs()).sum())
}

/// A set of source indices in `1..=K`, stored sorted and without duplicates.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct InformativeSet(Vec<usize>);

impl InformativeSet {
    pub fn empty() -> Self {
        InformativeSet(Vec::new())
    }

    /// All sources `1..=k`.
    pub fn full(k: usize) -> Self {
        InformativeSet((1..=k).collect())
    }

    /// Rejects duplicates and the target index 0.
    pub fn new(mut members: Vec<usize>) -> Result<Self> {
        members.sort_unstable();
        if let Some(w) = members.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig(format!("duplicate source {}", w[0])));
        }
        if members.first() == Some(&0) {
            return Err(Error::InvalidMember(0));
        }
        Ok(InformativeSet(members))
    }

    /// Checks membership in `1..=k`.
    pub fn check_within(&self, k: usize) -> Result<()> {
        match self.0.iter().find(|&&m| m > k) {
            Some(&m) => Err(Error::InvalidMember(m)),
            None => Ok(()),
        }
    }

    pub fn members(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, k: usize) -> bool {
        self.0.binary_search(&k).is_ok()
    }

    pub fn is_subset(&self, other: &InformativeSet) -> bool {
        self.0.iter().all(|&m| other.contains(m))
    }
}

impl TryFrom<Vec<usize>> for InformativeSet {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        InformativeSet::new(v)
    }
}

impl From<InformativeSet> for Vec<usize> {
    fn from(s: InformativeSet) -> Vec<usize> {
        s.0
    }
}
