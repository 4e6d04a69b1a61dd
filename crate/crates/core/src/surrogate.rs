//! Kernel density of the error at zero and surrogate responses.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CoefVector, Dataset, QuantileLevel};

/// Estimates below this are treated as unusable.
pub const DENSITY_FLOOR: f64 = 1e-4;

/// Coefficients of the polynomial kernel in powers `u^0, u^2, u^4, u^6`.
pub const KERNEL_G_COEFFS: [f64; 4] = [105.0 / 64.0, -525.0 / 64.0, 735.0 / 64.0, -315.0 / 64.0];

/// Compactly supported smoothing kernel.
#[derive(Debug, Clone, Copy)]
pub struct KernelSpec {
    pub evaluate: fn(f64) -> f64,
    pub support_radius: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec { evaluate: kernel_g, support_radius: 1.0 }
    }
}

/// `G(u) = -315/64 u^6 + 735/64 u^4 - 525/64 u^2 + 105/64` on `|u| < 1`.
pub fn kernel_g(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let u2 = u * u;
    let [c0, c2, c4, c6] = KERNEL_G_COEFFS;
    ((c6 * u2 + c4) * u2 + c2) * u2 + c0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthKind {
    /// `sqrt(s log n / n) + s^1.5 log n / (10 n)`
    OracleStep,
    /// The oracle rule on half of the full target size `n0`:
    /// `sqrt(s log(n0/2) / (n0/2)) + s^1.5 log(n0/2) / (5 n0)`.
    DetectionSplit,
    Fixed(f64),
}

/// Sparsity plugged into the bandwidth formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sparsity {
    Known(usize),
    /// Support size of the initial fit, at least 1.
    Estimated,
}

impl Sparsity {
    pub fn resolve(self, initial: &CoefVector) -> usize {
        match self {
            Sparsity::Known(s) => s.max(1),
            Sparsity::Estimated => initial.sparsity().max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandwidthRule {
    pub kind: BandwidthKind,
    pub sparsity: Sparsity,
}

impl Default for BandwidthRule {
    fn default() -> Self {
        BandwidthRule { kind: BandwidthKind::OracleStep, sparsity: Sparsity::Estimated }
    }
}

impl BandwidthRule {
    /// Same sparsity handling, detection-split formula.
    pub fn for_detection(self) -> Self {
        let kind = match self.kind {
            BandwidthKind::OracleStep => BandwidthKind::DetectionSplit,
            k => k,
        };
        BandwidthRule { kind, ..self }
    }
}

/// Bandwidth for sparsity `s` and sample size `n` (the full target size for
/// [`BandwidthKind::DetectionSplit`]).
pub fn bandwidth(kind: BandwidthKind, s: usize, n: usize) -> Result<f64> {
    let s = s as f64;
    let h = match kind {
        BandwidthKind::Fixed(h) => h,
        BandwidthKind::OracleStep => {
            if n < 2 {
                return Err(Error::InvalidSize(n));
            }
            let nf = n as f64;
            let l = nf.ln();
            (s * l / nf).sqrt() + s.powf(1.5) * l / (10.0 * nf)
        }
        BandwidthKind::DetectionSplit => {
            if n < 4 {
                return Err(Error::InvalidSize(n));
            }
            let half = n as f64 / 2.0;
            let l = half.ln();
            (s * l / half).sqrt() + s.powf(1.5) * l / (5.0 * n as f64)
        }
    };
    if h > 0.0 && h.is_finite() {
        Ok(h)
    } else {
        Err(Error::InvalidConfig(format!("bandwidth must be positive, got {h}")))
    }
}

/// Normalizing sample size of the density estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityNorm {
    /// `1 / (n h)` with `n` the rows used.
    Sample,
    /// `2 / (n0 h)` on one half of a split target of full size `n0`.
    HalfSplit { full_n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub f0: f64,
    pub bandwidth: f64,
    pub usable: bool,
}

impl DensityEstimate {
    pub fn new(f0: f64, bandwidth: f64) -> Self {
        DensityEstimate { f0, bandwidth, usable: f0 >= DENSITY_FLOOR && f0.is_finite() }
    }
}

/// Kernel estimate of the residual density at zero.
pub fn estimate_density_at_zero(
    d: &Dataset,
    beta_hat: &CoefVector,
    h: f64,
    kernel: &KernelSpec,
    norm: DensityNorm,
) -> DensityEstimate {
    let r = d.residuals(beta_hat);
    let total: f64 = r.iter().map(|&v| (kernel.evaluate)(v / h)).sum();
    let denom = match norm {
        DensityNorm::Sample => d.n() as f64,
        DensityNorm::HalfSplit { full_n } => full_n as f64 / 2.0,
    };
    DensityEstimate::new(total / (denom * h), h)
}

/// `y~_i = x_i'b - (1{y_i - x_i'b <= 0} - tau) / f0`.
///
/// An unusable density reports study 0; see [`Error::for_study`].
pub fn surrogate_responses(
    d: &Dataset,
    beta_hat: &CoefVector,
    f0: &DensityEstimate,
    tau: QuantileLevel,
) -> Result<DVector<f64>> {
    if !f0.usable {
        return Err(Error::DegenerateDensity { study: 0, f0: f0.f0 });
    }
    let fit = d.x() * beta_hat.as_dvector();
    let t = tau.value();
    Ok(DVector::from_fn(d.n(), |i, _| {
        let ind = if d.y()[i] - fit[i] <= 0.0 { 1.0 } else { 0.0 };
        fit[i] - (ind - t) / f0.f0
    }))
}
