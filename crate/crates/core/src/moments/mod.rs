//! Density → moments, with the polynomial bias adjustment.
//!
//! The density is treated as piecewise linear between the dense grid
//! points, so every moment integral is a polynomial integral evaluated in
//! closed form. Tail masses enter as point masses at the support bounds,
//! and the non-central moments are divided by the total mass (interior
//! integral plus both tail masses), so the normalised measure sums to one.

pub mod nct;
mod refit;
mod table;

pub use refit::{refit_adjustment, RefitReport, RefitSpec};
pub use table::{analytic_row, reproduce_table, table_distributions, write_table, Analytic, TableRow, ANALYTIC_SCALE};

use crate::density::{fit_pdf, DensityApprox, DensityOptions, QuantileGrid};
use crate::error::{Error, Result};

/// Moments of one forecast distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentSet {
    /// Total mass before normalisation: interior integral plus tail masses.
    pub m0: f64,
    /// Normalised non-central moments `E[X^k]`, `k = 1..4`.
    pub raw: [f64; 4],
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    /// Non-excess kurtosis.
    pub kurtosis: f64,
    pub adjusted: Option<AdjustedMoments>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjustedMoments {
    pub variance: f64,
    pub skewness: f64,
    pub kurtosis: f64,
}

/// Coefficients of the quadratic bias correction.
///
/// With `k_e = k - 3`:
/// `ṽ = v (c0 + c1 s + c2 k_e)`,
/// `s̃ = d0 s + d1 s² + d2 k_e`,
/// `k̃ = 3 + e0 k_e + e1 k_e² + e2 s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjustmentCoefficients {
    pub variance: [f64; 3],
    pub skewness: [f64; 3],
    pub kurtosis: [f64; 3],
}

impl Default for AdjustmentCoefficients {
    fn default() -> Self {
        Self {
            variance: [1.0023, -0.0021, 0.0022],
            skewness: [0.9950, 0.0261, 0.0107],
            kurtosis: [1.4185, 0.0466, -0.7395],
        }
    }
}

/// Lower bound applied to the adjusted kurtosis.
pub const MIN_ADJUSTED_KURTOSIS: f64 = 1.0;

impl AdjustmentCoefficients {
    pub fn apply(&self, v: f64, s: f64, k: f64) -> AdjustedMoments {
        let ke = k - 3.0;
        let [c0, c1, c2] = self.variance;
        let [d0, d1, d2] = self.skewness;
        let [e0, e1, e2] = self.kurtosis;
        AdjustedMoments {
            variance: v * (c0 + c1 * s + c2 * ke),
            skewness: d0 * s + d1 * s * s + d2 * ke,
            kurtosis: (3.0 + e0 * ke + e1 * ke * ke + e2 * s).max(MIN_ADJUSTED_KURTOSIS),
        }
    }
}

/// Bias-adjusted variance, skewness and kurtosis with the default
/// coefficients.
pub fn adjust_moments(v: f64, s: f64, k: f64) -> Result<AdjustedMoments> {
    if !(v > 0.0) {
        return Err(Error::Input(format!("variance must be positive, got {v}")));
    }
    Ok(AdjustmentCoefficients::default().apply(v, s, k))
}

impl MomentSet {
    /// Central moments from normalised non-central ones.
    pub fn from_raw(m0: f64, raw: [f64; 4]) -> Result<Self> {
        let [m1, m2, m3, m4] = raw;
        let var = m2 - m1 * m1;
        if !(var > 0.0) || !var.is_finite() {
            return Err(Error::Degenerate(format!("non-positive variance {var}")));
        }
        let skewness = (m3 - 3.0 * m1 * var - m1.powi(3)) / var.powf(1.5);
        let kurtosis = (m4 - 4.0 * m1 * m3 + 6.0 * m1 * m1 * m2 - 3.0 * m1.powi(4)) / (var * var);
        Ok(Self {
            m0,
            raw,
            mean: m1,
            variance: var,
            skewness,
            kurtosis,
            adjusted: None,
        })
    }

    pub fn with_adjustment(mut self, coefs: &AdjustmentCoefficients) -> Self {
        self.adjusted = Some(coefs.apply(self.variance, self.skewness, self.kurtosis));
        self
    }
}

/// `(b^n - a^n) / n` without forming the two powers separately.
fn power_diff(a: f64, b: f64, n: i32) -> f64 {
    // b^n - a^n = (b - a) Σ_{j<n} b^(n-1-j) a^j
    let mut sum = 0.0;
    let mut term = b.powi(n - 1);
    let ratio_ok = b != 0.0;
    if ratio_ok {
        let r = a / b;
        for _ in 0..n {
            sum += term;
            term *= r;
        }
    } else {
        sum = a.powi(n - 1);
    }
    (b - a) * sum / n as f64
}

/// Integrals `∫ x^k d(x) dx`, `k = 0..4`, of the piecewise-linear density
/// through `(x, d)`.
pub fn piecewise_linear_moments(x: &[f64], d: &[f64]) -> [f64; 5] {
    let mut m = [0.0; 5];
    for i in 0..x.len().saturating_sub(1) {
        let (x1, x2, y1, y2) = (x[i], x[i + 1], d[i], d[i + 1]);
        let b = (y2 - y1) / (x2 - x1);
        let a = y1 - b * x1;
        for (k, mk) in m.iter_mut().enumerate() {
            let k = k as i32;
            *mk += a * power_diff(x1, x2, k + 1) + b * power_diff(x1, x2, k + 2);
        }
    }
    m
}

/// Moments of a density approximation. The adjusted block is filled in
/// with the default coefficients.
pub fn integrate_moments(d: &DensityApprox) -> Result<MomentSet> {
    if d.x.len() < 2 || d.x.len() != d.density.len() {
        return Err(Error::Input("density needs at least two grid points".into()));
    }
    let m = piecewise_linear_moments(&d.x, &d.density);
    let m0 = m[0] + d.p_lower + d.p_upper;
    if !(m0 > 0.0) {
        return Err(Error::Degenerate(format!("interior mass {m0}")));
    }
    let mut raw = [0.0; 4];
    for k in 1..=4 {
        let tails = d.p_lower * d.x_min.powi(k as i32) + d.p_upper * d.x_max.powi(k as i32);
        raw[k - 1] = (m[k] + tails) / m0;
    }
    Ok(MomentSet::from_raw(m0, raw)?.with_adjustment(&AdjustmentCoefficients::default()))
}

/// Quantile grid straight to moments.
pub fn moments_from_quantiles(g: &QuantileGrid, opts: &DensityOptions) -> Result<(DensityApprox, MomentSet)> {
    let d = fit_pdf(g, opts)?;
    let m = integrate_moments(&d)?;
    Ok((d, m))
}

#[cfg(test)]
mod tests;
