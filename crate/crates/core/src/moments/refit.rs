//! Monte Carlo refit of the moment bias correction.
//!
//! Non-central t distributions with random degrees of freedom and
//! non-centrality are pushed through the quantile → density → moments
//! pipeline; exact moments are then regressed on the pipeline's output in
//! the same functional form as [`AdjustmentCoefficients`].

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;

use super::nct::NonCentralT;
use super::{integrate_moments, AdjustmentCoefficients};
use crate::density::{fit_pdf, DensityOptions, QuantileGrid};
use crate::error::{Error, Result};
use crate::taus::TauGrid;

#[derive(Debug, Clone)]
pub struct RefitSpec {
    /// Number of generated distributions (before the kurtosis filter).
    pub n: usize,
    pub seed: u64,
    /// Degrees of freedom, drawn with equal probability.
    pub dfs: Vec<f64>,
    /// Uniform range of the non-centrality parameter.
    pub nc_range: (f64, f64),
    pub scale: f64,
    /// Distributions with larger exact kurtosis are dropped.
    pub max_kurtosis: f64,
    pub taus: TauGrid,
}

impl Default for RefitSpec {
    fn default() -> Self {
        let mut dfs: Vec<f64> = (5..=20).map(f64::from).collect();
        dfs.extend([30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0, 1000.0, 10000.0]);
        Self {
            n: 100_000,
            seed: 0,
            dfs,
            nc_range: (-0.5, 5.0),
            scale: 0.1,
            max_kurtosis: 20.0,
            taus: TauGrid::standard(),
        }
    }
}

/// One regression's fit statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionFit {
    pub coefficients: [f64; 3],
    pub r_squared: f64,
    /// 2-norm condition number of the design matrix.
    pub condition: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefitReport {
    pub coefficients: AdjustmentCoefficients,
    pub variance: RegressionFit,
    pub skewness: RegressionFit,
    pub kurtosis: RegressionFit,
    /// Distributions kept after the kurtosis filter and pipeline failures.
    pub used: usize,
    pub discarded: usize,
}

/// One simulated distribution: exact and pipeline (v, s, k).
#[derive(Debug, Clone, Copy)]
struct Sample {
    exact: [f64; 3],
    naive: [f64; 3],
}

fn simulate_one(df: f64, nc: f64, spec: &RefitSpec, max_k: f64) -> Option<Sample> {
    let dist = NonCentralT::new(df, nc, spec.scale).ok()?;
    let m = dist.moments().ok()?;
    if m.kurtosis > max_k {
        return None;
    }
    let q = dist.quantiles(spec.taus.levels()).ok()?;
    let grid = QuantileGrid::new(spec.taus.levels().to_vec(), q).ok()?;
    let density = fit_pdf(&grid, &DensityOptions::default()).ok()?;
    let naive = integrate_moments(&density).ok()?;
    Some(Sample {
        exact: [m.variance, m.skewness, m.kurtosis],
        naive: [naive.variance, naive.skewness, naive.kurtosis],
    })
}

fn ols(rows: &[[f64; 3]], y: &[f64]) -> Result<RegressionFit> {
    let n = rows.len();
    let x = DMatrix::from_fn(n, 3, |i, j| rows[i][j]);
    let yv = DVector::from_column_slice(y);
    let svd = x.clone().svd(true, true);
    let sv = &svd.singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition < 1e12) {
        return Err(Error::Degenerate(format!(
            "design matrix condition number {condition:.3e}"
        )));
    }
    let beta = svd
        .solve(&yv, 1e-14 * smax)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let resid = &yv - &x * &beta;
    let ybar = yv.mean();
    let tss: f64 = yv.iter().map(|v| (v - ybar).powi(2)).sum();
    let r_squared = 1.0 - resid.norm_squared() / tss;
    Ok(RegressionFit {
        coefficients: [beta[0], beta[1], beta[2]],
        r_squared,
        condition,
    })
}

/// Runs the Monte Carlo and fits the three regressions.
///
/// Variance: `v_t / v` on `(1, s, k_e)`; skewness: `s_t` on `(s, s², k_e)`;
/// kurtosis: `k_t − 3` on `(k_e, k_e², s)`, all by least squares.
pub fn refit_adjustment(spec: &RefitSpec) -> Result<RefitReport> {
    if spec.dfs.is_empty() || spec.n == 0 {
        return Err(Error::Input("refit needs at least one distribution and one df".into()));
    }
    let mut rng = crate::seeded(spec.seed);
    let params: Vec<(f64, f64)> = (0..spec.n)
        .map(|_| {
            let df = spec.dfs[rng.random_range(0..spec.dfs.len())];
            let (lo, hi) = spec.nc_range;
            let nc = if hi > lo { rng.random_range(lo..hi) } else { lo };
            (df, nc)
        })
        .collect();
    let samples: Vec<Sample> = params
        .par_iter()
        .filter_map(|&(df, nc)| simulate_one(df, nc, spec, spec.max_kurtosis))
        .collect();
    let used = samples.len();

    let mut xv = Vec::with_capacity(used);
    let mut yv = Vec::with_capacity(used);
    let mut xs = Vec::with_capacity(used);
    let mut ys = Vec::with_capacity(used);
    let mut xk = Vec::with_capacity(used);
    let mut yk = Vec::with_capacity(used);
    for s in &samples {
        let [v, sk, k] = s.naive;
        let ke = k - 3.0;
        xv.push([1.0, sk, ke]);
        yv.push(s.exact[0] / v);
        xs.push([sk, sk * sk, ke]);
        ys.push(s.exact[1]);
        xk.push([ke, ke * ke, sk]);
        yk.push(s.exact[2] - 3.0);
    }
    let variance = ols(&xv, &yv)?;
    let skewness = ols(&xs, &ys)?;
    let kurtosis = ols(&xk, &yk)?;
    Ok(RefitReport {
        coefficients: AdjustmentCoefficients {
            variance: variance.coefficients,
            skewness: skewness.coefficients,
            kurtosis: kurtosis.coefficients,
        },
        variance,
        skewness,
        kurtosis,
        used,
        discarded: spec.n - used,
    })
}
