//! Quantile grid → CDF spline → density with discrete tail masses.
//!
//! The CDF is interpolated through the (value, level) pairs, differentiated
//! on a dense abscissa grid spanning the interior quantile intervals, floored,
//! and flattened in the tails. Probability outside the outermost quantiles
//! is carried as two point masses at the support bounds. When the cubic
//! interpolant produces a near-zero density in the body of the distribution
//! (typically a near-atom at zero) the fit falls back to linear interpolation.

mod spline;

use std::io::Write;

pub use spline::{CubicSpline, LinearSpline, SplineCdf, SplineKind};

use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-4;
pub const DEFAULT_GRID_POINTS: usize = 100;
pub const DEFAULT_MIN_DENSITY: f64 = 1e-5;
/// Smallest grid that survives preprocessing.
pub const MIN_GRID_LEN: usize = 6;

/// Quantile levels (`taus`) and the matching quantile values.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileGrid {
    pub taus: Vec<f64>,
    pub values: Vec<f64>,
}

impl QuantileGrid {
    pub fn new(taus: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if taus.len() != values.len() {
            return Err(Error::Dimension {
                context: "QuantileGrid",
                expected: taus.len(),
                got: values.len(),
            });
        }
        if taus.windows(2).any(|w| w[1] <= w[0]) || taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::Input(
                "quantile levels must be strictly increasing in (0,1)".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("quantile values must be finite".into()));
        }
        Ok(Self { taus, values })
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    /// Quantile value at the level closest to `tau`.
    fn value_near(&self, tau: f64) -> f64 {
        let i = self
            .taus
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - tau).abs().total_cmp(&(b.1 - tau).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        self.values[i]
    }
}

/// Collapses a run of leading `-1` values to its last element.
fn collapse_total_loss(g: &QuantileGrid) -> QuantileGrid {
    let lead = g.values.iter().take_while(|&&v| v == -1.0).count();
    let skip = lead.saturating_sub(1);
    QuantileGrid {
        taus: g.taus[skip..].to_vec(),
        values: g.values[skip..].to_vec(),
    }
}

/// Forces `values[i+1] >= values[i] + eps` by pushing forward.
fn enforce_spacing(values: &mut [f64], eps: f64) {
    for i in 0..values.len().saturating_sub(1) {
        if values[i + 1] < values[i] + eps {
            values[i + 1] = values[i] + eps;
        }
    }
}

/// Repairs a raw quantile forecast: keeps only the highest level at a
/// total loss (`-1`) and removes crossings by enforcing `eps` spacing.
pub fn preprocess_quantiles(g: &QuantileGrid, eps: f64) -> Result<QuantileGrid> {
    let mut out = collapse_total_loss(g);
    if out.len() < MIN_GRID_LEN {
        return Err(Error::InsufficientGrid { len: out.len() });
    }
    enforce_spacing(&mut out.values, eps);
    Ok(out)
}

/// Dense abscissae: `gp` equally spaced points starting at each interior
/// knot `x[i+1]` up to (excluding) `x[i+2]`, for `i = 0..K-3`. The first and
/// last quantile intervals are left out; duplicates removed, sorted.
pub fn dense_grid(values: &[f64], gp: usize) -> Vec<f64> {
    let k = values.len();
    let mut out = Vec::with_capacity(k.saturating_sub(3) * gp);
    for i in 0..k.saturating_sub(3) {
        let (lo, hi) = (values[i + 1], values[i + 2]);
        let step = (hi - lo) / gp as f64;
        out.extend((0..gp).map(|j| lo + j as f64 * step));
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityOptions {
    pub eps: f64,
    pub grid_points: usize,
    pub min_density: f64,
}

impl Default for DensityOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            grid_points: DEFAULT_GRID_POINTS,
            min_density: DEFAULT_MIN_DENSITY,
        }
    }
}

/// Density on a dense grid plus point masses at the support bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityApprox {
    /// Dense abscissae, strictly increasing.
    pub x: Vec<f64>,
    /// Density at each abscissa, at least the minimum density.
    pub density: Vec<f64>,
    /// Mass placed at `x_min`.
    pub p_lower: f64,
    /// Mass placed at `x_max`.
    pub p_upper: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub kind: SplineKind,
    /// The CDF spline the density was differentiated from.
    pub cdf: SplineCdf,
}

impl DensityApprox {
    pub fn is_fallback(&self) -> bool {
        self.kind == SplineKind::Linear
    }

    /// Trapezoid integral of the interior density plus both tail masses.
    pub fn total_mass(&self) -> f64 {
        let interior: f64 = self
            .x
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, d)| 0.5 * (d[0] + d[1]) * (x[1] - x[0]))
            .sum();
        interior + self.p_lower + self.p_upper
    }

    /// CSV dump: `x,density` rows followed by one commented sidecar line
    /// with the tail masses, bounds and spline kind.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,density")?;
        for (x, d) in self.x.iter().zip(&self.density) {
            writeln!(w, "{x:.15e},{d:.15e}")?;
        }
        writeln!(
            w,
            "# p_lower={:.15e},p_upper={:.15e},x_min={:.15e},x_max={:.15e},kind={}",
            self.p_lower,
            self.p_upper,
            self.x_min,
            self.x_max,
            self.kind.as_str()
        )?;
        Ok(())
    }
}

/// Builds the density approximation of a quantile forecast.
pub fn fit_pdf(g: &QuantileGrid, opts: &DensityOptions) -> Result<DensityApprox> {
    let collapsed = collapse_total_loss(g);
    if collapsed.len() < MIN_GRID_LEN {
        return Err(Error::InsufficientGrid { len: collapsed.len() });
    }
    // Outlier guards come from the repaired-but-unspaced values.
    let min_tau = collapsed.taus.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_q10 = if min_tau < 0.05 {
        collapsed.value_near(0.1)
    } else {
        collapsed.values[2]
    };
    let x_q90 = collapsed.value_near(0.9);

    let mut values = collapsed.values;
    enforce_spacing(&mut values, opts.eps);
    let taus = collapsed.taus;

    let mut xt = dense_grid(&values, opts.grid_points);

    let cubic = CubicSpline::fit(&values, &taus).ok().map(SplineCdf::Cubic);
    let linear = || -> Result<SplineCdf> { Ok(SplineCdf::Linear(LinearSpline::fit(&values, &taus)?)) };
    let mut spline = match cubic {
        Some(s) => s,
        None => linear()?,
    };
    let mut d: Vec<f64> = xt.iter().map(|&t| spline.derivative(t)).collect();
    if spline.kind() == SplineKind::Cubic {
        let body_min = xt
            .iter()
            .zip(&d)
            .filter(|(x, _)| **x >= x_q10 && **x <= x_q90)
            .map(|(_, v)| *v)
            .fold(f64::INFINITY, f64::min);
        if body_min < opts.min_density {
            spline = linear()?;
            d = xt.iter().map(|&t| spline.derivative(t)).collect();
        }
    }

    for v in d.iter_mut() {
        if *v < opts.min_density {
            *v = opts.min_density;
        }
    }

    // Left tail: everything left of the smallest density at or below x_q10
    // is raised to that value.
    let left = xt.partition_point(|&x| x <= x_q10);
    if left > 0 {
        let v = argmin(&d[..left]);
        let w = d[v];
        d[..v].iter_mut().for_each(|x| *x = w);
    }
    // Right tail, mirrored past x_q90.
    let right = xt.partition_point(|&x| x < x_q90);
    if right < d.len() {
        let v = right + argmin(&d[right..]);
        let w = d[v];
        d[v..].iter_mut().for_each(|x| *x = w);
    }

    let mut x_min = values[0];
    let x_max = *values.last().expect("non-empty grid");
    if xt.first().is_some_and(|&x| x < -1.0) {
        let keep = xt.partition_point(|&x| x < -1.0);
        xt.drain(..keep);
        d.drain(..keep);
        x_min = -1.0;
    }
    let p_lower = spline.value(x_min);
    let p_upper = 1.0 - spline.value(x_max);

    Ok(DensityApprox {
        x: xt,
        density: d,
        p_lower,
        p_upper,
        x_min,
        x_max,
        kind: spline.kind(),
        cdf: spline,
    })
}

/// CDF of a fitted density: the spline value clamped to `[0, 1]`.
/// Arguments outside `[x_min, x_max]` take the boundary value, so the
/// lower tail mass is returned below `x_min`.
pub fn eval_cdf(d: &DensityApprox, x: f64) -> f64 {
    if x <= d.x_min {
        return d.p_lower.clamp(0.0, 1.0);
    }
    let x = x.min(d.x_max);
    d.cdf.value(x).clamp(0.0, 1.0)
}

fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v < xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
