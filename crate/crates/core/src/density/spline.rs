//! Interpolating splines of a CDF through (quantile value, level) pairs.

use crate::error::{Error, Result};

/// Piecewise cubic through every knot with not-a-knot end conditions,
/// stored in Hermite form (knot values and slopes).
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    slopes: Vec<f64>,
}

impl CubicSpline {
    /// Fits the not-a-knot interpolant. Needs at least four strictly
    /// increasing abscissae.
    pub fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        let n = x.len();
        if n != y.len() {
            return Err(Error::Dimension {
                context: "CubicSpline::fit",
                expected: n,
                got: y.len(),
            });
        }
        if n < 4 {
            return Err(Error::Input("cubic spline needs at least 4 knots".into()));
        }
        let dx: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        if dx.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::Input("spline knots must be strictly increasing".into()));
        }
        let slope: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / dx[i]).collect();

        // Tridiagonal system for the knot slopes s_i.
        let mut sub = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut sup = vec![0.0; n];
        let mut rhs = vec![0.0; n];

        let d0 = x[2] - x[0];
        diag[0] = dx[1];
        sup[0] = d0;
        rhs[0] = ((dx[0] + 2.0 * d0) * dx[1] * slope[0] + dx[0] * dx[0] * slope[1]) / d0;
        for i in 1..n - 1 {
            sub[i] = dx[i];
            diag[i] = 2.0 * (dx[i - 1] + dx[i]);
            sup[i] = dx[i - 1];
            rhs[i] = 3.0 * (dx[i] * slope[i - 1] + dx[i - 1] * slope[i]);
        }
        let dn = x[n - 1] - x[n - 3];
        sub[n - 1] = dn;
        diag[n - 1] = dx[n - 3];
        rhs[n - 1] = (dx[n - 2] * dx[n - 2] * slope[n - 3] + (2.0 * dn + dx[n - 2]) * dx[n - 3] * slope[n - 2]) / dn;

        let slopes = solve_tridiagonal(&sub, &diag, &sup, &rhs)?;
        if slopes.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numerical("singular spline system".into()));
        }
        Ok(Self {
            x: x.to_vec(),
            y: y.to_vec(),
            slopes,
        })
    }

    fn interval(&self, t: f64) -> usize {
        interval_index(&self.x, t)
    }

    /// Value; outside the knot range the end polynomials are extrapolated.
    pub fn eval(&self, t: f64) -> f64 {
        let i = self.interval(t);
        let h = self.x[i + 1] - self.x[i];
        let u = (t - self.x[i]) / h;
        let (y0, y1) = (self.y[i], self.y[i + 1]);
        let (m0, m1) = (self.slopes[i] * h, self.slopes[i + 1] * h);
        let u2 = u * u;
        let u3 = u2 * u;
        (2.0 * u3 - 3.0 * u2 + 1.0) * y0 + (u3 - 2.0 * u2 + u) * m0 + (-2.0 * u3 + 3.0 * u2) * y1 + (u3 - u2) * m1
    }

    /// First derivative.
    pub fn derivative(&self, t: f64) -> f64 {
        let i = self.interval(t);
        let h = self.x[i + 1] - self.x[i];
        let u = (t - self.x[i]) / h;
        let (y0, y1) = (self.y[i], self.y[i + 1]);
        let (m0, m1) = (self.slopes[i] * h, self.slopes[i + 1] * h);
        let u2 = u * u;
        ((6.0 * u2 - 6.0 * u) * y0
            + (3.0 * u2 - 4.0 * u + 1.0) * m0
            + (-6.0 * u2 + 6.0 * u) * y1
            + (3.0 * u2 - 2.0 * u) * m1)
            / h
    }

    pub fn knots(&self) -> &[f64] {
        &self.x
    }
}

/// Piecewise-linear interpolant (a degree-one B-spline).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSpline {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl LinearSpline {
    pub fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() || x.len() < 2 {
            return Err(Error::Input("linear spline needs >= 2 matching points".into()));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Input("spline knots must be strictly increasing".into()));
        }
        Ok(Self {
            x: x.to_vec(),
            y: y.to_vec(),
        })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let i = interval_index(&self.x, t);
        let s = (self.y[i + 1] - self.y[i]) / (self.x[i + 1] - self.x[i]);
        self.y[i] + s * (t - self.x[i])
    }

    /// Slope of the interval `[x_i, x_{i+1})` containing `t`; knots take
    /// the slope on their right.
    pub fn derivative(&self, t: f64) -> f64 {
        let i = interval_index(&self.x, t);
        (self.y[i + 1] - self.y[i]) / (self.x[i + 1] - self.x[i])
    }

    pub fn knots(&self) -> &[f64] {
        &self.x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SplineKind {
    Cubic,
    Linear,
}

impl SplineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplineKind::Cubic => "cubic",
            SplineKind::Linear => "linear",
        }
    }
}

/// A fitted CDF spline of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum SplineCdf {
    Cubic(CubicSpline),
    Linear(LinearSpline),
}

impl SplineCdf {
    pub fn kind(&self) -> SplineKind {
        match self {
            SplineCdf::Cubic(_) => SplineKind::Cubic,
            SplineCdf::Linear(_) => SplineKind::Linear,
        }
    }

    /// Raw spline value (extrapolating outside the knots).
    pub fn value(&self, t: f64) -> f64 {
        match self {
            SplineCdf::Cubic(s) => s.eval(t),
            SplineCdf::Linear(s) => s.eval(t),
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match self {
            SplineCdf::Cubic(s) => s.derivative(t),
            SplineCdf::Linear(s) => s.derivative(t),
        }
    }

    pub fn knots(&self) -> &[f64] {
        match self {
            SplineCdf::Cubic(s) => s.knots(),
            SplineCdf::Linear(s) => s.knots(),
        }
    }
}

/// Index `i` with `x[i] <= t < x[i+1]`, clamped to the first/last interval.
fn interval_index(x: &[f64], t: f64) -> usize {
    let n = x.len();
    if t <= x[0] {
        return 0;
    }
    if t >= x[n - 2] {
        return n - 2;
    }
    // partition_point gives the first knot > t.
    x.partition_point(|&k| k <= t) - 1
}

/// Thomas algorithm with a guard against vanishing pivots.
fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut piv = diag[0];
    if piv.abs() < 1e-300 {
        return Err(Error::Numerical("zero pivot in spline system".into()));
    }
    c[0] = sup[0] / piv;
    d[0] = rhs[0] / piv;
    for i in 1..n {
        piv = diag[i] - sub[i] * c[i - 1];
        if piv.abs() < 1e-300 {
            return Err(Error::Numerical("zero pivot in spline system".into()));
        }
        c[i] = if i + 1 < n { sup[i] / piv } else { 0.0 };
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / piv;
    }
    let mut out = vec![0.0; n];
    out[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        out[i] = d[i] - c[i] * out[i + 1];
    }
    Ok(out)
}
