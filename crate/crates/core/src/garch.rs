//! GARCH(1,1) / GJR-GARCH(1,1) with Student-t innovations: maximum
//! likelihood by Nelder-Mead and Monte Carlo forecasts of cumulative
//! multi-day returns.
//!
//! Innovations are standardised to unit variance, so `ω` is on the scale of
//! the squared returns. Shocks are `ε = σ z` and the variance follows
//! `σ²_t = ω + (α + γ·1{ε_{t-1}<0}) ε²_{t-1} + β σ²_{t-1}`.

use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::stats::{quantile_sorted, sample_sd};
use crate::taus::TauGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarchParams {
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Extra loading on negative shocks; zero for plain GARCH.
    pub gamma: f64,
    /// Degrees of freedom of the innovations; infinite for normal.
    pub df: f64,
    /// Daily mean return.
    pub mu: f64,
}

impl GarchParams {
    /// Fixed fallback: α = 0.06, β = 0.94, t(4) innovations, no constant.
    pub fn fallback(mu: f64) -> Self {
        Self {
            omega: 0.0,
            alpha: 0.06,
            beta: 0.94,
            gamma: 0.0,
            df: 4.0,
            mu,
        }
    }

    pub fn persistence(&self) -> f64 {
        self.alpha + self.beta + 0.5 * self.gamma
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.omega >= 0.0
            && self.alpha >= 0.0
            && self.beta >= 0.0
            && self.gamma >= 0.0
            && self.df > 2.0
            && self.mu.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!("invalid GARCH parameters {self:?}")))
        }
    }

    /// Variance of the next shock given the last shock and variance.
    pub fn next_variance(&self, eps: f64, sigma2: f64) -> f64 {
        let a = if eps < 0.0 { self.alpha + self.gamma } else { self.alpha };
        self.omega + a * eps * eps + self.beta * sigma2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Innovations {
    Normal,
    StudentT,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MeanMode {
    /// `μ = rf + 0.05/252`.
    Fixed {
        rf: f64,
    },
    Estimated,
}

impl MeanMode {
    pub fn fixed_mu(rf: f64) -> f64 {
        rf + 0.05 / 252.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GarchSpec {
    pub innovations: Innovations,
    pub gjr: bool,
    pub mean: MeanMode,
    pub max_evals: usize,
    /// Minimum number of returns for an estimate; shorter windows use the
    /// fallback.
    pub min_obs: usize,
}

impl Default for GarchSpec {
    fn default() -> Self {
        Self {
            innovations: Innovations::StudentT,
            gjr: false,
            mean: MeanMode::Fixed { rf: 0.0 },
            max_evals: 3000,
            min_obs: 250,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GarchFit {
    pub params: GarchParams,
    /// Log-likelihood at the estimate; `NaN` for the fallback.
    pub loglik: f64,
    pub converged: bool,
    pub fallback: bool,
}

/// Log density of a unit-variance Student t (normal when `df` is infinite).
fn std_t_logpdf_consts(df: f64) -> (f64, f64) {
    if df.is_infinite() {
        (-0.5 * (2.0 * std::f64::consts::PI).ln(), f64::INFINITY)
    } else {
        let c = ln_gamma(0.5 * (df + 1.0)) - ln_gamma(0.5 * df) - 0.5 * (std::f64::consts::PI * (df - 2.0)).ln();
        (c, df)
    }
}

/// Conditional variances of `returns` under `p`, started at the sample
/// variance of the demeaned returns. Element `t` is the variance of shock `t`.
pub fn filter_variance(p: &GarchParams, returns: &[f64]) -> Vec<f64> {
    let n = returns.len();
    if n == 0 {
        return Vec::new();
    }
    let init = returns.iter().map(|r| (r - p.mu).powi(2)).sum::<f64>() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut s2 = init;
    for t in 0..n {
        if t > 0 {
            s2 = p.next_variance(returns[t - 1] - p.mu, s2);
        }
        out.push(s2);
    }
    out
}

/// Gaussian or Student-t log-likelihood of `returns`.
pub fn log_likelihood(p: &GarchParams, returns: &[f64]) -> f64 {
    let (c, df) = std_t_logpdf_consts(p.df);
    let n = returns.len();
    if n == 0 {
        return 0.0;
    }
    let init = returns.iter().map(|r| (r - p.mu).powi(2)).sum::<f64>() / n as f64;
    let mut s2 = init;
    let mut ll = 0.0;
    for t in 0..n {
        if t > 0 {
            s2 = p.next_variance(returns[t - 1] - p.mu, s2);
        }
        if !(s2 > 0.0) {
            return f64::NEG_INFINITY;
        }
        let e = returns[t] - p.mu;
        let z2 = e * e / s2;
        let kernel = if df.is_infinite() {
            -0.5 * z2
        } else {
            -0.5 * (df + 1.0) * (z2 / (df - 2.0)).ln_1p()
        };
        ll += c + kernel - 0.5 * s2.ln();
    }
    ll
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Maps unconstrained coordinates to parameters.
struct Transform {
    spec: GarchSpec,
    fixed_mu: f64,
    scale: f64,
}

impl Transform {
    fn params(&self, th: &[f64]) -> GarchParams {
        let mut k = 3;
        let mut next = || {
            let v = th[k];
            k += 1;
            v
        };
        let gamma = if self.spec.gjr { sigmoid(next()) } else { 0.0 };
        let df = match self.spec.innovations {
            Innovations::StudentT => 2.0 + next().exp(),
            Innovations::Normal => f64::INFINITY,
        };
        let mu = match self.spec.mean {
            MeanMode::Estimated => next() * self.scale,
            MeanMode::Fixed { .. } => self.fixed_mu,
        };
        GarchParams {
            omega: th[0].exp(),
            alpha: sigmoid(th[1]),
            beta: sigmoid(th[2]),
            gamma,
            df,
            mu,
        }
    }

    fn coords(&self, p: &GarchParams) -> Vec<f64> {
        let mut th = vec![p.omega.ln(), logit(p.alpha), logit(p.beta)];
        if self.spec.gjr {
            th.push(logit(p.gamma.max(1e-4)));
        }
        if self.spec.innovations == Innovations::StudentT {
            th.push((p.df - 2.0).ln());
        }
        if self.spec.mean == MeanMode::Estimated {
            th.push(p.mu / self.scale);
        }
        th
    }
}

/// Nelder-Mead minimisation. Returns the best point, its value and whether
/// the simplex collapsed before the evaluation budget ran out.
pub fn nelder_mead(
    f: impl Fn(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    max_evals: usize,
    tol: f64,
) -> (Vec<f64>, f64, bool) {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step;
        simplex.push(x);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|x| f(x)).collect();
    let mut evals = n + 1;
    let mut converged = false;
    while evals < max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();

        let spread = (vals[n] - vals[0]).abs();
        let size = simplex[1..]
            .iter()
            .flat_map(|x| x.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if spread <= tol * (1.0 + vals[0].abs()) && size <= 1e-6 {
            converged = true;
            break;
        }

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|x| x[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            (0..n)
                .map(|j| centroid[j] + t * (simplex[n][j] - centroid[j]))
                .collect()
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            evals += 1;
            if fe < fr {
                simplex[n] = xe;
                vals[n] = fe;
            } else {
                simplex[n] = xr;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            simplex[n] = xr;
            vals[n] = fr;
        } else {
            let (xc, fc) = if fr < vals[n] {
                let xc = along(-0.5);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = f(&xc);
                (xc, fc)
            };
            evals += 1;
            if fc < vals[n].min(fr) {
                simplex[n] = xc;
                vals[n] = fc;
            } else {
                for i in 1..=n {
                    let x: Vec<f64> = (0..n)
                        .map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j]))
                        .collect();
                    vals[i] = f(&x);
                    simplex[i] = x;
                }
                evals += n;
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    (simplex[best].clone(), vals[best], converged)
}

/// Maximum-likelihood fit. Any failure (short or degenerate window,
/// non-convergence, near-integrated or explosive persistence, df at the
/// boundary) returns the fixed fallback instead of an error.
pub fn fit_garch(returns: &[f64], spec: &GarchSpec) -> GarchFit {
    fit_garch_from(returns, spec, None)
}

/// As [`fit_garch`], starting the search at `start` when given.
pub fn fit_garch_from(returns: &[f64], spec: &GarchSpec, start: Option<&GarchParams>) -> GarchFit {
    let fixed_mu = match spec.mean {
        MeanMode::Fixed { rf } => MeanMode::fixed_mu(rf),
        MeanMode::Estimated => 0.0,
    };
    let fallback = GarchFit {
        params: GarchParams::fallback(fixed_mu),
        loglik: f64::NAN,
        converged: false,
        fallback: true,
    };
    let returns: Vec<f64> = returns.iter().copied().filter(|r| r.is_finite()).collect();
    if returns.len() < spec.min_obs.max(10) {
        return fallback;
    }
    let sd = sample_sd(&returns);
    if !(sd > 1e-12) {
        return fallback;
    }
    let var = sd * sd;
    let tf = Transform {
        spec: *spec,
        fixed_mu,
        scale: sd,
    };
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    let default_start = GarchParams {
        omega: var * 0.05,
        alpha: 0.05,
        beta: 0.90,
        gamma: if spec.gjr { 0.05 } else { 0.0 },
        df: if spec.innovations == Innovations::StudentT {
            8.0
        } else {
            f64::INFINITY
        },
        mu: if spec.mean == MeanMode::Estimated {
            mean
        } else {
            fixed_mu
        },
    };
    let x0 = match start {
        Some(p) if p.omega > 0.0 && p.alpha > 0.0 && p.beta > 0.0 && p.persistence() < 0.999 => {
            let mut s = *p;
            s.df = if spec.innovations == Innovations::StudentT {
                s.df.clamp(2.5, 200.0)
            } else {
                f64::INFINITY
            };
            s.gamma = if spec.gjr { s.gamma.max(0.01) } else { 0.0 };
            s.mu = default_start.mu;
            tf.coords(&s)
        }
        _ => tf.coords(&default_start),
    };
    let objective = |th: &[f64]| -> f64 {
        let p = tf.params(th);
        if p.persistence() >= 1.0 {
            return 1e10 * (1.0 + p.persistence());
        }
        let ll = log_likelihood(&p, &returns);
        if ll.is_finite() {
            -ll
        } else {
            1e10
        }
    };
    let (mut th, mut fv, mut converged) = nelder_mead(objective, &x0, 0.5, spec.max_evals, 1e-10);
    // One restart from the optimum guards against a collapsed simplex.
    if converged {
        let (th2, fv2, c2) = nelder_mead(objective, &th, 0.1, spec.max_evals, 1e-10);
        if fv2 <= fv {
            th = th2;
            fv = fv2;
        }
        converged = c2;
    }
    let p = tf.params(&th);
    let bad = !converged || !(fv < 1e9) || p.alpha + p.beta + 0.5 * p.gamma >= 0.999 || p.df <= 2.05;
    if bad {
        return fallback;
    }
    GarchFit {
        params: p,
        loglik: -fv,
        converged,
        fallback: false,
    }
}

/// Simulated distribution of the cumulative return over a horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct GarchForecast {
    pub taus: TauGrid,
    pub quantiles: Vec<f64>,
    /// Sample standard deviation of the simulated cumulative returns.
    pub volatility: f64,
    pub paths: usize,
}

/// Paths simulated per independent random stream.
pub const PATH_BLOCK: usize = 4096;

/// Innovation sampler with unit variance.
#[derive(Debug, Clone, Copy)]
pub enum UnitShock {
    Normal,
    T { dist: StudentT<f64>, scale: f64 },
}

impl UnitShock {
    pub fn new(df: f64) -> Result<Self> {
        if df.is_infinite() {
            return Ok(UnitShock::Normal);
        }
        if !(df > 2.0) {
            return Err(Error::Input(format!("df must exceed 2, got {df}")));
        }
        let dist = StudentT::new(df).map_err(|e| Error::Input(e.to_string()))?;
        Ok(UnitShock::T {
            dist,
            scale: ((df - 2.0) / df).sqrt(),
        })
    }

    #[inline]
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            UnitShock::Normal => StandardNormal.sample(rng),
            UnitShock::T { dist, scale } => dist.sample(rng) * scale,
        }
    }
}

/// Simulates `paths` cumulative returns `Π(1 + μ + ε_i) - 1`, where the
/// first day's variance is `sigma2_next`. Daily simple returns are floored
/// at -100%. Blocks of [`PATH_BLOCK`] paths use independent streams of
/// `seed`, so the output does not depend on the thread count.
pub fn simulate_cumulative(
    p: &GarchParams,
    sigma2_next: f64,
    horizon: usize,
    paths: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    p.validate()?;
    let shock = UnitShock::new(p.df)?;
    let blocks = paths.div_ceil(PATH_BLOCK);
    let out: Vec<Vec<f64>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = crate::stream_rng(seed, b as u64);
            let n = PATH_BLOCK.min(paths - b * PATH_BLOCK);
            (0..n)
                .map(|_| {
                    let mut s2 = sigma2_next;
                    let mut growth = 1.0;
                    for _ in 0..horizon {
                        let eps = s2.sqrt() * shock.sample(&mut rng);
                        growth *= (1.0 + p.mu + eps).max(0.0);
                        s2 = p.next_variance(eps, s2);
                    }
                    growth - 1.0
                })
                .collect()
        })
        .collect();
    Ok(out.into_iter().flatten().collect())
}

/// Monte Carlo forecast of the `horizon`-day cumulative return given the
/// last in-sample shock `last_eps` and its variance `last_sigma2`.
pub fn mc_forecast(
    p: &GarchParams,
    last_eps: f64,
    last_sigma2: f64,
    horizon: usize,
    paths: usize,
    taus: &TauGrid,
    seed: u64,
) -> Result<GarchForecast> {
    if paths < 1000 {
        return Err(Error::Input(format!("at least 1000 paths needed, got {paths}")));
    }
    let s2 = p.next_variance(last_eps, last_sigma2);
    let mut sims = simulate_cumulative(p, s2, horizon, paths, seed)?;
    let volatility = sample_sd(&sims);
    sims.sort_by(f64::total_cmp);
    let quantiles = taus.levels().iter().map(|&t| quantile_sorted(&sims, t)).collect();
    Ok(GarchForecast {
        taus: taus.clone(),
        quantiles,
        volatility,
        paths,
    })
}

/// Fits on a window of daily returns and forecasts the next `horizon` days.
pub fn forecast_window(
    window: &[f64],
    spec: &GarchSpec,
    start: Option<&GarchParams>,
    horizon: usize,
    paths: usize,
    taus: &TauGrid,
    seed: u64,
) -> Result<(GarchFit, GarchForecast)> {
    let clean: Vec<f64> = window.iter().copied().filter(|r| r.is_finite()).collect();
    let fit = fit_garch_from(&clean, spec, start);
    let (eps, s2) = match clean.last() {
        Some(&r) => {
            let v = filter_variance(&fit.params, &clean);
            let s2 = *v.last().expect("non-empty");
            (r - fit.params.mu, s2)
        }
        None => (0.0, 0.0),
    };
    let fc = mc_forecast(&fit.params, eps, s2, horizon, paths, taus, seed)?;
    Ok((fit, fc))
}

/// Simulates a return path of length `n` from `p`, starting at the
/// unconditional variance (or `ω` when non-stationary).
pub fn simulate_path(p: &GarchParams, n: usize, seed: u64) -> Result<Vec<f64>> {
    p.validate()?;
    let shock = UnitShock::new(p.df)?;
    let mut rng = crate::seeded(seed);
    let pers = p.persistence();
    let mut s2 = if pers < 1.0 { p.omega / (1.0 - pers) } else { p.omega };
    let mut out = Vec::with_capacity(n);
    // Burn-in so the start value does not matter.
    for t in 0..n + 500 {
        let eps = s2.sqrt() * shock.sample(&mut rng);
        if t >= 500 {
            out.push(p.mu + eps);
        }
        s2 = p.next_variance(eps, s2);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn truth() -> GarchParams {
        GarchParams {
            omega: 2e-6,
            alpha: 0.08,
            beta: 0.9,
            gamma: 0.0,
            df: 6.0,
            mu: MeanMode::fixed_mu(0.0),
        }
    }

    #[test]
    fn simulate_then_fit_recovers_params() {
        let p = truth();
        let r = simulate_path(&p, 5000, 11).unwrap();
        let fit = fit_garch(&r, &GarchSpec::default());
        assert!(!fit.fallback, "{fit:?}");
        assert!((fit.params.alpha - p.alpha).abs() < 0.05, "{fit:?}");
        assert!((fit.params.beta - p.beta).abs() < 0.05, "{fit:?}");
        assert!(fit.loglik >= log_likelihood(&p, &r) - 1e-6);
    }

    #[test]
    fn iid_data_has_low_persistence() {
        let p = GarchParams {
            omega: 1e-4,
            alpha: 0.0,
            beta: 0.0,
            ..truth()
        };
        let r = simulate_path(&p, 5000, 12).unwrap();
        let fit = fit_garch(&r, &GarchSpec::default());
        // Either a low-persistence estimate or the fallback when α+β drifts to the boundary.
        assert!(
            fit.fallback || fit.params.alpha + fit.params.beta < 0.2 || fit.params.alpha < 0.02,
            "{fit:?}"
        );
    }

    #[test]
    fn constant_returns_fall_back() {
        let fit = fit_garch(&[0.001; 600], &GarchSpec::default());
        assert!(fit.fallback);
        assert_eq!(fit.params.alpha, 0.06);
        assert_eq!(fit.params.beta, 0.94);
        assert_eq!(fit.params.df, 4.0);
        assert!(fit_garch(&[0.01, -0.01], &GarchSpec::default()).fallback);
    }

    #[test]
    fn one_day_normal_quantiles() {
        let p = GarchParams {
            omega: 1e-4,
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            df: f64::INFINITY,
            mu: 0.0,
        };
        let taus = TauGrid::new(vec![0.05, 0.25, 0.5, 0.75, 0.95]).unwrap();
        let paths = 200_000;
        let fc = mc_forecast(&p, 0.0, 0.0, 1, paths, &taus, 1).unwrap();
        let n = Normal::new(0.0, 0.01).unwrap();
        for (t, q) in taus.levels().iter().zip(&fc.quantiles) {
            let exact = n.inverse_cdf(*t);
            // Standard error of a sample quantile: sqrt(τ(1-τ)/n) / f(q).
            let se = (t * (1.0 - t) / paths as f64).sqrt() / statrs::distribution::Continuous::pdf(&n, exact);
            assert!((q - exact).abs() < 3.0 * se + 1e-12, "τ={t} {q} {exact}");
        }
        assert!((fc.volatility - 0.01).abs() < 1e-4);
    }

    #[test]
    fn zero_vol_compounds_deterministically() {
        let p = GarchParams {
            omega: 0.0,
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            df: 5.0,
            mu: 0.01,
        };
        let fc = mc_forecast(&p, 0.0, 0.0, 22, 1000, &TauGrid::standard(), 3).unwrap();
        let exact = 1.01f64.powi(22) - 1.0;
        assert!((exact - 0.24472).abs() < 1e-5);
        assert!(fc.quantiles.iter().all(|q| (q - exact).abs() < 1e-12));
        assert!(fc.volatility < 1e-12);
    }

    #[test]
    fn riskmetrics_volatility_scales_with_sqrt_horizon() {
        let p = GarchParams::fallback(0.0);
        let daily: f64 = 0.01;
        let fc = mc_forecast(&p, daily, daily * daily, 22, 50_000, &TauGrid::standard(), 4).unwrap();
        let ratio = fc.volatility / (daily * 22f64.sqrt());
        assert!((ratio - 1.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn forecasts_are_reproducible_and_monotone() {
        let p = truth();
        let a = mc_forecast(&p, 0.01, 2e-4, 22, 10_000, &TauGrid::standard(), 9).unwrap();
        let b = mc_forecast(&p, 0.01, 2e-4, 22, 10_000, &TauGrid::standard(), 9).unwrap();
        assert_eq!(a, b);
        assert!(a.quantiles.windows(2).all(|w| w[1] >= w[0]));
        assert!(mc_forecast(&p, 0.0, 0.0, 22, 10, &TauGrid::standard(), 9).is_err());
    }

    #[test]
    fn variance_never_below_omega() {
        let p = truth();
        let r = simulate_path(&p, 2000, 5).unwrap();
        let v = filter_variance(&p, &r);
        assert!(v[1..].iter().all(|&s| s >= p.omega));
    }

    #[test]
    fn nelder_mead_quadratic() {
        let (x, f, ok) = nelder_mead(
            |x| (x[0] - 1.0).powi(2) + 10.0 * (x[1] + 2.0).powi(2),
            &[0.0, 0.0],
            0.5,
            5000,
            1e-14,
        );
        assert!(ok);
        assert!(f < 1e-10);
        assert!((x[0] - 1.0).abs() < 1e-5 && (x[1] + 2.0).abs() < 1e-5);
    }
}
