//! Simulated stock panels with a known data-generating process.
//!
//! Daily returns follow
//! `r_it = β_i r_mt + σ_it ε_it + J_it`: a GARCH(1,1)-t market factor, a
//! GJR-GARCH(1,1)-t idiosyncratic part and rare Student-t jumps. Because
//! the process is known, the exact conditional distribution of next month's
//! return can be bootstrapped from each stock's state at month end.

use std::io::{Read, Write};

use rand::Rng as _;
use rand_distr::{Distribution, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::garch::{GarchParams, UnitShock};
use crate::panel::{fmt_f64, Panel};
use crate::stats::quantile_sorted;
use crate::taus::TauGrid;

/// Parameters of one simulated stock, fixed over the whole simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StockParams {
    pub beta_mkt: f64,
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub df: f64,
}

impl StockParams {
    pub fn garch(&self) -> GarchParams {
        GarchParams {
            omega: self.omega,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            df: self.df,
            mu: 0.0,
        }
    }

    pub fn persistence(&self) -> f64 {
        self.alpha + self.beta + 0.5 * self.gamma
    }

    /// Unconditional idiosyncratic variance, or `ω` for non-stationary rows.
    pub fn unconditional_variance(&self) -> f64 {
        let p = self.persistence();
        if p < 1.0 {
            self.omega / (1.0 - p)
        } else {
            self.omega
        }
    }
}

/// Which side of the degrees-of-freedom cut a pool keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfFilter {
    /// Keep rows with `df < cut`.
    KeepBelow,
    /// Keep rows with `df >= cut`.
    KeepAtLeast,
    Off,
}

/// Plausibility filters applied to a parameter pool before sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolFilter {
    /// Share of rows cut from each tail of the `ω` distribution.
    pub omega_tail: f64,
    pub min_alpha: f64,
    pub min_beta: f64,
    pub min_alpha_plus_beta: f64,
    /// Market beta must lie in `(lo, hi]`.
    pub beta_mkt: (f64, f64),
    pub df: DfFilter,
    pub df_cut: f64,
}

impl Default for PoolFilter {
    fn default() -> Self {
        Self {
            omega_tail: 0.05,
            min_alpha: 0.01,
            min_beta: 0.01,
            min_alpha_plus_beta: 0.5,
            beta_mkt: (-0.5, 4.0),
            df: DfFilter::KeepBelow,
            df_cut: 20.0,
        }
    }
}

impl PoolFilter {
    pub fn apply(&self, pool: &[StockParams]) -> Vec<StockParams> {
        let (lo, hi) = if self.omega_tail > 0.0 && !pool.is_empty() {
            let mut om: Vec<f64> = pool.iter().map(|p| p.omega).collect();
            om.sort_by(f64::total_cmp);
            (
                quantile_sorted(&om, self.omega_tail),
                quantile_sorted(&om, 1.0 - self.omega_tail),
            )
        } else {
            (f64::NEG_INFINITY, f64::INFINITY)
        };
        pool.iter()
            .filter(|p| {
                let df_ok = match self.df {
                    DfFilter::KeepBelow => p.df < self.df_cut,
                    DfFilter::KeepAtLeast => p.df >= self.df_cut,
                    DfFilter::Off => true,
                };
                p.omega >= lo
                    && p.omega <= hi
                    && p.alpha > self.min_alpha
                    && p.beta > self.min_beta
                    && p.alpha + p.beta > self.min_alpha_plus_beta
                    && p.beta_mkt > self.beta_mkt.0
                    && p.beta_mkt <= self.beta_mkt.1
                    && df_ok
            })
            .copied()
            .collect()
    }
}

/// Distributions of the synthetic parameter pool. All draws are uniform on
/// the given ranges; `ω` is set so the unconditional idiosyncratic daily
/// volatility is uniform on `daily_vol`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticPool {
    pub size: usize,
    pub beta_mkt: (f64, f64),
    pub alpha: (f64, f64),
    pub gamma: (f64, f64),
    pub beta: (f64, f64),
    /// Draws with `α + β + γ/2` at or above this are redrawn.
    pub max_persistence: f64,
    pub df: (f64, f64),
    pub daily_vol: (f64, f64),
}

impl Default for SyntheticPool {
    fn default() -> Self {
        Self {
            size: 10_000,
            beta_mkt: (0.2, 2.0),
            alpha: (0.02, 0.10),
            gamma: (0.0, 0.10),
            beta: (0.80, 0.95),
            max_persistence: 0.99,
            df: (4.0, 15.0),
            daily_vol: (0.01, 0.04),
        }
    }
}

fn uniform(rng: &mut crate::Rng, (a, b): (f64, f64)) -> f64 {
    a + (b - a) * rng.random::<f64>()
}

impl SyntheticPool {
    pub fn draw(&self, seed: u64) -> Vec<StockParams> {
        let mut rng = crate::seeded(seed);
        (0..self.size)
            .map(|_| loop {
                let alpha = uniform(&mut rng, self.alpha);
                let gamma = uniform(&mut rng, self.gamma);
                let beta = uniform(&mut rng, self.beta);
                let beta_mkt = uniform(&mut rng, self.beta_mkt);
                let df = uniform(&mut rng, self.df);
                let vol = uniform(&mut rng, self.daily_vol);
                let pers = alpha + beta + 0.5 * gamma;
                if pers < self.max_persistence {
                    break StockParams {
                        beta_mkt,
                        omega: vol * vol * (1.0 - pers),
                        alpha,
                        beta,
                        gamma,
                        df,
                    };
                }
            })
            .collect()
    }
}

/// Reads a parameter pool with columns `beta_mkt,omega,alpha,beta,gamma,df`.
pub fn read_pool<R: Read>(reader: R) -> Result<Vec<StockParams>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let p: StockParams = row?;
        if !(p.omega >= 0.0
            && p.alpha >= 0.0
            && p.beta >= 0.0
            && p.gamma >= 0.0
            && p.df > 2.0
            && p.beta_mkt.is_finite())
        {
            return Err(Error::Data(format!("invalid pool row {p:?}")));
        }
        out.push(p);
    }
    Ok(out)
}

pub fn write_pool<W: Write>(pool: &[StockParams], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for p in pool {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpSpec {
    pub n_stocks: usize,
    pub n_years: usize,
    pub days_per_month: usize,
    pub months_per_year: usize,
    /// Market GARCH(1,1); `ω` is in squared-return units.
    pub market: GarchParams,
    /// Market daily volatility at the start of the burn-in.
    pub market_initial_vol: f64,
    pub jump_prob: f64,
    pub jump_df: f64,
    pub jump_sd: f64,
    pub daily_bounds: (f64, f64),
    pub monthly_bounds: (f64, f64),
    /// Unrecorded days simulated first so the volatility states settle.
    pub burn_in_days: usize,
    pub pool: SyntheticPool,
    pub filter: PoolFilter,
}

impl Default for DgpSpec {
    fn default() -> Self {
        Self {
            n_stocks: 100,
            n_years: 20,
            days_per_month: 22,
            months_per_year: 12,
            // 0.0025 in percent² is 2.5e-7 on decimal returns.
            market: GarchParams {
                omega: 2.5e-7,
                alpha: 0.06,
                beta: 0.94,
                gamma: 0.0,
                df: 5.0,
                mu: 0.0,
            },
            market_initial_vol: 0.01,
            jump_prob: 0.01,
            jump_df: 3.0,
            jump_sd: 0.25,
            daily_bounds: (-0.9, 10.0),
            monthly_bounds: (-1.0, 20.0),
            burn_in_days: 264,
            pool: SyntheticPool::default(),
            filter: PoolFilter::default(),
        }
    }
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a < b;
        if !(0.0..=1.0).contains(&self.jump_prob) {
            return Err(Error::Config(format!(
                "jump probability {} outside [0, 1]",
                self.jump_prob
            )));
        }
        if !ordered(self.daily_bounds) || !ordered(self.monthly_bounds) {
            return Err(Error::Config("truncation bounds must be ordered".into()));
        }
        if self.daily_bounds.0 <= -1.0 {
            return Err(Error::Config("daily lower bound must exceed -1".into()));
        }
        if self.days_per_month == 0 || self.months_per_year == 0 {
            return Err(Error::Config("calendar sizes must be positive".into()));
        }
        if self.jump_prob > 0.0 && !(self.jump_df > 2.0 && self.jump_sd >= 0.0) {
            return Err(Error::Config("jumps need df > 2 and sd >= 0".into()));
        }
        self.market.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn n_days(&self) -> usize {
        self.n_years * self.months_per_year * self.days_per_month
    }

    pub fn n_months(&self) -> usize {
        self.n_years * self.months_per_year
    }

    pub fn calendar(&self) -> crate::panel::Calendar {
        crate::panel::Calendar::TradingDays {
            days_per_month: self.days_per_month as u32,
            months_per_year: self.months_per_year as u32,
        }
    }

    /// First month of the test half.
    pub fn test_start_month(&self) -> usize {
        (self.n_years / 2) * self.months_per_year
    }
}

/// Samples `spec.n_stocks` rows with replacement from the filtered pool.
/// Without a pool the synthetic pool is drawn from `seed`.
pub fn sample_stock_params(spec: &DgpSpec, pool: Option<&[StockParams]>, seed: u64) -> Result<Vec<StockParams>> {
    let drawn;
    let raw = match pool {
        Some(p) => p,
        None => {
            drawn = spec.pool.draw(seed ^ 0x5eed_9001);
            &drawn[..]
        }
    };
    let kept = spec.filter.apply(raw);
    if kept.is_empty() {
        return Err(Error::Input("parameter pool is empty after filtering".into()));
    }
    let mut rng = crate::seeded(seed);
    Ok((0..spec.n_stocks)
        .map(|_| kept[rng.random_range(0..kept.len())])
        .collect())
}

/// Jump sampler: `J = sd · t / √(df/(df−2))` with probability `prob`.
#[derive(Debug, Clone, Copy)]
struct Jumps {
    prob: f64,
    dist: Option<StudentT<f64>>,
    scale: f64,
}

impl Jumps {
    fn new(spec: &DgpSpec) -> Result<Self> {
        if spec.jump_prob == 0.0 {
            return Ok(Self {
                prob: 0.0,
                dist: None,
                scale: 0.0,
            });
        }
        let dist = StudentT::new(spec.jump_df).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            prob: spec.jump_prob,
            dist: Some(dist),
            scale: spec.jump_sd * ((spec.jump_df - 2.0) / spec.jump_df).sqrt(),
        })
    }

    #[inline]
    fn sample(&self, rng: &mut crate::Rng) -> f64 {
        match self.dist {
            Some(d) if rng.random::<f64>() < self.prob => self.scale * d.sample(rng),
            _ => 0.0,
        }
    }
}

/// A simulated panel together with the volatility states needed to
/// bootstrap true conditional quantiles.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub spec: DgpSpec,
    pub params: Vec<StockParams>,
    pub panel: Panel,
    /// Market variance for the first day of month `m + 1`, known at the end
    /// of month `m`.
    pub market_var_next: Vec<f64>,
    /// `stock_var_next[m * n_stocks + i]`: idiosyncratic variance for the
    /// first day of month `m + 1`.
    pub stock_var_next: Vec<f64>,
}

impl Simulation {
    pub fn n_months(&self) -> usize {
        self.spec.n_months()
    }

    /// Index of the last day of month `m`.
    pub fn month_end(&self, m: usize) -> usize {
        (m + 1) * self.spec.days_per_month - 1
    }

    /// `√Σ r²` over the days of month `m` for stock `i`.
    pub fn realized_vol(&self, i: usize, m: usize) -> f64 {
        let d = self.spec.days_per_month;
        (m * d..(m + 1) * d)
            .map(|t| self.panel.ret(t, i).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Cumulative return of stock `i` over month `m`, truncated to the
    /// monthly bounds.
    pub fn monthly_return(&self, i: usize, m: usize) -> f64 {
        let d = self.spec.days_per_month;
        let g: f64 = (m * d..(m + 1) * d).map(|t| 1.0 + self.panel.ret(t, i)).product();
        (g - 1.0).clamp(self.spec.monthly_bounds.0, self.spec.monthly_bounds.1)
    }
}

/// Runs the data-generating process. The market path comes from stream 0 of
/// `seed` and stock `i` from stream `i + 1`, so stocks simulate in parallel
/// without changing the output.
///
/// Daily highs and lows are drawn from the range of a Brownian bridge with
/// the day's diffusive variance between the previous close and the close.
pub fn simulate_panel(spec: &DgpSpec, params: &[StockParams], seed: u64) -> Result<Simulation> {
    spec.validate()?;
    if params.len() != spec.n_stocks {
        return Err(Error::Dimension {
            context: "stock parameters",
            expected: spec.n_stocks,
            got: params.len(),
        });
    }
    for p in params {
        p.garch().validate()?;
    }
    let n = spec.n_stocks;
    let days = spec.n_days();
    let burn = spec.burn_in_days;
    let total = burn + days;
    let dpm = spec.days_per_month;

    let mkt = spec.market;
    let mshock = UnitShock::new(mkt.df)?;
    let mut rng = crate::stream_rng(seed, 0);
    let mut m_ret = Vec::with_capacity(total);
    let mut m_var = Vec::with_capacity(total);
    let mut s2 = spec.market_initial_vol.powi(2);
    for _ in 0..total {
        let eps = s2.sqrt() * mshock.sample(&mut rng);
        m_ret.push(mkt.mu + eps);
        m_var.push(s2);
        s2 = mkt.next_variance(eps, s2);
    }
    let month_ends: Vec<usize> = (0..spec.n_months()).map(|m| burn + (m + 1) * dpm - 1).collect();
    let market_var_next: Vec<f64> = month_ends
        .iter()
        .map(|&t| {
            if t + 1 < total {
                m_var[t + 1]
            } else {
                mkt.next_variance(m_ret[t] - mkt.mu, m_var[t])
            }
        })
        .collect();

    let jumps = Jumps::new(spec)?;
    let (lo, hi) = spec.daily_bounds;
    struct StockPath {
        ret: Vec<f64>,
        high: Vec<f64>,
        low: Vec<f64>,
        var_next: Vec<f64>,
    }
    let stocks: Vec<StockPath> = params
        .par_iter()
        .enumerate()
        .map(|(i, p)| -> Result<StockPath> {
            let g = p.garch();
            let shock = UnitShock::new(p.df)?;
            let mut rng = crate::stream_rng(seed, i as u64 + 1);
            let mut s2 = p.unconditional_variance();
            let mut price = 1.0;
            let mut out = StockPath {
                ret: Vec::with_capacity(days),
                high: Vec::with_capacity(days),
                low: Vec::with_capacity(days),
                var_next: Vec::with_capacity(spec.n_months()),
            };
            for t in 0..total {
                let e = s2.sqrt() * shock.sample(&mut rng);
                let r = (p.beta_mkt * m_ret[t] + e + jumps.sample(&mut rng)).clamp(lo, hi);
                let diffusive = p.beta_mkt * p.beta_mkt * m_var[t] + s2;
                let b = r.ln_1p();
                let u: f64 = 1.0 - rng.random::<f64>();
                let v: f64 = 1.0 - rng.random::<f64>();
                s2 = g.next_variance(e, s2);
                if t < burn {
                    continue;
                }
                let up = 0.5 * (b + (b * b - 2.0 * diffusive * u.ln()).sqrt());
                let down = 0.5 * (b - (b * b - 2.0 * diffusive * v.ln()).sqrt());
                out.ret.push(r);
                out.high.push(price * up.exp());
                out.low.push(price * down.exp());
                price *= 1.0 + r;
                // Keep prices in a representable range over long runs.
                if !(1e-100..=1e100).contains(&price) {
                    price = 1.0;
                }
                if (t - burn + 1).is_multiple_of(dpm) {
                    out.var_next.push(s2);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut returns = vec![0.0; days * n];
    let mut high = vec![0.0; days * n];
    let mut low = vec![0.0; days * n];
    let mut stock_var_next = vec![0.0; spec.n_months() * n];
    for (i, s) in stocks.iter().enumerate() {
        for t in 0..days {
            returns[t * n + i] = s.ret[t];
            high[t * n + i] = s.high[t];
            low[t * n + i] = s.low[t];
        }
        for (m, &v) in s.var_next.iter().enumerate() {
            stock_var_next[m * n + i] = v;
        }
    }
    let mut panel = Panel::from_returns(
        (0..days as i64).collect(),
        (0..n).map(|i| format!("s{i:05}")).collect(),
        returns,
    )?;
    panel.high = Some(high);
    panel.low = Some(low);
    Ok(Simulation {
        spec: *spec,
        params: params.to_vec(),
        panel,
        market_var_next,
        stock_var_next,
    })
}

/// True quantiles of one stock-month.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueQuantiles {
    pub stock: usize,
    /// Month whose return is described; the state is taken at the end of
    /// the previous month.
    pub month: usize,
    pub quantiles: Vec<f64>,
    pub paths: usize,
    /// Realized volatility of the month exceeded one.
    pub excluded: bool,
}

/// Simulated 22-day cumulative returns of every stock in `stocks` for month
/// `month` (≥ 1), starting from the states at the end of month `month − 1`.
/// One set of market paths is shared by all stocks of the month.
pub fn bootstrap_month(
    sim: &Simulation,
    month: usize,
    stocks: &[usize],
    paths: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if month == 0 || month >= sim.n_months() {
        return Err(Error::Input(format!("month {month} has no preceding state")));
    }
    let spec = &sim.spec;
    let d = spec.days_per_month;
    let n = spec.n_stocks;
    let mkt = spec.market;
    let mshock = UnitShock::new(mkt.df)?;
    let month_seed = seed ^ (month as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = crate::stream_rng(month_seed, 0);
    let mut market = vec![0.0; paths * d];
    let mut market_var = vec![0.0; paths * d];
    for p in 0..paths {
        let mut s2 = sim.market_var_next[month - 1];
        for k in 0..d {
            let eps = s2.sqrt() * mshock.sample(&mut rng);
            market[p * d + k] = mkt.mu + eps;
            market_var[p * d + k] = s2;
            s2 = mkt.next_variance(eps, s2);
        }
    }
    let jumps = Jumps::new(spec)?;
    let (lo, hi) = spec.daily_bounds;
    let (mlo, mhi) = spec.monthly_bounds;
    stocks
        .par_iter()
        .map(|&i| -> Result<Vec<f64>> {
            let sp = sim.params[i];
            let g = sp.garch();
            let shock = UnitShock::new(sp.df)?;
            let mut rng = crate::stream_rng(month_seed, i as u64 + 1);
            let start = sim.stock_var_next[(month - 1) * n + i];
            Ok((0..paths)
                .map(|p| {
                    let mut s2 = start;
                    let mut growth = 1.0;
                    for k in 0..d {
                        let e = s2.sqrt() * shock.sample(&mut rng);
                        let r = (sp.beta_mkt * market[p * d + k] + e + jumps.sample(&mut rng)).clamp(lo, hi);
                        growth *= 1.0 + r;
                        s2 = g.next_variance(e, s2);
                    }
                    (growth - 1.0).clamp(mlo, mhi)
                })
                .collect())
        })
        .collect()
}

/// Bootstrapped true quantiles for the given stocks and month.
pub fn true_quantiles(
    sim: &Simulation,
    month: usize,
    stocks: &[usize],
    taus: &TauGrid,
    paths: usize,
    seed: u64,
) -> Result<Vec<TrueQuantiles>> {
    let sims = bootstrap_month(sim, month, stocks, paths, seed)?;
    Ok(stocks
        .iter()
        .zip(sims)
        .map(|(&i, mut s)| {
            s.sort_by(f64::total_cmp);
            TrueQuantiles {
                stock: i,
                month,
                quantiles: taus.levels().iter().map(|&t| quantile_sorted(&s, t)).collect(),
                paths,
                excluded: sim.realized_vol(i, month) > 1.0,
            }
        })
        .collect())
}

/// Writes `stock_id,month,tau,q_true` rows; excluded stock-months are left
/// out.
pub fn write_true_quantiles<W: Write>(
    sim: &Simulation,
    rows: &[TrueQuantiles],
    taus: &TauGrid,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["stock_id", "month", "tau", "q_true"])?;
    for r in rows.iter().filter(|r| !r.excluded) {
        for (t, q) in taus.levels().iter().zip(&r.quantiles) {
            w.write_record([
                sim.panel.stocks[r.stock].as_str(),
                &r.month.to_string(),
                &fmt_f64(*t),
                &fmt_f64(*q),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
