//! Price-derived features.
//!
//! Every stock gets a block of volatility estimates (EWMA at several decays,
//! downside EWMA, trailing realised volatility, Parkinson range volatility),
//! each divided by its cross-sectional mean on the date. Market-level inputs
//! are the cross-sectional averages of the same estimates, and the
//! cross-sectional mean return is tracked by EWMAs scaled by σ̄, the average
//! stock volatility that also scales the labels. Opaque `feat_*` panel
//! columns are rank-normalised per date. Everything at date `t` depends on
//! data up to `t` only.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{fmt_f64, Calendar, Panel};
use crate::stats::average_ranks;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub ewma_lambdas: Vec<f64>,
    pub negative_lambdas: Vec<f64>,
    /// Trailing realised-volatility windows in months.
    pub trailing_months: Vec<usize>,
    pub days_per_month: usize,
    pub parkinson_window: usize,
    /// Additional EWMA decays filling out the volatility block.
    pub extra_lambdas: Vec<f64>,
    pub mean_lambdas: Vec<f64>,
    /// Decay of the EWMA volatility averaged into σ̄.
    pub sigma_bar_lambda: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            ewma_lambdas: vec![0.8, 0.9, 0.94, 0.96, 0.98, 0.99],
            negative_lambdas: vec![0.8, 0.9, 0.94],
            trailing_months: vec![3, 6, 12],
            days_per_month: 22,
            parkinson_window: 22,
            extra_lambdas: vec![0.85, 0.92, 0.95, 0.97, 0.995],
            mean_lambdas: vec![0.9, 0.94, 0.96, 0.99, 0.999],
            sigma_bar_lambda: 0.94,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = self
            .ewma_lambdas
            .iter()
            .chain(&self.negative_lambdas)
            .chain(&self.extra_lambdas)
            .chain(&self.mean_lambdas)
            .chain(std::iter::once(&self.sigma_bar_lambda));
        for &l in lambdas {
            if !(l > 0.0 && l < 1.0) {
                return Err(Error::Config(format!("decay {l} outside (0,1)")));
            }
        }
        if self.days_per_month == 0 || self.parkinson_window == 0 || self.trailing_months.contains(&0) {
            return Err(Error::Config("feature windows must be positive".into()));
        }
        Ok(())
    }
}

/// EWMA volatility `σ²_t = λ σ²_{t-1} + (1-λ) r²_t`, started at the first
/// squared return. Missing returns give `NaN` and leave the state alone.
pub fn ewma_vol(returns: &[f64], lambda: f64) -> Vec<f64> {
    ewma_var_by(returns, lambda, |r| r * r)
        .into_iter()
        .map(f64::sqrt)
        .collect()
}

/// EWMA volatility of the negative part of returns.
pub fn ewma_negative_vol(returns: &[f64], lambda: f64) -> Vec<f64> {
    ewma_var_by(returns, lambda, |r| if r < 0.0 { r * r } else { 0.0 })
        .into_iter()
        .map(f64::sqrt)
        .collect()
}

fn ewma_var_by(returns: &[f64], lambda: f64, sq: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut state: Option<f64> = None;
    returns
        .iter()
        .map(|&r| {
            if r.is_nan() {
                return f64::NAN;
            }
            let s = match state {
                None => sq(r),
                Some(prev) => lambda * prev + (1.0 - lambda) * sq(r),
            };
            state = Some(s);
            s
        })
        .collect()
}

/// Trailing realised volatility `sqrt(mean r²)` over the last `window`
/// dates; needs at least half the window observed.
pub fn trailing_vol(returns: &[f64], window: usize) -> Vec<f64> {
    trailing_mean_by(returns, window, |r| r * r)
        .into_iter()
        .map(f64::sqrt)
        .collect()
}

fn trailing_mean_by(xs: &[f64], window: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let min_obs = window.div_ceil(2).max(1);
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut out = Vec::with_capacity(xs.len());
    for t in 0..xs.len() {
        if !xs[t].is_nan() {
            sum += f(xs[t]);
            count += 1;
        }
        if t >= window && !xs[t - window].is_nan() {
            sum -= f(xs[t - window]);
            count -= 1;
        }
        if xs[t].is_nan() || count < min_obs {
            out.push(f64::NAN);
        } else {
            out.push((sum / count as f64).max(0.0));
        }
    }
    out
}

/// Parkinson range volatility `sqrt(Σ ln(h/l)² / (4 ln2 W))` over a
/// trailing window.
pub fn parkinson_vol(high: &[f64], low: &[f64], window: usize) -> Result<Vec<f64>> {
    if high.len() != low.len() {
        return Err(Error::Dimension {
            context: "parkinson_vol",
            expected: high.len(),
            got: low.len(),
        });
    }
    let mut ln_range = Vec::with_capacity(high.len());
    for (&h, &l) in high.iter().zip(low) {
        if h.is_nan() || l.is_nan() {
            ln_range.push(f64::NAN);
            continue;
        }
        if !(h > 0.0 && l > 0.0) || h < l {
            return Err(Error::Input(format!("invalid high/low pair ({h}, {l})")));
        }
        ln_range.push((h / l).ln());
    }
    let scale = 1.0 / (4.0 * std::f64::consts::LN_2);
    Ok(trailing_mean_by(&ln_range, window, |x| x * x)
        .into_iter()
        .map(|m| (scale * m).sqrt())
        .collect())
}

/// Equal-weighted mean of the available stock volatilities.
pub fn sigma_bar(vols: &[f64]) -> Result<f64> {
    let (s, n) = vols
        .iter()
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return Err(Error::Data(
            "no stock volatility available for the cross-section".into(),
        ));
    }
    Ok(s / n as f64)
}

/// EWMAs of the lagged cross-sectional mean return,
/// `μ_t = λ μ_{t-1} + (1-λ) mean_i r_{i,t-1}`, one series per decay. The
/// first available mean starts the recursion; earlier values are zero.
pub fn market_mean_ewma(panel: &Panel, lambdas: &[f64]) -> Vec<Vec<f64>> {
    let xs_mean: Vec<f64> = (0..panel.n_dates())
        .map(|t| {
            let (s, n) = panel
                .cross_section(t)
                .iter()
                .filter(|r| !r.is_nan())
                .fold((0.0, 0usize), |(s, n), r| (s + r, n + 1));
            if n == 0 {
                f64::NAN
            } else {
                s / n as f64
            }
        })
        .collect();
    lambdas
        .iter()
        .map(|&lambda| {
            let mut mu: Option<f64> = None;
            let mut out = Vec::with_capacity(xs_mean.len());
            for t in 0..xs_mean.len() {
                if t > 0 && !xs_mean[t - 1].is_nan() {
                    let m = xs_mean[t - 1];
                    mu = Some(match mu {
                        None => m,
                        Some(prev) => lambda * prev + (1.0 - lambda) * m,
                    });
                }
                out.push(mu.unwrap_or(0.0));
            }
            out
        })
        .collect()
}

/// Cross-sectional ranks mapped to `(rank - 0.5) / n` with average ranks for
/// ties; missing values become the median level 0.5.
pub fn rank_normalize(values: &[f64]) -> Vec<f64> {
    let present: Vec<usize> = (0..values.len()).filter(|&i| !values[i].is_nan()).collect();
    let mut out = vec![0.5; values.len()];
    if present.is_empty() {
        return out;
    }
    let sub: Vec<f64> = present.iter().map(|&i| values[i]).collect();
    let ranks = average_ranks(&sub);
    let n = sub.len() as f64;
    for (k, &i) in present.iter().enumerate() {
        out[i] = (ranks[k] - 0.5) / n;
    }
    out
}

/// Divides by the cross-sectional mean of the present values and imputes
/// missing ones with the cross-sectional median of the rescaled values.
pub fn rescale_by_mean(values: &mut [f64]) {
    let present: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if present.is_empty() {
        values.iter_mut().for_each(|v| *v = 1.0);
        return;
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    if mean > 0.0 {
        values.iter_mut().filter(|v| v.is_finite()).for_each(|v| *v /= mean);
    } else {
        values.iter_mut().filter(|v| v.is_finite()).for_each(|v| *v = 1.0);
    }
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    let med = crate::stats::quantile_sorted(&sorted, 0.5);
    values.iter_mut().filter(|v| !v.is_finite()).for_each(|v| *v = med);
}

/// Cumulative return over the `horizon` dates after each date,
/// `Π(1 + r) - 1` clipped to `[-1, 20]`; `NaN` if any return is missing or
/// the window runs past the panel.
pub fn forward_returns(panel: &Panel, horizon: usize) -> Vec<f64> {
    forward_by(
        panel,
        horizon,
        |acc, r| acc * (1.0 + r),
        1.0,
        |g| (g - 1.0).clamp(-1.0, 20.0),
    )
}

/// Realised volatility `sqrt(Σ r²)` over the `horizon` dates after each date.
pub fn forward_realized_vol(panel: &Panel, horizon: usize) -> Vec<f64> {
    forward_by(panel, horizon, |acc, r| acc + r * r, 0.0, f64::sqrt)
}

fn forward_by(
    panel: &Panel,
    horizon: usize,
    step: impl Fn(f64, f64) -> f64,
    init: f64,
    finish: impl Fn(f64) -> f64,
) -> Vec<f64> {
    let (nt, n) = (panel.n_dates(), panel.n_stocks());
    let mut out = vec![f64::NAN; nt * n];
    for t in 0..nt {
        if t + horizon >= nt {
            break;
        }
        for i in 0..n {
            let mut acc = init;
            let mut ok = true;
            for s in t + 1..=t + horizon {
                let r = panel.ret(s, i);
                if r.is_nan() {
                    ok = false;
                    break;
                }
                acc = step(acc, r);
            }
            if ok {
                out[t * n + i] = finish(acc);
            }
        }
    }
    out
}

/// Indices of the last date of each calendar month.
pub fn month_end_indices(dates: &[i64], calendar: &Calendar) -> Vec<usize> {
    (0..dates.len())
        .filter(|&t| t + 1 == dates.len() || calendar.month(dates[t + 1]) != calendar.month(dates[t]))
        .collect()
}

/// Model inputs for every (date, stock).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub dates: Vec<i64>,
    pub stocks: Vec<String>,
    pub stock_names: Vec<String>,
    /// `stock_x[(t * n_stocks + i) * width + k]`.
    pub stock_x: Vec<f64>,
    pub market_names: Vec<String>,
    /// `market_z[t * market_width + k]`.
    pub market_z: Vec<f64>,
    /// σ̄ per date; `NaN` before any volatility is available.
    pub sigma_bar: Vec<f64>,
    /// Whether the stock has a return on the date.
    pub active: Vec<bool>,
}

impl FeatureTable {
    pub fn width(&self) -> usize {
        self.stock_names.len()
    }

    pub fn market_width(&self) -> usize {
        self.market_names.len()
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_stocks(&self) -> usize {
        self.stocks.len()
    }

    pub fn x(&self, t: usize, i: usize) -> &[f64] {
        let w = self.width();
        let c = t * self.stocks.len() + i;
        &self.stock_x[c * w..(c + 1) * w]
    }

    pub fn z(&self, t: usize) -> &[f64] {
        let m = self.market_width();
        &self.market_z[t * m..(t + 1) * m]
    }

    /// Wide CSV: `date,stock_id,<stock features>,mkt_<market features>,sigma_bar`
    /// for active cells.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["date".to_string(), "stock_id".into()];
        header.extend(self.stock_names.iter().cloned());
        header.extend(self.market_names.iter().map(|n| format!("mkt_{n}")));
        header.push("sigma_bar".into());
        w.write_record(&header)?;
        let n = self.stocks.len();
        for t in 0..self.dates.len() {
            for i in 0..n {
                if !self.active[t * n + i] {
                    continue;
                }
                let mut rec = vec![self.dates[t].to_string(), self.stocks[i].clone()];
                rec.extend(self.x(t, i).iter().map(|v| fmt_f64(*v)));
                rec.extend(self.z(t).iter().map(|v| fmt_f64(*v)));
                rec.push(fmt_f64(self.sigma_bar[t]));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 3
            || &headers[0] != "date"
            || &headers[1] != "stock_id"
            || &headers[headers.len() - 1] != "sigma_bar"
        {
            return Err(Error::Data("feature CSV needs date,stock_id,...,sigma_bar".into()));
        }
        let names: Vec<String> = headers
            .iter()
            .skip(2)
            .take(headers.len() - 3)
            .map(String::from)
            .collect();
        let stock_names: Vec<String> = names.iter().filter(|n| !n.starts_with("mkt_")).cloned().collect();
        let market_names: Vec<String> = names
            .iter()
            .filter_map(|n| n.strip_prefix("mkt_").map(String::from))
            .collect();
        if names[..stock_names.len()].iter().any(|n| n.starts_with("mkt_")) {
            return Err(Error::Data("stock feature columns must precede mkt_ columns".into()));
        }
        let mut rows: Vec<(i64, String, Vec<f64>)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let date = rec[0]
                .parse::<i64>()
                .map_err(|_| Error::Data(format!("bad date {:?}", &rec[0])))?;
            let vals = rec
                .iter()
                .skip(2)
                .map(|s| {
                    if s.is_empty() {
                        Ok(f64::NAN)
                    } else {
                        s.parse::<f64>().map_err(|_| Error::Data(format!("bad value {s:?}")))
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push((date, rec[1].to_string(), vals));
        }
        let mut dates: Vec<i64> = rows.iter().map(|r| r.0).collect();
        dates.sort_unstable();
        dates.dedup();
        let mut stocks: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
        stocks.sort();
        stocks.dedup();
        let (nt, n, w, m) = (dates.len(), stocks.len(), stock_names.len(), market_names.len());
        let mut t_out = Self {
            dates,
            stocks,
            stock_names,
            stock_x: vec![f64::NAN; nt * n * w],
            market_names,
            market_z: vec![f64::NAN; nt * m],
            sigma_bar: vec![f64::NAN; nt],
            active: vec![false; nt * n],
        };
        for (date, stock, vals) in rows {
            let t = t_out.dates.binary_search(&date).expect("date collected above");
            let i = t_out.stocks.binary_search(&stock).expect("stock collected above");
            let c = t * n + i;
            t_out.active[c] = true;
            t_out.stock_x[c * w..(c + 1) * w].copy_from_slice(&vals[..w]);
            t_out.market_z[t * m..(t + 1) * m].copy_from_slice(&vals[w..w + m]);
            t_out.sigma_bar[t] = vals[w + m];
        }
        Ok(t_out)
    }
}

/// Builds the feature table of a panel.
pub fn build_features(panel: &Panel, cfg: &FeatureConfig) -> Result<FeatureTable> {
    cfg.validate()?;
    let (nt, n) = (panel.n_dates(), panel.n_stocks());
    // Raw volatility columns, each date-major.
    let mut vol_names = Vec::new();
    let mut vols: Vec<Vec<f64>> = Vec::new();
    let series: Vec<Vec<f64>> = (0..n).map(|i| panel.series(i)).collect();
    let mut push_col = |name: String, per_stock: &dyn Fn(&[f64], usize) -> Result<Vec<f64>>| -> Result<()> {
        let mut col = vec![f64::NAN; nt * n];
        for (i, s) in series.iter().enumerate() {
            let v = per_stock(s, i)?;
            for t in 0..nt {
                col[t * n + i] = v[t];
            }
        }
        vol_names.push(name);
        vols.push(col);
        Ok(())
    };
    for &l in &cfg.ewma_lambdas {
        push_col(format!("ewma_vol_{l}"), &|s, _| Ok(ewma_vol(s, l)))?;
    }
    for &l in &cfg.negative_lambdas {
        push_col(format!("ewma_negvol_{l}"), &|s, _| Ok(ewma_negative_vol(s, l)))?;
    }
    for &mo in &cfg.trailing_months {
        let w = mo * cfg.days_per_month;
        push_col(format!("total_vol_{mo}m"), &|s, _| Ok(trailing_vol(s, w)))?;
    }
    if let (Some(h), Some(l)) = (&panel.high, &panel.low) {
        push_col("parkinson_vol".into(), &|_, i| {
            parkinson_vol(
                &crate::panel::column(h, n, i),
                &crate::panel::column(l, n, i),
                cfg.parkinson_window,
            )
        })?;
    }
    for &l in &cfg.extra_lambdas {
        push_col(format!("ewma_vol_{l}"), &|s, _| Ok(ewma_vol(s, l)))?;
    }
    let sb_vol: Vec<Vec<f64>> = series.iter().map(|s| ewma_vol(s, cfg.sigma_bar_lambda)).collect();

    let active: Vec<bool> = panel.returns.iter().map(|r| !r.is_nan()).collect();
    let sigma_bar_series: Vec<f64> = (0..nt)
        .map(|t| {
            let xs: Vec<f64> = (0..n).filter(|&i| active[t * n + i]).map(|i| sb_vol[i][t]).collect();
            sigma_bar(&xs).unwrap_or(f64::NAN)
        })
        .collect();

    let n_vol = vols.len();
    let market_names = vol_names.clone();
    let mut market_z = vec![f64::NAN; nt * n_vol];
    for (k, col) in vols.iter().enumerate() {
        for t in 0..nt {
            let xs: Vec<f64> = (0..n).filter(|&i| active[t * n + i]).map(|i| col[t * n + i]).collect();
            market_z[t * n_vol + k] = sigma_bar(&xs).unwrap_or(f64::NAN);
        }
    }

    let means = market_mean_ewma(panel, &cfg.mean_lambdas);
    let mut stock_names = vol_names;
    stock_names.extend(cfg.mean_lambdas.iter().map(|l| format!("xs_mean_ewma_{l}")));
    stock_names.extend(panel.features.iter().map(|(name, _)| name.clone()));
    let w = stock_names.len();
    let mut stock_x = vec![f64::NAN; nt * n * w];
    let mut buf = vec![0.0; n];
    for t in 0..nt {
        let cells: Vec<usize> = (0..n).filter(|&i| active[t * n + i]).collect();
        let mut write = |k: usize, vals: &[f64]| {
            for (j, &i) in cells.iter().enumerate() {
                stock_x[(t * n + i) * w + k] = vals[j];
            }
        };
        for (k, col) in vols.iter().enumerate() {
            let mut v: Vec<f64> = cells.iter().map(|&i| col[t * n + i]).collect();
            rescale_by_mean(&mut v);
            write(k, &v);
        }
        let sb = sigma_bar_series[t];
        for (j, m) in means.iter().enumerate() {
            let v = if sb > 0.0 { m[t] / sb } else { 0.0 };
            buf.clear();
            buf.resize(cells.len(), v);
            write(n_vol + j, &buf);
        }
        for (j, (_, col)) in panel.features.iter().enumerate() {
            let v: Vec<f64> = cells.iter().map(|&i| col[t * n + i]).collect();
            write(n_vol + means.len() + j, &rank_normalize(&v));
        }
    }

    Ok(FeatureTable {
        dates: panel.dates.clone(),
        stocks: panel.stocks.clone(),
        stock_names,
        stock_x,
        market_names,
        market_z,
        sigma_bar: sigma_bar_series,
        active,
    })
}
