//! Forecast evaluation: average quantile loss, CRPS, Diebold-Mariano tests
//! on cross-sectional average losses, out-of-sample R² and volatility
//! errors.
//!
//! Forecast records are joined to realisations on `(stock, date)`, where
//! the realisation is the return over the horizon following the forecast
//! date.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::density::{eval_cdf, fit_pdf, DensityOptions, QuantileGrid};
use crate::error::{Error, Result};
use crate::panel::Panel;
use crate::qnn::{rho, ForecastRecord};
use crate::stats::{mean, newey_west_lrv};
use crate::taus::TauGrid;

/// Realised value per `(stock, date)`.
pub type Realized = HashMap<(String, i64), f64>;

/// Forward cumulative returns of a panel keyed for joins.
pub fn realized_returns(panel: &Panel, horizon: usize) -> Realized {
    keyed(panel, &crate::features::forward_returns(panel, horizon))
}

/// Forward realised volatility `√Σ r²` keyed for joins.
pub fn realized_vols(panel: &Panel, horizon: usize) -> Realized {
    keyed(panel, &crate::features::forward_realized_vol(panel, horizon))
}

fn keyed(panel: &Panel, values: &[f64]) -> Realized {
    let n = panel.n_stocks();
    let mut out = HashMap::new();
    for (t, &d) in panel.dates.iter().enumerate() {
        for (i, s) in panel.stocks.iter().enumerate() {
            let v = values[t * n + i];
            if v.is_finite() {
                out.insert((s.clone(), d), v);
            }
        }
    }
    out
}

/// Cross-sectional mean losses per forecast date.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossPanel {
    pub dates: Vec<i64>,
    /// Mean over stocks of the τ-averaged pinball loss.
    pub by_date: Vec<f64>,
    /// Mean over stocks of the pinball loss, per τ.
    pub by_date_tau: Vec<Vec<f64>>,
    /// Records without a realisation; they are excluded.
    pub missing: usize,
}

impl LossPanel {
    /// Time-series average of `by_date`.
    pub fn average(&self) -> f64 {
        mean(&self.by_date)
    }

    /// Time-series averages of the τ-specific losses.
    pub fn per_tau(&self) -> Vec<f64> {
        let k = self.by_date_tau.first().map_or(0, Vec::len);
        (0..k)
            .map(|j| mean(&self.by_date_tau.iter().map(|v| v[j]).collect::<Vec<_>>()))
            .collect()
    }
}

/// Pinball losses of raw quantile forecasts.
pub fn loss_panel(records: &[ForecastRecord], realized: &Realized, taus: &TauGrid) -> Result<LossPanel> {
    let k = taus.len();
    let mut acc: BTreeMap<i64, (Vec<f64>, usize)> = BTreeMap::new();
    let mut missing = 0;
    for r in records {
        if r.q_raw.len() != k {
            return Err(Error::Dimension {
                context: "forecast quantiles",
                expected: k,
                got: r.q_raw.len(),
            });
        }
        let Some(&y) = realized.get(&(r.stock.clone(), r.date)) else {
            missing += 1;
            continue;
        };
        let e = acc.entry(r.date).or_insert_with(|| (vec![0.0; k], 0));
        for (j, (&t, &q)) in taus.levels().iter().zip(&r.q_raw).enumerate() {
            e.0[j] += rho(t, y - q);
        }
        e.1 += 1;
    }
    if acc.is_empty() {
        return Err(Error::Data(format!(
            "no forecast has a realisation ({missing} missing)"
        )));
    }
    if missing > 0 {
        log::warn!("{missing} forecast records without realisation excluded");
    }
    let mut out = LossPanel {
        dates: Vec::with_capacity(acc.len()),
        by_date: Vec::with_capacity(acc.len()),
        by_date_tau: Vec::with_capacity(acc.len()),
        missing,
    };
    for (d, (sums, n)) in acc {
        let per: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
        out.dates.push(d);
        out.by_date.push(mean(&per));
        out.by_date_tau.push(per);
    }
    Ok(out)
}

/// Average quantile loss ×100.
pub fn avg_quantile_loss(records: &[ForecastRecord], realized: &Realized, taus: &TauGrid) -> Result<f64> {
    Ok(100.0 * loss_panel(records, realized, taus)?.average())
}

/// Number of uniform grid points between the outermost quantiles.
pub const CRPS_GRID: usize = 4096;
/// Integration bounds of the CRPS tails.
pub const CRPS_BOUNDS: (f64, f64) = (-1.0, 20.0);

/// `∫ (F(x) − 1{y ≤ x})² dx` for the spline CDF of a quantile forecast.
/// The CDF is evaluated on a uniform grid over the fitted support; outside
/// it F is held at its boundary values up to the bounds `[−1, 20]`.
pub fn crps(taus: &[f64], quantiles: &[f64], y: f64) -> Result<f64> {
    let g = QuantileGrid::new(taus.to_vec(), quantiles.to_vec())?;
    let d = fit_pdf(&g, &DensityOptions::default())?;
    let (lo, hi) = CRPS_BOUNDS;
    let y = y.clamp(lo, hi);
    let (a, b) = (d.x_min.max(lo), d.x_max.min(hi));
    let f_lo = eval_cdf(&d, d.x_min);
    let f_hi = eval_cdf(&d, d.x_max);
    // Constant F on [u, v]: split at y.
    let flat = |u: f64, v: f64, f: f64| -> f64 {
        if v <= u {
            return 0.0;
        }
        let cut = y.clamp(u, v);
        f * f * (cut - u) + (1.0 - f).powi(2) * (v - cut)
    };
    let mut total = flat(lo, a, f_lo) + flat(b, hi, f_hi);
    if b > a {
        let n = CRPS_GRID;
        let h = (b - a) / (n - 1) as f64;
        let xs: Vec<f64> = (0..n).map(|j| if j + 1 == n { b } else { a + h * j as f64 }).collect();
        let fs: Vec<f64> = xs.iter().map(|&x| eval_cdf(&d, x)).collect();
        for j in 0..n - 1 {
            let (x0, x1, f0, f1) = (xs[j], xs[j + 1], fs[j], fs[j + 1]);
            let seg =
                |u: f64, v: f64, fu: f64, fv: f64, ind: f64| 0.5 * (v - u) * ((fu - ind).powi(2) + (fv - ind).powi(2));
            if y <= x0 {
                total += seg(x0, x1, f0, f1, 1.0);
            } else if y >= x1 {
                total += seg(x0, x1, f0, f1, 0.0);
            } else {
                let fy = f0 + (f1 - f0) * (y - x0) / (x1 - x0);
                total += seg(x0, y, f0, fy, 0.0) + seg(y, x1, fy, f1, 1.0);
            }
        }
    }
    Ok(total)
}

/// Per-date cross-sectional mean CRPS and its time-series average.
pub fn crps_panel(
    records: &[ForecastRecord],
    realized: &Realized,
    taus: &TauGrid,
) -> Result<(Vec<i64>, Vec<f64>, f64)> {
    let mut acc: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for r in records {
        let Some(&y) = realized.get(&(r.stock.clone(), r.date)) else {
            continue;
        };
        let c = crps(taus.levels(), &r.q_raw, y)?;
        let e = acc.entry(r.date).or_insert((0.0, 0));
        e.0 += c;
        e.1 += 1;
    }
    if acc.is_empty() {
        return Err(Error::Data("no forecast has a realisation".into()));
    }
    let dates: Vec<i64> = acc.keys().copied().collect();
    let vals: Vec<f64> = acc.values().map(|(s, n)| s / *n as f64).collect();
    let avg = mean(&vals);
    Ok((dates, vals, avg))
}

/// Diebold-Mariano comparison of two loss series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DmResult {
    /// `None` when the loss differential has zero long-run variance.
    pub statistic: Option<f64>,
    pub mean_diff: f64,
    pub se: Option<f64>,
    pub lags: usize,
    pub n: usize,
}

impl DmResult {
    pub fn is_degenerate(&self) -> bool {
        self.statistic.is_none()
    }
}

/// DM statistic of `d_t = a_t − b_t`: `mean(d) / √(NW(d)/T)` with Bartlett
/// weights `1 − l/(L+1)`. Positive values favour `b`.
pub fn dm_test(a: &[f64], b: &[f64], lags: usize) -> Result<DmResult> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            context: "DM loss series",
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() <= lags {
        return Err(Error::Input(format!(
            "DM needs more than {lags} observations, got {}",
            a.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&d);
    let lrv = newey_west_lrv(&d, lags);
    let scale = d.iter().fold(0.0f64, |s, x| s.max(x.abs()));
    let (statistic, se) = if lrv > 1e-24 * scale * scale && lrv > 0.0 {
        let se = (lrv / d.len() as f64).sqrt();
        (Some(m / se), Some(se))
    } else {
        (None, None)
    };
    Ok(DmResult {
        statistic,
        mean_diff: m,
        se,
        lags,
        n: d.len(),
    })
}

/// DM test on the dates two loss panels share.
pub fn dm_loss_panels(a: &LossPanel, b: &LossPanel, lags: usize) -> Result<DmResult> {
    let bmap: HashMap<i64, f64> = b.dates.iter().copied().zip(b.by_date.iter().copied()).collect();
    let (mut xa, mut xb) = (Vec::new(), Vec::new());
    for (d, &l) in a.dates.iter().zip(&a.by_date) {
        if let Some(&m) = bmap.get(d) {
            xa.push(l);
            xb.push(m);
        }
    }
    dm_test(&xa, &xb, lags)
}

/// `1 − Σ(r − r̂)² / Σ r²`, against the zero forecast.
pub fn oos_r2(pred: &[f64], realized: &[f64]) -> Result<f64> {
    same_len(pred, realized)?;
    let den: f64 = realized.iter().map(|r| r * r).sum();
    if den == 0.0 {
        return Err(Error::Degenerate("all realisations are zero".into()));
    }
    let num: f64 = pred.iter().zip(realized).map(|(p, r)| (r - p).powi(2)).sum();
    Ok(1.0 - num / den)
}

/// Mean absolute deviation and root mean squared error.
pub fn vol_eval(pred: &[f64], realized: &[f64]) -> Result<(f64, f64)> {
    same_len(pred, realized)?;
    if pred.is_empty() {
        return Err(Error::Input("no volatility forecasts".into()));
    }
    let n = pred.len() as f64;
    let mad = pred.iter().zip(realized).map(|(p, r)| (p - r).abs()).sum::<f64>() / n;
    let mse = pred.iter().zip(realized).map(|(p, r)| (p - r).powi(2)).sum::<f64>() / n;
    Ok((mad, mse.sqrt()))
}

/// RMSE per quantile level between forecast and true quantile vectors.
pub fn quantile_rmse(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Vec<f64>> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Dimension {
            context: "quantile RMSE rows",
            expected: truth.len(),
            got: pred.len(),
        });
    }
    let k = truth[0].len();
    let mut sse = vec![0.0; k];
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != k || t.len() != k {
            return Err(Error::Dimension {
                context: "quantile RMSE columns",
                expected: k,
                got: p.len(),
            });
        }
        for j in 0..k {
            sse[j] += (p[j] - t[j]).powi(2);
        }
    }
    Ok(sse.into_iter().map(|s| (s / pred.len() as f64).sqrt()).collect())
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            context: "aligned series",
            expected: b.len(),
            got: a.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn rec(stock: &str, date: i64, q: Vec<f64>) -> ForecastRecord {
        ForecastRecord {
            stock: stock.into(),
            date,
            q_std: q.clone(),
            q_raw: q,
            sigma_bar: 1.0,
            scale: 1.0,
        }
    }

    #[test]
    fn single_median_example() {
        let taus = TauGrid::new(vec![0.5]).unwrap();
        let mut real = Realized::new();
        real.insert(("a".into(), 1), 1.0);
        let l = avg_quantile_loss(&[rec("a", 1, vec![0.0])], &real, &taus).unwrap();
        assert!((l - 50.0).abs() < 1e-12);
        let perfect = avg_quantile_loss(&[rec("a", 1, vec![1.0])], &real, &taus).unwrap();
        assert_eq!(perfect, 0.0);
    }

    #[test]
    fn loss_matches_triple_loop_and_decomposes() {
        let taus = TauGrid::standard();
        let mut rng = crate::seeded(8);
        let mut recs = Vec::new();
        let mut real = Realized::new();
        for d in 0..7 {
            for s in 0..(3 + d as usize % 3) {
                let mut q: Vec<f64> = (0..taus.len()).map(|_| rng.random_range(-0.5..0.5)).collect();
                q.sort_by(f64::total_cmp);
                recs.push(rec(&format!("s{s}"), d, q));
                real.insert((format!("s{s}"), d), rng.random_range(-0.4..0.6));
            }
        }
        recs.push(rec("ghost", 3, vec![0.0; taus.len()]));
        // Naive: months, then stocks, then levels.
        let mut months = Vec::new();
        for d in 0..7 {
            let rows: Vec<&ForecastRecord> = recs.iter().filter(|r| r.date == d && r.stock != "ghost").collect();
            let mut s = 0.0;
            for r in &rows {
                let y = real[&(r.stock.clone(), d)];
                let mut l = 0.0;
                for (k, &t) in taus.levels().iter().enumerate() {
                    let xi = y - r.q_raw[k];
                    l += if xi >= 0.0 { t * xi } else { (t - 1.0) * xi };
                }
                s += l / taus.len() as f64;
            }
            months.push(s / rows.len() as f64);
        }
        let naive = 100.0 * months.iter().sum::<f64>() / 7.0;
        let lp = loss_panel(&recs, &real, &taus).unwrap();
        assert_eq!(lp.missing, 1);
        assert!((100.0 * lp.average() - naive).abs() < 1e-12);
        let by_tau = mean(&lp.per_tau());
        assert!((by_tau - lp.average()).abs() < 1e-12);
    }

    #[test]
    fn uniform_forecast_crps_is_one_third() {
        let taus = TauGrid::standard();
        let c = crps(taus.levels(), taus.levels(), 0.0).unwrap();
        assert!((c - 1.0 / 3.0).abs() < 1e-3, "{c}");
    }

    #[test]
    fn degenerate_forecast_has_small_crps() {
        let taus = TauGrid::standard();
        let q = vec![0.05; taus.len()];
        let c = crps(taus.levels(), &q, 0.05).unwrap();
        // The spacing repair spreads 37 equal values over 36 · 1e-4.
        assert!(c < 5e-3, "{c}");
    }

    #[test]
    fn crps_against_closed_form_normal() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let taus = TauGrid::standard();
        let sd = 0.1;
        let n = Normal::new(0.0, sd).unwrap();
        let q: Vec<f64> = taus.levels().iter().map(|&t| n.inverse_cdf(t)).collect();
        for y in [-0.15, 0.0, 0.07] {
            let z: f64 = y / sd;
            let exact = sd
                * (z * (2.0 * crate::stats::norm_cdf(z) - 1.0) + 2.0 * crate::stats::norm_pdf(z)
                    - 1.0 / std::f64::consts::PI.sqrt());
            let c = crps(taus.levels(), &q, y).unwrap();
            assert!((c - exact).abs() < 2e-3 * sd, "{y}: {c} vs {exact}");
        }
    }

    #[test]
    fn dm_basics() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        assert!(dm_test(&a, &a, 0).unwrap().is_degenerate());
        let mut rng = crate::seeded(2);
        let x: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
        let r = dm_test(&x, &y, 0).unwrap();
        let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let m = mean(&d);
        let v = d.iter().map(|e| (e - m).powi(2)).sum::<f64>() / 50.0;
        assert!((r.statistic.unwrap() - m / (v / 50.0).sqrt()).abs() < 1e-12);
        let swapped = dm_test(&y, &x, 12).unwrap();
        let orig = dm_test(&x, &y, 12).unwrap();
        assert_eq!(swapped.statistic.unwrap(), -orig.statistic.unwrap());
        assert!(dm_test(&x[..5], &y[..5], 12).is_err());
    }

    #[test]
    fn r2_identities() {
        let r = vec![0.1, -0.2, 0.05];
        assert_eq!(oos_r2(&r, &r).unwrap(), 1.0);
        assert_eq!(oos_r2(&[0.0; 3], &r).unwrap(), 0.0);
        let neg: Vec<f64> = r.iter().map(|x| -x).collect();
        assert!((oos_r2(&neg, &r).unwrap() + 3.0).abs() < 1e-12);
        assert!(oos_r2(&[0.0], &[0.0]).is_err());
    }

    #[test]
    fn vol_errors() {
        let v = vec![0.1, 0.2, 0.3];
        assert_eq!(vol_eval(&v, &v).unwrap(), (0.0, 0.0));
        let shifted: Vec<f64> = v.iter().map(|x| x + 0.05).collect();
        let (mad, rmse) = vol_eval(&shifted, &v).unwrap();
        assert!((mad - 0.05).abs() < 1e-12 && (rmse - 0.05).abs() < 1e-12);
    }
}
