//! Sorting stocks into groups on a forecast and long-short portfolio
//! statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::Realized;
use crate::stats::{mean, newey_west_tstat, sample_sd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Equal,
    /// Weights proportional to the market cap known at the forecast date.
    Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SortSpec {
    pub n_groups: usize,
    pub weighting: Weighting,
    /// Newey-West lags of the t-statistic.
    pub lags: usize,
}

impl Default for SortSpec {
    fn default() -> Self {
        Self {
            n_groups: 10,
            weighting: Weighting::Equal,
            lags: 12,
        }
    }
}

/// Group of every stock by rank of its signal (0 = lowest). Ties keep the
/// input order, and group sizes differ by at most one. `None` when there
/// are fewer finite signals than groups or fewer than two groups.
pub fn decile_sort(signals: &[f64], n_groups: usize) -> Option<Vec<Option<usize>>> {
    let mut idx: Vec<usize> = (0..signals.len()).filter(|&i| signals[i].is_finite()).collect();
    if n_groups < 2 || idx.len() < n_groups {
        return None;
    }
    idx.sort_by(|&a, &b| signals[a].total_cmp(&signals[b]));
    let n = idx.len();
    let mut groups = vec![None; signals.len()];
    for (rank, &i) in idx.iter().enumerate() {
        groups[i] = Some(rank * n_groups / n);
    }
    Some(groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesStats {
    pub mean: f64,
    pub vol: f64,
    /// `mean / vol · √12`; `None` when the volatility is zero.
    pub sharpe: Option<f64>,
    pub t_stat: Option<f64>,
}

fn series_stats(xs: &[f64], lags: usize) -> SeriesStats {
    let m = mean(xs);
    let v = if xs.len() > 1 { sample_sd(xs) } else { f64::NAN };
    let scale = xs.iter().fold(0.0f64, |s, x| s.max(x.abs()));
    let flat = !(v > 1e-12 * scale.max(f64::MIN_POSITIVE));
    SeriesStats {
        mean: m,
        vol: v,
        sharpe: if flat { None } else { Some(m / v * 12f64.sqrt()) },
        t_stat: if flat { None } else { newey_west_tstat(xs, lags) },
    }
}

/// Monthly long (top group), short (bottom group) and long-short returns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PortfolioSeries {
    pub dates: Vec<i64>,
    pub long: Vec<f64>,
    pub short: Vec<f64>,
    pub long_short: Vec<f64>,
    pub long_stats: SeriesStats,
    pub short_stats: SeriesStats,
    pub long_short_stats: SeriesStats,
    /// Dates skipped for having too few stocks.
    pub skipped: Vec<i64>,
}

/// One signal per `(stock, date)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub stock: String,
    pub date: i64,
    pub value: f64,
}

/// Sorts on the signal at every date and holds the extreme groups over the
/// following period. `caps` is required for value weighting.
pub fn backtest(
    signals: &[Signal],
    realized: &Realized,
    caps: Option<&Realized>,
    spec: &SortSpec,
) -> Result<PortfolioSeries> {
    if spec.n_groups < 2 {
        return Err(Error::Config("at least two groups are needed".into()));
    }
    if spec.weighting == Weighting::Value && caps.is_none() {
        return Err(Error::Input("value weighting needs market caps".into()));
    }
    let mut by_date: BTreeMap<i64, Vec<(&str, f64, f64, f64)>> = BTreeMap::new();
    for s in signals {
        let key = (s.stock.clone(), s.date);
        let Some(&r) = realized.get(&key) else { continue };
        let w = match (spec.weighting, caps) {
            (Weighting::Value, Some(c)) => match c.get(&key) {
                Some(&w) if w > 0.0 => w,
                _ => continue,
            },
            _ => 1.0,
        };
        by_date.entry(s.date).or_default().push((&s.stock, s.value, r, w));
    }
    let mut out = PortfolioSeries {
        dates: Vec::new(),
        long: Vec::new(),
        short: Vec::new(),
        long_short: Vec::new(),
        long_stats: series_stats(&[], 0),
        short_stats: series_stats(&[], 0),
        long_short_stats: series_stats(&[], 0),
        skipped: Vec::new(),
    };
    for (date, mut rows) in by_date {
        rows.sort_by(|a, b| a.0.cmp(b.0));
        let sig: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let Some(groups) = decile_sort(&sig, spec.n_groups) else {
            log::warn!(
                "date {date}: {} stocks for {} groups, skipped",
                rows.len(),
                spec.n_groups
            );
            out.skipped.push(date);
            continue;
        };
        let avg = |g: usize| {
            let (mut s, mut w) = (0.0, 0.0);
            for (row, grp) in rows.iter().zip(&groups) {
                if *grp == Some(g) {
                    s += row.3 * row.2;
                    w += row.3;
                }
            }
            s / w
        };
        let (l, sh) = (avg(spec.n_groups - 1), avg(0));
        out.dates.push(date);
        out.long.push(l);
        out.short.push(sh);
        out.long_short.push(l - sh);
    }
    if out.dates.is_empty() {
        return Err(Error::Data("no date has enough stocks to sort".into()));
    }
    out.long_stats = series_stats(&out.long, spec.lags);
    out.short_stats = series_stats(&out.short, spec.lags);
    out.long_short_stats = series_stats(&out.long_short, spec.lags);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn group_sizes() {
        let g = decile_sort(&(0..10).map(|i| i as f64).collect::<Vec<_>>(), 10).unwrap();
        assert_eq!(g, (0..10).map(Some).collect::<Vec<_>>());
        let g = decile_sort(&(0..20).rev().map(|i| i as f64).collect::<Vec<_>>(), 10).unwrap();
        for k in 0..10 {
            assert_eq!(g.iter().filter(|x| **x == Some(k)).count(), 2);
        }
        assert_eq!(g[0], Some(9));
        let g = decile_sort(&(0..23).map(|i| (i % 7) as f64).collect::<Vec<_>>(), 10).unwrap();
        let sizes: Vec<usize> = (0..10).map(|k| g.iter().filter(|x| **x == Some(k)).count()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert!(decile_sort(&[1.0; 9], 10).is_none());
    }

    fn fixture(months: i64, n: usize, seed: u64) -> (Vec<Signal>, Realized) {
        let mut rng = crate::seeded(seed);
        let mut sig = Vec::new();
        let mut real = Realized::new();
        for d in 0..months {
            for i in 0..n {
                let r: f64 = rng.random_range(-0.2..0.2);
                real.insert((format!("s{i:03}"), d), r);
                sig.push(Signal {
                    stock: format!("s{i:03}"),
                    date: d,
                    value: r,
                });
            }
        }
        (sig, real)
    }

    #[test]
    fn perfect_foresight_sort() {
        let (sig, real) = fixture(120, 50, 1);
        let p = backtest(&sig, &real, None, &SortSpec::default()).unwrap();
        for (k, &d) in p.dates.iter().enumerate() {
            let mut rs: Vec<f64> = (0..50).map(|i| real[&(format!("s{i:03}"), d)]).collect();
            rs.sort_by(f64::total_cmp);
            let expect = mean(&rs[45..]) - mean(&rs[..5]);
            assert!((p.long_short[k] - expect).abs() < 1e-12);
            assert!((p.long_short[k] - (p.long[k] - p.short[k])).abs() < 1e-12);
        }
        assert!(p.long_short_stats.t_stat.unwrap() > 3.0);
    }

    #[test]
    fn identical_returns_give_flagged_sharpe() {
        let mut real = Realized::new();
        let mut sig = Vec::new();
        for d in 0..24 {
            for i in 0..10 {
                real.insert((format!("s{i}"), d), 0.01);
                sig.push(Signal {
                    stock: format!("s{i}"),
                    date: d,
                    value: i as f64,
                });
            }
        }
        let p = backtest(&sig, &real, None, &SortSpec::default()).unwrap();
        assert!(p.long_short.iter().all(|&x| x == 0.0));
        assert!(p.long_short_stats.sharpe.is_none());
    }

    #[test]
    fn equal_caps_match_equal_weights_and_monotone_transform_is_invariant() {
        let (sig, real) = fixture(30, 40, 2);
        let caps: Realized = real.keys().map(|k| (k.clone(), 5.0)).collect();
        let ew = backtest(&sig, &real, None, &SortSpec::default()).unwrap();
        let vw = backtest(
            &sig,
            &real,
            Some(&caps),
            &SortSpec {
                weighting: Weighting::Value,
                ..SortSpec::default()
            },
        )
        .unwrap();
        for (a, b) in ew.long_short.iter().zip(&vw.long_short) {
            assert!((a - b).abs() < 1e-12);
        }
        let warped: Vec<Signal> = sig
            .iter()
            .map(|s| Signal {
                value: (3.0 * s.value).exp() + 1.0,
                ..s.clone()
            })
            .collect();
        assert_eq!(backtest(&warped, &real, None, &SortSpec::default()).unwrap(), ew);
    }

    #[test]
    fn small_months_are_skipped() {
        let (mut sig, real) = fixture(3, 12, 3);
        sig.retain(|s| s.date != 1 || s.stock.as_str() < "s005");
        let p = backtest(&sig, &real, None, &SortSpec::default()).unwrap();
        assert_eq!(p.skipped, vec![1]);
        assert_eq!(p.dates, vec![0, 2]);
    }
}
