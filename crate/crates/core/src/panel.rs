//! Stock × date panels of daily returns.
//!
//! Values are stored densely, date-major, with `NaN` marking a stock that
//! is not trading on a date. Dates are plain integers interpreted through a
//! [`Calendar`].

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How integer dates map to months and years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Calendar {
    /// Dates count trading days from zero; every month has the same length.
    TradingDays { days_per_month: u32, months_per_year: u32 },
    /// Dates are `yyyymmdd`.
    Yyyymmdd,
}

impl Default for Calendar {
    fn default() -> Self {
        Calendar::TradingDays {
            days_per_month: 22,
            months_per_year: 12,
        }
    }
}

impl Calendar {
    /// A key that is equal for dates in the same month and increasing in time.
    pub fn month(&self, date: i64) -> i64 {
        match *self {
            Calendar::TradingDays { days_per_month, .. } => date.div_euclid(days_per_month as i64),
            Calendar::Yyyymmdd => {
                let ym = date / 100;
                (ym / 100) * 12 + (ym % 100 - 1)
            }
        }
    }

    pub fn year(&self, date: i64) -> i64 {
        match *self {
            Calendar::TradingDays {
                days_per_month,
                months_per_year,
            } => date.div_euclid(days_per_month as i64 * months_per_year as i64),
            Calendar::Yyyymmdd => date / 10_000,
        }
    }

    /// Year of a month key returned by [`Calendar::month`].
    pub fn year_of_month(&self, month: i64) -> i64 {
        match *self {
            Calendar::TradingDays { months_per_year, .. } => month.div_euclid(months_per_year as i64),
            Calendar::Yyyymmdd => month.div_euclid(12),
        }
    }
}

/// Daily panel: returns, optional high/low prices, optional liquidity
/// flags and opaque pre-computed feature columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub dates: Vec<i64>,
    pub stocks: Vec<String>,
    /// `returns[t * n_stocks + i]`, `NaN` when missing.
    pub returns: Vec<f64>,
    pub high: Option<Vec<f64>>,
    pub low: Option<Vec<f64>>,
    /// Liquid-universe membership; every listed stock is in the full universe.
    pub liquid: Option<Vec<bool>>,
    /// Named columns laid out like `returns`.
    pub features: Vec<(String, Vec<f64>)>,
}

impl Panel {
    /// A panel holding only returns.
    pub fn from_returns(dates: Vec<i64>, stocks: Vec<String>, returns: Vec<f64>) -> Result<Self> {
        let p = Self {
            dates,
            stocks,
            returns,
            high: None,
            low: None,
            liquid: None,
            features: Vec::new(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dates.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data("panel dates must be strictly increasing".into()));
        }
        let cells = self.dates.len() * self.stocks.len();
        let check = |len: usize, what: &str| {
            if len != cells {
                Err(Error::Data(format!("{what} has {len} cells, panel has {cells}")))
            } else {
                Ok(())
            }
        };
        check(self.returns.len(), "returns")?;
        if let Some(h) = &self.high {
            check(h.len(), "high")?;
        }
        if let Some(l) = &self.low {
            check(l.len(), "low")?;
        }
        if let Some(f) = &self.liquid {
            check(f.len(), "liquid")?;
        }
        for (name, col) in &self.features {
            check(col.len(), name)?;
        }
        if let Some(r) = self.returns.iter().find(|r| **r < -1.0) {
            return Err(Error::Data(format!("return {r} below -100%")));
        }
        Ok(())
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_stocks(&self) -> usize {
        self.stocks.len()
    }

    #[inline]
    pub fn ret(&self, t: usize, i: usize) -> f64 {
        self.returns[t * self.stocks.len() + i]
    }

    /// Returns of all stocks on date index `t`.
    pub fn cross_section(&self, t: usize) -> &[f64] {
        let n = self.stocks.len();
        &self.returns[t * n..(t + 1) * n]
    }

    /// Time series of stock `i`.
    pub fn series(&self, i: usize) -> Vec<f64> {
        column(&self.returns, self.stocks.len(), i)
    }

    /// Reads the long CSV format `date,stock_id,ret[,high,low,liquid,feat_*]`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let idx = |name: &str| headers.iter().position(|h| h == name);
        let (Some(di), Some(si), Some(ri)) = (idx("date"), idx("stock_id"), idx("ret")) else {
            return Err(Error::Data("panel CSV needs date, stock_id and ret columns".into()));
        };
        let hi = idx("high");
        let lo = idx("low");
        if hi.is_some() != lo.is_some() {
            return Err(Error::Data("high and low must appear together".into()));
        }
        let li = idx("liquid");
        let feat: Vec<(usize, String)> = headers
            .iter()
            .enumerate()
            .filter(|(_, h)| h.starts_with("feat_"))
            .map(|(i, h)| (i, h.to_string()))
            .collect();

        struct Row {
            date: i64,
            stock: String,
            ret: f64,
            high: f64,
            low: f64,
            liquid: bool,
            feats: Vec<f64>,
        }
        let parse = |s: &str, what: &str, line: u64| -> Result<f64> {
            if s.is_empty() {
                return Ok(f64::NAN);
            }
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("line {line}: bad {what} value {s:?}")))
        };
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let date = rec[di]
                .trim()
                .parse::<i64>()
                .map_err(|_| Error::Data(format!("line {line}: bad date {:?}", &rec[di])))?;
            rows.push(Row {
                date,
                stock: rec[si].to_string(),
                ret: parse(&rec[ri], "ret", line)?,
                high: hi.map_or(Ok(f64::NAN), |i| parse(&rec[i], "high", line))?,
                low: lo.map_or(Ok(f64::NAN), |i| parse(&rec[i], "low", line))?,
                liquid: li.is_none_or(|i| matches!(rec[i].trim(), "1" | "true")),
                feats: feat
                    .iter()
                    .map(|(i, name)| parse(&rec[*i], name, line))
                    .collect::<Result<_>>()?,
            });
        }

        let dates: Vec<i64> = rows
            .iter()
            .map(|r| r.date)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let stocks: Vec<String> = rows
            .iter()
            .map(|r| r.stock.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let date_ix: HashMap<i64, usize> = dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
        let stock_ix: HashMap<&str, usize> = stocks.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let n = stocks.len();
        let cells = dates.len() * n;
        let mut returns = vec![f64::NAN; cells];
        let mut high = hi.map(|_| vec![f64::NAN; cells]);
        let mut low = lo.map(|_| vec![f64::NAN; cells]);
        let mut liquid = li.map(|_| vec![false; cells]);
        let mut features: Vec<(String, Vec<f64>)> =
            feat.iter().map(|(_, n)| (n.clone(), vec![f64::NAN; cells])).collect();
        let mut seen = vec![false; cells];
        for r in &rows {
            let c = date_ix[&r.date] * n + stock_ix[r.stock.as_str()];
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::Data(format!(
                    "duplicate row for date {} stock {}",
                    r.date, r.stock
                )));
            }
            returns[c] = r.ret;
            if let Some(h) = high.as_mut() {
                h[c] = r.high;
            }
            if let Some(l) = low.as_mut() {
                l[c] = r.low;
            }
            if let Some(l) = liquid.as_mut() {
                l[c] = r.liquid;
            }
            for (k, v) in r.feats.iter().enumerate() {
                features[k].1[c] = *v;
            }
        }
        let p = Self {
            dates,
            stocks,
            returns,
            high,
            low,
            liquid,
            features,
        };
        p.validate()?;
        Ok(p)
    }

    /// Writes the long CSV format; cells with a missing return are skipped.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["date".to_string(), "stock_id".into(), "ret".into()];
        if self.high.is_some() {
            header.push("high".into());
            header.push("low".into());
        }
        if self.liquid.is_some() {
            header.push("liquid".into());
        }
        header.extend(self.features.iter().map(|(n, _)| n.clone()));
        w.write_record(&header)?;
        let n = self.stocks.len();
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for (t, date) in self.dates.iter().enumerate() {
            for (i, stock) in self.stocks.iter().enumerate() {
                let c = t * n + i;
                if self.returns[c].is_nan() {
                    continue;
                }
                rec.clear();
                rec.push(date.to_string());
                rec.push(stock.clone());
                rec.push(fmt_f64(self.returns[c]));
                if let (Some(h), Some(l)) = (&self.high, &self.low) {
                    rec.push(fmt_f64(h[c]));
                    rec.push(fmt_f64(l[c]));
                }
                if let Some(l) = &self.liquid {
                    rec.push(if l[c] { "1" } else { "0" }.into());
                }
                for (_, col) in &self.features {
                    rec.push(fmt_f64(col[c]));
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest round-tripping representation; empty for `NaN`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Column `i` of a date-major matrix with `n` columns.
pub fn column(data: &[f64], n: usize, i: usize) -> Vec<f64> {
    data.iter().skip(i).step_by(n).copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Panel {
        let mut p = Panel::from_returns(
            vec![0, 1, 2],
            vec!["a".into(), "b".into()],
            vec![0.01, f64::NAN, -0.02, 0.03, 0.1 / 3.0, -0.5],
        )
        .unwrap();
        p.features
            .push(("feat_x".into(), vec![1.0, f64::NAN, 3.0, 4.0, 5.0, 6.0]));
        p
    }

    #[test]
    fn csv_roundtrip_is_lossless() {
        let p = sample();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let q = Panel::read_csv(buf.as_slice()).unwrap();
        assert_eq!(q.dates, p.dates);
        assert_eq!(q.stocks, p.stocks);
        for (a, b) in p.returns.iter().zip(&q.returns) {
            assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
        }
        // The missing return row carried a feature value that is dropped.
        assert!(q.features[0].1[1].is_nan());
        assert_eq!(q.features[0].1[2..], p.features[0].1[2..]);
    }

    #[test]
    fn rejects_duplicates_and_bad_values() {
        let dup = "date,stock_id,ret\n0,a,0.1\n0,a,0.2\n";
        assert!(matches!(Panel::read_csv(dup.as_bytes()), Err(Error::Data(_))));
        let bad = "date,stock_id,ret\n0,a,-1.5\n";
        assert!(matches!(Panel::read_csv(bad.as_bytes()), Err(Error::Data(_))));
        let missing = "date,ret\n0,0.1\n";
        assert!(Panel::read_csv(missing.as_bytes()).is_err());
    }

    #[test]
    fn calendars() {
        let c = Calendar::default();
        assert_eq!(c.month(21), 0);
        assert_eq!(c.month(22), 1);
        assert_eq!(c.year(263), 0);
        assert_eq!(c.year(264), 1);
        let y = Calendar::Yyyymmdd;
        assert_eq!(y.month(20200131) + 1, y.month(20200203));
        assert_eq!(y.month(20191231) + 1, y.month(20200102));
        assert_eq!(y.year(20200131), 2020);
        assert_eq!(y.year_of_month(y.month(20200131)), 2020);
    }
}
