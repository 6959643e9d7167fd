//! Forecast records and their long CSV form `stock_id,date,tau,q_std,q_raw`.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::panel::fmt_f64;
use crate::taus::TauGrid;

/// Quantile forecast of one stock made at one date.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRecord {
    pub stock: String,
    pub date: i64,
    pub q_std: Vec<f64>,
    pub q_raw: Vec<f64>,
    /// σ̄ used for scaling; `NaN` when read back from CSV.
    pub sigma_bar: f64,
    /// Market factor σ̂ᴹ; `NaN` when read back from CSV.
    pub scale: f64,
}

impl ForecastRecord {
    pub fn is_monotone(&self) -> bool {
        self.q_raw.windows(2).all(|w| w[0] <= w[1]) && self.q_std.windows(2).all(|w| w[0] <= w[1])
    }
}

pub fn write_forecasts<W: Write>(records: &[ForecastRecord], taus: &TauGrid, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["stock_id", "date", "tau", "q_std", "q_raw"])?;
    for r in records {
        if r.q_raw.len() != taus.len() || r.q_std.len() != taus.len() {
            return Err(Error::Dimension {
                context: "forecast record quantiles",
                expected: taus.len(),
                got: r.q_raw.len(),
            });
        }
        let date = r.date.to_string();
        for (k, &t) in taus.levels().iter().enumerate() {
            w.write_record([
                r.stock.as_str(),
                &date,
                &fmt_f64(t),
                &fmt_f64(r.q_std[k]),
                &fmt_f64(r.q_raw[k]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads records written by [`write_forecasts`]. Every (stock, date) group
/// must list the same τ levels in increasing order; the grid is returned.
/// An empty `q_std` cell reads as `NaN`.
pub fn read_forecasts<R: Read>(reader: R) -> Result<(TauGrid, Vec<ForecastRecord>)> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("forecast CSV lacks column {name}")))
    };
    let (cs, cd, ct, cstd, craw) = (
        col("stock_id")?,
        col("date")?,
        col("tau")?,
        col("q_std")?,
        col("q_raw")?,
    );
    let parse = |s: &str, what: &str| -> Result<f64> {
        if s.is_empty() {
            return Ok(f64::NAN);
        }
        s.trim()
            .parse()
            .map_err(|_| Error::Data(format!("bad {what} value {s:?}")))
    };
    let mut order: Vec<(String, i64)> = Vec::new();
    let mut groups: HashMap<(String, i64), (Vec<f64>, Vec<f64>, Vec<f64>)> = HashMap::new();
    for row in rdr.records() {
        let row = row?;
        let key = (
            row[cs].to_string(),
            row[cd]
                .trim()
                .parse::<i64>()
                .map_err(|_| Error::Data(format!("bad date {:?}", &row[cd])))?,
        );
        let e = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Default::default()
        });
        e.0.push(parse(&row[ct], "tau")?);
        e.1.push(parse(&row[cstd], "q_std")?);
        e.2.push(parse(&row[craw], "q_raw")?);
    }
    let Some(first) = order.first() else {
        return Err(Error::Data("forecast CSV has no rows".into()));
    };
    let taus = TauGrid::new(groups[first].0.clone()).map_err(|e| Error::Data(e.to_string()))?;
    let mut out = Vec::with_capacity(order.len());
    for key in order {
        let (t, q_std, q_raw) = groups.remove(&key).expect("grouped");
        if t != taus.levels() {
            return Err(Error::Data(format!(
                "stock {} date {} has a different tau grid",
                key.0, key.1
            )));
        }
        out.push(ForecastRecord {
            stock: key.0,
            date: key.1,
            q_std,
            q_raw,
            sigma_bar: f64::NAN,
            scale: f64::NAN,
        });
    }
    Ok((taus, out))
}
