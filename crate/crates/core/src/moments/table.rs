//! Moment recovery on analytic distributions: exact moments next to the
//! naive and adjusted pipeline estimates from 37 analytic quantiles.

use std::io::Write;

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use super::nct::{Mvsk, NonCentralT};
use super::{moments_from_quantiles, MomentSet};
use crate::density::{DensityOptions, QuantileGrid};
use crate::error::{Error, Result};
use crate::taus::TauGrid;

/// Scale of the analytic distributions. Means are reported at this scale,
/// variances per unit scale.
pub const ANALYTIC_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Analytic {
    Normal,
    StudentT { df: f64 },
    Nct { df: f64, nc: f64 },
}

impl Analytic {
    pub fn name(&self) -> String {
        match self {
            Analytic::Normal => "Normal".into(),
            Analytic::StudentT { df } => format!("t: df={df}"),
            Analytic::Nct { df, nc } => format!("nct: df={df}, nc={nc}"),
        }
    }

    pub fn quantiles(&self, taus: &[f64], scale: f64) -> Result<Vec<f64>> {
        match *self {
            Analytic::Normal => {
                let d = Normal::new(0.0, scale).map_err(|e| Error::Input(e.to_string()))?;
                Ok(taus.iter().map(|&p| d.inverse_cdf(p)).collect())
            }
            Analytic::StudentT { df } => {
                let d = StudentsT::new(0.0, scale, df).map_err(|e| Error::Input(e.to_string()))?;
                Ok(taus.iter().map(|&p| d.inverse_cdf(p)).collect())
            }
            Analytic::Nct { df, nc } => NonCentralT::new(df, nc, scale)?.quantiles(taus),
        }
    }

    pub fn exact(&self, scale: f64) -> Result<Mvsk> {
        match *self {
            Analytic::Normal => Ok(Mvsk {
                mean: 0.0,
                variance: scale * scale,
                skewness: 0.0,
                kurtosis: 3.0,
            }),
            Analytic::StudentT { df } => NonCentralT::new(df, 0.0, scale)?.moments(),
            Analytic::Nct { df, nc } => NonCentralT::new(df, nc, scale)?.moments(),
        }
    }
}

/// Normal, three Student t and three non-central t distributions.
pub fn table_distributions() -> Vec<Analytic> {
    vec![
        Analytic::Normal,
        Analytic::StudentT { df: 10.0 },
        Analytic::StudentT { df: 6.0 },
        Analytic::StudentT { df: 5.0 },
        Analytic::Nct { df: 5.0, nc: 1.0 },
        Analytic::Nct { df: 6.0, nc: 3.0 },
        Analytic::Nct { df: 5.0, nc: 4.0 },
    ]
}

/// One row; variances are divided by `scale²`.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub dist: Analytic,
    pub exact: Mvsk,
    pub naive: Mvsk,
    pub adjusted: Mvsk,
    pub fallback: bool,
}

pub fn analytic_row(dist: Analytic, taus: &TauGrid, scale: f64) -> Result<TableRow> {
    let q = dist.quantiles(taus.levels(), scale)?;
    let g = QuantileGrid::new(taus.levels().to_vec(), q)?;
    let (d, m): (_, MomentSet) = moments_from_quantiles(&g, &DensityOptions::default())?;
    let adj = m.adjusted.ok_or_else(|| Error::State("adjustment missing".into()))?;
    let s2 = scale * scale;
    let mut exact = dist.exact(scale)?;
    exact.variance /= s2;
    Ok(TableRow {
        dist,
        exact,
        naive: Mvsk {
            mean: m.mean,
            variance: m.variance / s2,
            skewness: m.skewness,
            kurtosis: m.kurtosis,
        },
        adjusted: Mvsk {
            mean: m.mean,
            variance: adj.variance / s2,
            skewness: adj.skewness,
            kurtosis: adj.kurtosis,
        },
        fallback: d.is_fallback(),
    })
}

/// All seven rows on the standard grid.
pub fn reproduce_table() -> Result<Vec<TableRow>> {
    let taus = TauGrid::standard();
    table_distributions()
        .into_iter()
        .map(|d| analytic_row(d, &taus, ANALYTIC_SCALE))
        .collect()
}

/// CSV with exact, naive and adjusted values side by side.
pub fn write_table<W: Write>(rows: &[TableRow], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record([
        "dist", "m_t", "m", "v_t", "v", "v_adj", "s_t", "s", "s_adj", "k_t", "k", "k_adj",
    ])?;
    for r in rows {
        let f = |x: f64| format!("{x:.3}");
        w.write_record([
            r.dist.name(),
            f(r.exact.mean),
            f(r.naive.mean),
            f(r.exact.variance),
            f(r.naive.variance),
            f(r.adjusted.variance),
            f(r.exact.skewness),
            f(r.naive.skewness),
            f(r.adjusted.skewness),
            f(r.exact.kurtosis),
            f(r.naive.kurtosis),
            f(r.adjusted.kurtosis),
        ])?;
    }
    w.flush()?;
    Ok(())
}
