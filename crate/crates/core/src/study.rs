//! The controlled simulation study: simulate a panel with known dynamics,
//! train the two-stage network on the first half, forecast every month of
//! the second half, and compare it and a GARCH(1,1)-t baseline with the
//! bootstrapped true quantiles.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::quantile_rmse;
use crate::features::{build_features, forward_returns, FeatureConfig};
use crate::garch::{forecast_window, GarchParams, GarchSpec};
use crate::market_sim::{sample_stock_params, simulate_panel, true_quantiles, DgpSpec, Simulation, StockParams};
use crate::qnn::{run_schedule, NetConfig, Refit, RowSelection, Schedule, TrainConfig};
use crate::taus::TauGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub dgp: DgpSpec,
    pub repetitions: usize,
    /// Bootstrap paths per stock-month for the true quantiles.
    pub truth_paths: usize,
    /// Monte Carlo paths per GARCH forecast.
    pub garch_paths: usize,
    /// Estimation window of the GARCH baseline in years.
    pub garch_window_years: usize,
    pub garch: GarchSpec,
    pub net: NetConfig,
    pub train: TrainConfig,
    /// Training rows are taken every `row_stride` days.
    pub row_stride: usize,
    /// Retrain before every test year, or once before the first.
    pub refit: Refit,
    pub taus: Vec<f64>,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            dgp: DgpSpec::default(),
            repetitions: 3,
            truth_paths: 10_000,
            garch_paths: 10_000,
            garch_window_years: 3,
            garch: GarchSpec::default(),
            net: NetConfig::default(),
            train: TrainConfig {
                ensemble_size: 5,
                batch_size: 512,
                ..TrainConfig::default()
            },
            row_stride: 5,
            refit: Refit::Annual,
            taus: TauGrid::standard().levels().to_vec(),
            seed: 1,
        }
    }
}

/// Results of one repetition. RMSEs and biases (mean of forecast minus
/// truth) are ×100, one per τ.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepResult {
    pub rep: usize,
    pub rmse_net: Vec<f64>,
    pub rmse_garch: Vec<f64>,
    pub bias_net: Vec<f64>,
    pub bias_garch: Vec<f64>,
    pub truth_mean: Vec<f64>,
    pub truth_sd: Vec<f64>,
    pub stock_months: usize,
    pub excluded: usize,
    pub garch_fallbacks: usize,
    pub train_rows: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport {
    pub taus: Vec<f64>,
    pub reps: Vec<RepResult>,
}

impl StudyReport {
    /// Repetitions in which the network beats GARCH at every listed level.
    pub fn wins(&self, levels: &[f64]) -> usize {
        let idx: Vec<usize> = levels
            .iter()
            .filter_map(|l| self.taus.iter().position(|t| (t - l).abs() < 1e-12))
            .collect();
        self.reps
            .iter()
            .filter(|r| idx.iter().all(|&k| r.rmse_net[k] < r.rmse_garch[k]))
            .count()
    }

    /// Long CSV: `rep,tau,truth_mean,truth_sd,rmse_garch,rmse_net,bias_garch,bias_net`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "rep",
            "tau",
            "truth_mean",
            "truth_sd",
            "rmse_garch",
            "rmse_net",
            "bias_garch",
            "bias_net",
        ])?;
        for r in &self.reps {
            for (k, t) in self.taus.iter().enumerate() {
                w.write_record([
                    r.rep.to_string(),
                    t.to_string(),
                    format!("{:.4}", r.truth_mean[k]),
                    format!("{:.4}", r.truth_sd[k]),
                    format!("{:.4}", r.rmse_garch[k]),
                    format!("{:.4}", r.rmse_net[k]),
                    format!("{:.4}", r.bias_garch[k]),
                    format!("{:.4}", r.bias_net[k]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// GARCH baseline quantiles for every stock and month in `months`:
/// `out[i][j]` forecasts month `months[j]` from the `window` days before it.
/// Each stock's fits are warm-started from its previous month.
pub fn garch_baseline(
    sim: &Simulation,
    months: &[usize],
    window: usize,
    spec: &GarchSpec,
    paths: usize,
    taus: &TauGrid,
    seed: u64,
) -> Result<(Vec<Vec<Vec<f64>>>, usize)> {
    let d = sim.spec.days_per_month;
    let per_stock: Vec<(Vec<Vec<f64>>, usize)> = (0..sim.spec.n_stocks)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let series = sim.panel.series(i);
            let mut start: Option<GarchParams> = None;
            let mut fallbacks = 0;
            let mut out = Vec::with_capacity(months.len());
            for &m in months {
                let end = m * d;
                let lo = end.saturating_sub(window);
                let s = seed ^ ((i as u64) << 32 | m as u64).wrapping_mul(0x2545_F491_4F6C_DD1D);
                let (fit, fc) = forecast_window(&series[lo..end], spec, start.as_ref(), d, paths, taus, s)?;
                if fit.fallback {
                    fallbacks += 1;
                } else {
                    start = Some(fit.params);
                }
                out.push(fc.quantiles);
            }
            Ok((out, fallbacks))
        })
        .collect::<Result<_>>()?;
    let fallbacks = per_stock.iter().map(|p| p.1).sum();
    Ok((per_stock.into_iter().map(|p| p.0).collect(), fallbacks))
}

/// One repetition with a freshly simulated panel.
pub fn run_repetition(cfg: &StudyConfig, rep: usize, pool: Option<&[StockParams]>) -> Result<RepResult> {
    let clock = std::time::Instant::now();
    let taus = TauGrid::new(cfg.taus.clone())?;
    let spec = &cfg.dgp;
    if spec.n_years < 2 {
        return Err(Error::Config("the study needs at least two simulated years".into()));
    }
    let seed = cfg.seed.wrapping_add(1_000 * rep as u64);
    let params = sample_stock_params(spec, pool, seed)?;
    let sim = simulate_panel(spec, &params, seed)?;
    let n = spec.n_stocks;
    let first = spec.test_start_month();
    let months: Vec<usize> = (first..spec.n_months()).collect();
    let test_years: Vec<i64> = (spec.n_years / 2..spec.n_years).map(|y| y as i64).collect();

    log::info!("rep {rep}: features");
    let fcfg = FeatureConfig {
        days_per_month: spec.days_per_month,
        parkinson_window: spec.days_per_month,
        ..FeatureConfig::default()
    };
    let ft = build_features(&sim.panel, &fcfg)?;
    let labels = forward_returns(&sim.panel, spec.days_per_month);
    let schedule = Schedule {
        horizon: spec.days_per_month,
        rows: RowSelection::Every(cfg.row_stride),
        test_years,
        refit: cfg.refit,
        calendar: spec.calendar(),
    };
    let train = TrainConfig {
        seed: cfg.train.seed.wrapping_add(seed),
        ..cfg.train.clone()
    };
    log::info!("rep {rep}: training");
    let out = run_schedule(&ft, &labels, &cfg.net, &train, &taus, &schedule)?;
    let train_rows = out.windows.first().map_or(0, |w| w.rows);

    log::info!("rep {rep}: true quantiles");
    let stocks: Vec<usize> = (0..n).collect();
    let mut truth = Vec::with_capacity(months.len());
    for &m in &months {
        truth.push(true_quantiles(
            &sim,
            m,
            &stocks,
            &taus,
            cfg.truth_paths,
            seed ^ 0x7472_7565,
        )?);
    }

    log::info!("rep {rep}: GARCH baseline");
    let window = cfg.garch_window_years * spec.months_per_year * spec.days_per_month;
    let (garch, garch_fallbacks) = garch_baseline(
        &sim,
        &months,
        window,
        &cfg.garch,
        cfg.garch_paths,
        &taus,
        seed ^ 0x6761_7263,
    )?;

    // Forecast made at the last day of month m − 1 describes month m.
    let mut net_q: Vec<Option<Vec<f64>>> = vec![None; months.len() * n];
    for r in &out.records {
        let t = r.date as usize;
        let m = (t + 1) / spec.days_per_month;
        let i: usize = sim
            .panel
            .stocks
            .iter()
            .position(|s| *s == r.stock)
            .expect("known stock");
        if m >= first && m < spec.n_months() {
            net_q[(m - first) * n + i] = Some(r.q_raw.clone());
        }
    }
    let (mut p_net, mut p_garch, mut p_true) = (Vec::new(), Vec::new(), Vec::new());
    let mut excluded = 0;
    for (j, rows) in truth.iter().enumerate() {
        for tq in rows {
            if tq.excluded {
                excluded += 1;
                continue;
            }
            let Some(q) = &net_q[j * n + tq.stock] else { continue };
            p_net.push(q.clone());
            p_garch.push(garch[tq.stock][j].clone());
            p_true.push(tq.quantiles.clone());
        }
    }
    if p_true.is_empty() {
        return Err(Error::Data("no stock-month could be evaluated".into()));
    }
    let k = taus.len();
    let col = |j: usize| p_true.iter().map(|q| q[j]).collect::<Vec<f64>>();
    let truth_mean = (0..k).map(|j| 100.0 * crate::stats::mean(&col(j))).collect();
    let truth_sd = (0..k).map(|j| 100.0 * crate::stats::sample_sd(&col(j))).collect();
    let scale = |v: Vec<f64>| v.into_iter().map(|x| 100.0 * x).collect::<Vec<_>>();
    Ok(RepResult {
        rep,
        rmse_net: scale(quantile_rmse(&p_net, &p_true)?),
        rmse_garch: scale(quantile_rmse(&p_garch, &p_true)?),
        bias_net: scale(mean_error(&p_net, &p_true)),
        bias_garch: scale(mean_error(&p_garch, &p_true)),
        truth_mean,
        truth_sd,
        stock_months: p_true.len(),
        excluded,
        garch_fallbacks,
        train_rows,
        seconds: clock.elapsed().as_secs_f64(),
    })
}

fn mean_error(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Vec<f64> {
    let k = truth[0].len();
    (0..k)
        .map(|j| pred.iter().zip(truth).map(|(p, t)| p[j] - t[j]).sum::<f64>() / truth.len() as f64)
        .collect()
}

pub fn run_study(cfg: &StudyConfig, pool: Option<&[StockParams]>) -> Result<StudyReport> {
    let reps = (0..cfg.repetitions)
        .map(|r| run_repetition(cfg, r, pool))
        .collect::<Result<_>>()?;
    Ok(StudyReport {
        taus: cfg.taus.clone(),
        reps,
    })
}
