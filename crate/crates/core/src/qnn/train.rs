//! Training protocol: datasets from feature tables, early stopping,
//! ensembles and expanding annual re-estimation windows.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ForecastRecord, NetConfig, QuantileNet};
use crate::error::{Error, Result};
use crate::features::{month_end_indices, FeatureTable};
use crate::nn::{AdamConfig, Mode, Tensor2};
use crate::panel::Calendar;
use crate::taus::TauGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub patience: usize,
    pub validation_fraction: f64,
    pub ensemble_size: usize,
    /// `A` in `epochs = 100 · A / n`.
    pub epoch_constant: f64,
    /// Optional cap on the epoch count.
    pub max_epochs: Option<usize>,
    /// Start each window from the previous window's weights.
    pub fine_tune: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8192,
            adam: AdamConfig::default(),
            patience: 2,
            validation_fraction: 0.2,
            ensemble_size: 20,
            epoch_constant: 3_000_000.0,
            max_epochs: None,
            fine_tune: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.ensemble_size == 0 {
            return Err(Error::Config("batch size and ensemble size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation fraction must lie in [0, 1)".into()));
        }
        if !(self.adam.lr > 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("invalid Adam settings".into()));
        }
        if !(self.epoch_constant > 0.0) {
            return Err(Error::Config("epoch constant must be positive".into()));
        }
        Ok(())
    }
}

/// `round(100 · a / n)`, at least one.
pub fn epochs_for(n: usize, a: f64) -> Result<usize> {
    if n == 0 {
        return Err(Error::Input("epoch count needs at least one observation".into()));
    }
    Ok(((100.0 * a / n as f64).round() as usize).max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a lower validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
    since: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
            since: 0,
        }
    }

    /// Records the loss of the next epoch (epochs count from one).
    pub fn update(&mut self, loss: f64) -> StopDecision {
        self.epoch += 1;
        if loss < self.best {
            self.best = loss;
            self.best_epoch = self.epoch;
            self.since = 0;
            StopDecision::Improved
        } else {
            self.since += 1;
            if self.since >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    /// Epoch with the lowest loss so far; zero before any update.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

/// Rows of network inputs and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x_width: usize,
    pub z_width: usize,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub sigma_bar: Vec<f64>,
    /// Labels; `NaN` for prediction sets.
    pub r: Vec<f64>,
    /// `(date index, stock index)` of every row.
    pub keys: Vec<(usize, usize)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor2, Tensor2, Vec<f64>, Vec<f64>)> {
        let (w, m) = (self.x_width, self.z_width);
        let mut x = Vec::with_capacity(idx.len() * w);
        let mut z = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            x.extend_from_slice(&self.x[i * w..(i + 1) * w]);
            z.extend_from_slice(&self.z[i * m..(i + 1) * m]);
        }
        Ok((
            Tensor2::from_vec(idx.len(), w, x)?,
            Tensor2::from_vec(idx.len(), m, z)?,
            idx.iter().map(|&i| self.sigma_bar[i]).collect(),
            idx.iter().map(|&i| self.r[i]).collect(),
        ))
    }
}

/// Collects rows at the given date indices for active stocks whose inputs
/// and σ̄ are finite. With `labels` (laid out date-major like the panel),
/// rows without a finite label are dropped too.
pub fn build_dataset(ft: &FeatureTable, labels: Option<&[f64]>, dates: &[usize]) -> Dataset {
    let n = ft.n_stocks();
    let (w, m) = (ft.width(), ft.market_width());
    let mut d = Dataset {
        x_width: w,
        z_width: m,
        x: Vec::new(),
        z: Vec::new(),
        sigma_bar: Vec::new(),
        r: Vec::new(),
        keys: Vec::new(),
    };
    for &t in dates {
        let sb = ft.sigma_bar[t];
        let z = ft.z(t);
        if !(sb > 0.0 && sb.is_finite()) || z.iter().any(|v| !v.is_finite()) {
            continue;
        }
        for i in 0..n {
            if !ft.active[t * n + i] {
                continue;
            }
            let x = ft.x(t, i);
            if x.iter().any(|v| !v.is_finite()) {
                continue;
            }
            let r = match labels {
                Some(l) if !l[t * n + i].is_finite() => continue,
                Some(l) => l[t * n + i],
                None => f64::NAN,
            };
            d.x.extend_from_slice(x);
            d.z.extend_from_slice(z);
            d.sigma_bar.push(sb);
            d.r.push(r);
            d.keys.push((t, i));
        }
    }
    d
}

/// Training history of one ensemble member.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberReport {
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    /// Epoch whose weights were kept (1-based); the last epoch when there
    /// is no validation set.
    pub best_epoch: usize,
}

fn eval_loss(net: &mut QuantileNet, data: &Dataset, idx: &[usize], batch: usize, rng: &mut crate::Rng) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(batch) {
        let (x, z, sb, r) = data.batch(chunk)?;
        let out = net.forward(&x, &z, &sb, Mode::Eval, rng)?;
        total += net.loss(&out, &r)? * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Trains one network: a seeded random split keeps the last
/// `validation_fraction` of shuffled rows for early stopping, and the
/// weights of the best validation epoch are restored at the end.
pub fn train_member(net: &mut QuantileNet, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<MemberReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("no training rows".into()));
    }
    let mut rng = crate::seeded(seed);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng);
    let n_val = (cfg.validation_fraction * data.len() as f64).round() as usize;
    let n_val = if n_val >= data.len() { 0 } else { n_val };
    let (train, val) = idx.split_at(data.len() - n_val);
    let mut train = train.to_vec();
    let mut epochs = epochs_for(data.len(), cfg.epoch_constant)?;
    if let Some(cap) = cfg.max_epochs {
        epochs = epochs.min(cap.max(1));
    }
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = None;
    let mut report = MemberReport {
        train_losses: Vec::new(),
        val_losses: Vec::new(),
        best_epoch: 0,
    };
    for _ in 0..epochs {
        train.shuffle(&mut rng);
        let mut total = 0.0;
        let mut rows = 0usize;
        for chunk in train.chunks(cfg.batch_size) {
            // Batch statistics of a single row are meaningless.
            if chunk.len() < 2 && train.len() >= 2 {
                continue;
            }
            let (x, z, sb, r) = data.batch(chunk)?;
            net.store.zero_grad();
            let out = net.forward(&x, &z, &sb, Mode::Train, &mut rng)?;
            total += net.loss(&out, &r)? * chunk.len() as f64;
            rows += chunk.len();
            net.backward(&out, &r)?;
            net.store.adam_step(&cfg.adam);
        }
        report.train_losses.push(total / rows.max(1) as f64);
        if val.is_empty() {
            continue;
        }
        let v = eval_loss(net, data, val, cfg.batch_size, &mut rng)?;
        report.val_losses.push(v);
        match stopper.update(v) {
            StopDecision::Improved => best = Some(net.store.clone()),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    report.best_epoch = if val.is_empty() {
        report.train_losses.len()
    } else {
        stopper.best_epoch()
    };
    if let Some(b) = best {
        net.store.load_values_from(&b)?;
    }
    log::debug!(
        "member {seed}: {} epochs, best {} (val {:?}, train {:?})",
        report.train_losses.len(),
        report.best_epoch,
        report.val_losses.last(),
        report.train_losses.last()
    );
    Ok(report)
}

/// Independently trained networks whose forecasts are averaged.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<QuantileNet>,
    pub reports: Vec<MemberReport>,
}

/// Trains `cfg.ensemble_size` members in parallel; member `m` uses seed
/// `cfg.seed + m` for initialisation, splitting, shuffling and dropout.
/// With `init`, member `m` starts from the weights of `init.members[m]`
/// with a fresh optimiser state.
pub fn train_ensemble(
    net_cfg: &NetConfig,
    taus: &TauGrid,
    data: &Dataset,
    cfg: &TrainConfig,
    init: Option<&Ensemble>,
) -> Result<Ensemble> {
    cfg.validate()?;
    if let Some(e) = init {
        if e.members.len() != cfg.ensemble_size {
            return Err(Error::Config("fine-tuning needs the same ensemble size".into()));
        }
    }
    let trained: Vec<(QuantileNet, MemberReport)> = (0..cfg.ensemble_size)
        .into_par_iter()
        .map(|m| -> Result<_> {
            let seed = cfg.seed.wrapping_add(m as u64);
            let mut net = QuantileNet::new(net_cfg, taus, data.x_width, data.z_width, seed)?;
            if let Some(e) = init {
                net.store.load_values_from(&e.members[m].store)?;
            }
            let report = train_member(&mut net, data, cfg, seed ^ 0x7261_696e)?;
            Ok((net, report))
        })
        .collect::<Result<_>>()?;
    let (members, reports) = trained.into_iter().unzip();
    Ok(Ensemble { members, reports })
}

impl Ensemble {
    /// Averages member outputs row by row and sorts each quantile vector.
    /// Returns standardised quantiles, raw quantiles and market factors.
    pub fn predict(&mut self, data: &Dataset, batch: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
        if self.members.is_empty() {
            return Err(Error::State("empty ensemble".into()));
        }
        if !self.members[0].architecture().is_quantile() {
            return Err(Error::Input("the mean network has no quantile forecasts".into()));
        }
        let idx: Vec<usize> = (0..data.len()).collect();
        let outs: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = self
            .members
            .par_iter_mut()
            .map(|net| -> Result<_> {
                let mut rng = crate::seeded(0);
                let (mut s, mut q, mut m) = (Vec::new(), Vec::new(), Vec::new());
                for chunk in idx.chunks(batch.max(1)) {
                    let (x, z, sb, _) = data.batch(chunk)?;
                    let o = net.forward(&x, &z, &sb, Mode::Eval, &mut rng)?;
                    s.extend_from_slice(o.std.data());
                    q.extend_from_slice(o.raw.data());
                    m.extend_from_slice(&o.scale);
                }
                Ok((s, q, m))
            })
            .collect::<Result<_>>()?;
        let k = self.members[0].taus.len();
        let inv = 1.0 / outs.len() as f64;
        let mut std = Vec::with_capacity(data.len());
        let mut raw = Vec::with_capacity(data.len());
        let mut scale = Vec::with_capacity(data.len());
        for row in 0..data.len() {
            let mut s = vec![0.0; k];
            let mut q = vec![0.0; k];
            let mut m = 0.0;
            for (os, oq, om) in &outs {
                for j in 0..k {
                    s[j] += os[row * k + j] * inv;
                    q[j] += oq[row * k + j] * inv;
                }
                m += om[row] * inv;
            }
            s.sort_by(f64::total_cmp);
            q.sort_by(f64::total_cmp);
            std.push(s);
            raw.push(q);
            scale.push(m);
        }
        Ok((std, raw, scale))
    }
}

/// Ensemble forecasts for every usable (date, stock) at the given dates.
pub fn predict_records(
    ens: &mut Ensemble,
    ft: &FeatureTable,
    dates: &[usize],
    batch: usize,
) -> Result<Vec<ForecastRecord>> {
    let data = build_dataset(ft, None, dates);
    if data.is_empty() {
        return Ok(Vec::new());
    }
    let (std, raw, scale) = ens.predict(&data, batch)?;
    Ok(data
        .keys
        .iter()
        .enumerate()
        .map(|(row, &(t, i))| ForecastRecord {
            stock: ft.stocks[i].clone(),
            date: ft.dates[t],
            q_std: std[row].clone(),
            q_raw: raw[row].clone(),
            sigma_bar: data.sigma_bar[row],
            scale: scale[row],
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refit {
    /// Re-estimate on an expanding window before every test year.
    Annual,
    /// Estimate once before the first test year.
    Once,
}

/// Which dates feed the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowSelection {
    /// Every `n`-th date index (overlapping labels).
    Every(usize),
    MonthEnds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    /// Label length in dates.
    pub horizon: usize,
    pub rows: RowSelection,
    /// Test years in calendar terms; forecasts are made at the month ends
    /// preceding each month of these years.
    pub test_years: Vec<i64>,
    pub refit: Refit,
    pub calendar: Calendar,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            horizon: 22,
            rows: RowSelection::Every(5),
            test_years: Vec::new(),
            refit: Refit::Annual,
            calendar: Calendar::default(),
        }
    }
}

/// Month-end date indices whose following month lies in `year`.
pub fn forecast_origins(dates: &[i64], calendar: &Calendar, year: i64) -> Vec<usize> {
    month_end_indices(dates, calendar)
        .into_iter()
        .filter(|&t| t + 1 < dates.len() && calendar.year_of_month(calendar.month(dates[t]) + 1) == year)
        .collect()
}

/// Per-window summary.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowReport {
    pub year: i64,
    /// Index of the first forecast origin; every training label ends at or
    /// before it.
    pub cutoff: usize,
    pub rows: usize,
    pub members: Vec<MemberReport>,
}

#[derive(Debug, Clone)]
pub struct ScheduleOutput {
    pub records: Vec<ForecastRecord>,
    pub windows: Vec<WindowReport>,
    /// The last trained ensemble.
    pub ensemble: Option<Ensemble>,
}

/// Trains and forecasts year by year. Training rows for test year `y` are
/// restricted to labels that are fully observed at the first forecast
/// origin of `y`, so no forecast sees data after its own origin.
pub fn run_schedule(
    ft: &FeatureTable,
    labels: &[f64],
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    taus: &TauGrid,
    schedule: &Schedule,
) -> Result<ScheduleOutput> {
    if labels.len() != ft.n_dates() * ft.n_stocks() {
        return Err(Error::Dimension {
            context: "labels",
            expected: ft.n_dates() * ft.n_stocks(),
            got: labels.len(),
        });
    }
    let month_ends = month_end_indices(&ft.dates, &schedule.calendar);
    let mut out = ScheduleOutput {
        records: Vec::new(),
        windows: Vec::new(),
        ensemble: None,
    };
    for &year in &schedule.test_years {
        let origins = forecast_origins(&ft.dates, &schedule.calendar, year);
        let Some(&cutoff) = origins.first() else {
            log::warn!("no forecast origins for {year}");
            continue;
        };
        let refit = out.ensemble.is_none() || schedule.refit == Refit::Annual;
        if refit {
            let rows: Vec<usize> = match schedule.rows {
                RowSelection::Every(k) => (0..ft.n_dates()).step_by(k.max(1)).collect(),
                RowSelection::MonthEnds => month_ends.clone(),
            };
            let rows: Vec<usize> = rows.into_iter().filter(|&t| t + schedule.horizon <= cutoff).collect();
            let data = build_dataset(ft, Some(labels), &rows);
            if data.is_empty() {
                log::warn!("no training rows before {year}; skipping");
                continue;
            }
            log::info!(
                "training {} members on {} rows for {year}",
                cfg.ensemble_size,
                data.len()
            );
            let init = if cfg.fine_tune { out.ensemble.as_ref() } else { None };
            let ens = train_ensemble(net_cfg, taus, &data, cfg, init)?;
            out.windows.push(WindowReport {
                year,
                cutoff,
                rows: data.len(),
                members: ens.reports.clone(),
            });
            out.ensemble = Some(ens);
        }
        let ens = out.ensemble.as_mut().expect("trained above");
        out.records.extend(predict_records(ens, ft, &origins, cfg.batch_size)?);
    }
    Ok(out)
}
