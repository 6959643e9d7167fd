//! Batch front end behind the `distforge` binary.
//!
//! Settings are layered: built-in defaults, then an optional TOML file
//! (`--config`), then `DISTFORGE_SEED`, `DISTFORGE_THREADS` and
//! `DISTFORGE_OUT_DIR`, then command line flags. Every command writes its
//! outputs and a `<command>.manifest.json` into the output directory.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numerical failure.

use std::collections::HashMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::density::{fit_pdf, DensityOptions, QuantileGrid};
use crate::error::{Error, Result};
use crate::evaluation::{
    avg_quantile_loss, crps_panel, dm_loss_panels, loss_panel, oos_r2, realized_returns, realized_vols, vol_eval,
    Realized,
};
use crate::features::{build_features, forward_returns, month_end_indices, FeatureConfig, FeatureTable};
use crate::garch::{forecast_window, GarchParams, GarchSpec};
use crate::io::{load_ensemble, reader, save_ensemble, Manifest, OutputSet};
use crate::market_sim::{
    read_pool, sample_stock_params, simulate_panel, true_quantiles, write_pool, write_true_quantiles, DgpSpec,
};
use crate::moments::{moments_from_quantiles, reproduce_table, write_table};
use crate::panel::{fmt_f64, Panel};
use crate::portfolio::{backtest, Signal, SortSpec, Weighting};
use crate::qnn::{
    forecast_origins, predict_records, read_forecasts, run_schedule, write_forecasts, ForecastRecord, NetConfig,
    Schedule, TrainConfig,
};
use crate::study::{run_study, StudyConfig};
use crate::taus::TauGrid;

#[derive(Debug, Parser)]
#[command(name = "distforge", version, about = "Distributional return forecasting")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, short, global = true)]
    pub out: Option<PathBuf>,
    /// Comma-separated quantile levels replacing the standard grid.
    #[arg(long, global = true, value_delimiter = ',')]
    pub taus: Option<Vec<f64>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a panel with known dynamics and its true quantiles.
    Simulate {
        #[arg(long)]
        stocks: Option<usize>,
        #[arg(long)]
        years: Option<usize>,
        /// Stock parameter pool CSV replacing the synthetic pool.
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Bootstrap paths per stock-month; 0 skips the true quantiles.
        #[arg(long)]
        truth_paths: Option<usize>,
    },
    /// Build the feature table of a panel.
    Features {
        #[arg(long)]
        panel: PathBuf,
    },
    /// Train ensembles on expanding windows and forecast the test years.
    Train {
        #[arg(long)]
        panel: PathBuf,
        /// Precomputed features; built from the panel when absent.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        test_years: Option<Vec<i64>>,
        #[arg(long)]
        ensemble: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Forecast with a saved ensemble at every month end.
    Forecast {
        #[arg(long)]
        features: PathBuf,
        /// Directory holding model.json and the member checkpoints.
        #[arg(long)]
        model: PathBuf,
    },
    /// Densities of forecast records.
    Density {
        #[arg(long)]
        forecasts: PathBuf,
    },
    /// Moments of forecast records.
    Moments {
        #[arg(long)]
        forecasts: PathBuf,
    },
    /// GARCH(1,1) Monte Carlo quantile forecasts.
    GarchForecast {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long, value_delimiter = ',')]
        test_years: Option<Vec<i64>>,
        #[arg(long)]
        paths: Option<usize>,
    },
    /// Loss, CRPS, R², volatility errors and pairwise DM tests.
    Evaluate {
        #[arg(long)]
        panel: PathBuf,
        /// Forecast CSV, one per model.
        #[arg(long, required = true)]
        forecasts: Vec<PathBuf>,
        /// Model names, in the order of `--forecasts`.
        #[arg(long, value_delimiter = ',')]
        names: Option<Vec<String>>,
    },
    /// Decile sorts on a forecast.
    Backtest {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        forecasts: PathBuf,
        /// Sort on this quantile level instead of the forecast mean.
        #[arg(long)]
        tau: Option<f64>,
        /// Market caps `stock_id,date,cap`; enables value weighting.
        #[arg(long)]
        caps: Option<PathBuf>,
    },
    /// Moments recovered from analytic distributions.
    ReproTableE1,
    /// Network and GARCH against true quantiles on simulated panels.
    ReproSim {
        #[arg(long)]
        stocks: Option<usize>,
        #[arg(long)]
        years: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        ensemble: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Features { .. } => "features",
            Command::Train { .. } => "train",
            Command::Forecast { .. } => "forecast",
            Command::Density { .. } => "density",
            Command::Moments { .. } => "moments",
            Command::GarchForecast { .. } => "garch-forecast",
            Command::Evaluate { .. } => "evaluate",
            Command::Backtest { .. } => "backtest",
            Command::ReproTableE1 => "repro-table-e1",
            Command::ReproSim { .. } => "repro-sim",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub dgp: DgpSpec,
    /// Bootstrap paths per stock-month of the test half; 0 skips them.
    pub truth_paths: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            dgp: DgpSpec::default(),
            truth_paths: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GarchConfig {
    pub spec: GarchSpec,
    /// Estimation window in days.
    pub window: usize,
    pub paths: usize,
}

impl Default for GarchConfig {
    fn default() -> Self {
        Self {
            spec: GarchSpec::default(),
            window: 3 * 12 * 22,
            paths: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Forecast horizon in dates.
    pub horizon: usize,
    /// Newey-West lags of the DM test.
    pub lags: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { horizon: 22, lags: 12 }
    }
}

/// Effective settings of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub out_dir: PathBuf,
    pub taus: Option<Vec<f64>>,
    pub simulate: SimulateConfig,
    pub features: FeatureConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub schedule: Schedule,
    pub density: DensityOptions,
    pub garch: GarchConfig,
    pub evaluate: EvaluateConfig,
    pub backtest: SortSpec,
    pub study: StudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            out_dir: PathBuf::from("."),
            taus: None,
            simulate: SimulateConfig::default(),
            features: FeatureConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            schedule: Schedule::default(),
            density: DensityOptions::default(),
            garch: GarchConfig::default(),
            evaluate: EvaluateConfig::default(),
            backtest: SortSpec::default(),
            study: StudyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `DISTFORGE_*` overrides from `vars`.
    pub fn apply_env(&mut self, vars: &HashMap<String, String>) -> Result<()> {
        let parse = |k: &str, v: &str| -> Result<u64> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{k}={v} is not a non-negative integer")))
        };
        if let Some(v) = vars.get("DISTFORGE_SEED") {
            self.seed = parse("DISTFORGE_SEED", v)?;
        }
        if let Some(v) = vars.get("DISTFORGE_THREADS") {
            self.threads = parse("DISTFORGE_THREADS", v)? as usize;
        }
        if let Some(v) = vars.get("DISTFORGE_OUT_DIR") {
            self.out_dir = PathBuf::from(v);
        }
        Ok(())
    }

    pub fn apply_flags(&mut self, g: &GlobalArgs) {
        if let Some(s) = g.seed {
            self.seed = s;
        }
        if let Some(t) = g.threads {
            self.threads = t;
        }
        if let Some(o) = &g.out {
            self.out_dir = o.clone();
        }
        if let Some(t) = &g.taus {
            self.taus = Some(t.clone());
        }
    }

    pub fn tau_grid(&self) -> Result<TauGrid> {
        match &self.taus {
            Some(t) => TauGrid::new(t.clone()).map_err(|e| Error::Config(e.to_string())),
            None => Ok(TauGrid::standard()),
        }
    }
}

/// Defaults, file, environment and flags, in that order.
pub fn resolve_config(g: &GlobalArgs, env: &HashMap<String, String>) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    cfg.apply_env(env)?;
    cfg.apply_flags(g);
    Ok(cfg)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let env: HashMap<String, String> = std::env::vars().filter(|(k, _)| k.starts_with("DISTFORGE_")).collect();
    let stage = cli.command.name();
    match execute(&cli, &env) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error in {stage}: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command.
pub fn execute(cli: &Cli, env: &HashMap<String, String>) -> Result<()> {
    let mut cfg = resolve_config(&cli.global, env)?;
    apply_command_flags(&mut cfg, &cli.command);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| dispatch(&cli.command, &cfg))
}

fn apply_command_flags(cfg: &mut RunConfig, cmd: &Command) {
    match cmd {
        Command::Simulate {
            stocks,
            years,
            truth_paths,
            ..
        } => {
            if let Some(n) = stocks {
                cfg.simulate.dgp.n_stocks = *n;
            }
            if let Some(y) = years {
                cfg.simulate.dgp.n_years = *y;
            }
            if let Some(p) = truth_paths {
                cfg.simulate.truth_paths = *p;
            }
        }
        Command::Train {
            test_years,
            ensemble,
            max_epochs,
            ..
        } => {
            if let Some(y) = test_years {
                cfg.schedule.test_years = y.clone();
            }
            if let Some(e) = ensemble {
                cfg.train.ensemble_size = *e;
            }
            if max_epochs.is_some() {
                cfg.train.max_epochs = *max_epochs;
            }
        }
        Command::GarchForecast { test_years, paths, .. } => {
            if let Some(y) = test_years {
                cfg.schedule.test_years = y.clone();
            }
            if let Some(p) = paths {
                cfg.garch.paths = *p;
            }
        }
        Command::ReproSim {
            stocks,
            years,
            reps,
            paths,
            ensemble,
        } => {
            let s = &mut cfg.study;
            if let Some(n) = stocks {
                s.dgp.n_stocks = *n;
            }
            if let Some(y) = years {
                s.dgp.n_years = *y;
            }
            if let Some(r) = reps {
                s.repetitions = *r;
            }
            if let Some(p) = paths {
                s.truth_paths = *p;
                s.garch_paths = (*p).max(1_000);
            }
            if let Some(e) = ensemble {
                s.train.ensemble_size = *e;
            }
        }
        _ => {}
    }
    if let Some(t) = &cfg.taus {
        cfg.study.taus = t.clone();
    }
    cfg.study.seed = cfg.seed;
}

/// Stages outputs, then writes the manifest and moves everything into
/// place.
struct Run<'a> {
    cfg: &'a RunConfig,
    out: OutputSet,
    manifest: Manifest,
}

impl<'a> Run<'a> {
    fn new(command: &str, cfg: &'a RunConfig) -> Result<Self> {
        Ok(Self {
            cfg,
            out: OutputSet::new(&cfg.out_dir)?,
            manifest: Manifest::new(command, cfg.seed, cfg.threads, cfg)?,
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.add_input(path)
    }

    fn finish(mut self) -> Result<()> {
        let name = format!("{}.manifest.json", self.manifest.command);
        self.manifest.outputs = self.out.names();
        let mut w = self.out.create(&name)?;
        self.manifest.write(&mut w)?;
        w.flush()?;
        drop(w);
        for p in self.out.commit()? {
            log::info!("wrote {}", p.display());
        }
        Ok(())
    }
}

fn read_panel(path: &Path) -> Result<Panel> {
    Panel::read_csv(reader(path)?)
}

fn read_records(path: &Path) -> Result<(TauGrid, Vec<ForecastRecord>)> {
    read_forecasts(reader(path)?)
}

fn dispatch(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    let mut run = Run::new(cmd.name(), cfg)?;
    match cmd {
        Command::Simulate { pool, .. } => simulate(&mut run, pool.as_deref())?,
        Command::Features { panel } => {
            run.input(panel)?;
            let ft = build_features(&read_panel(panel)?, &cfg.features)?;
            let mut w = run.out.create("features.csv")?;
            ft.write_csv(&mut w)?;
            w.flush()?;
        }
        Command::Train { panel, features, .. } => train(&mut run, panel, features.as_deref())?,
        Command::Forecast { features, model } => {
            run.input(features)?;
            let ft = FeatureTable::read_csv(reader(features)?)?;
            let (info, mut ens) = load_ensemble(model)?;
            if info.stock_features != ft.stock_names || info.market_features != ft.market_names {
                return Err(Error::Data(
                    "feature columns differ from the ones the model was trained on".into(),
                ));
            }
            let dates = month_end_indices(&ft.dates, &cfg.schedule.calendar);
            let records = predict_records(&mut ens, &ft, &dates, cfg.train.batch_size)?;
            let taus = TauGrid::new(info.taus)?;
            let mut w = run.out.create("forecasts.csv")?;
            write_forecasts(&records, &taus, &mut w)?;
            w.flush()?;
        }
        Command::Density { forecasts } => density(&mut run, forecasts)?,
        Command::Moments { forecasts } => moments(&mut run, forecasts)?,
        Command::GarchForecast { panel, .. } => garch(&mut run, panel)?,
        Command::Evaluate {
            panel,
            forecasts,
            names,
        } => evaluate(&mut run, panel, forecasts, names.as_deref())?,
        Command::Backtest {
            panel,
            forecasts,
            tau,
            caps,
        } => backtest_cmd(&mut run, panel, forecasts, *tau, caps.as_deref())?,
        Command::ReproTableE1 => {
            let rows = reproduce_table()?;
            write_table(&rows, std::io::stdout().lock())?;
            let mut w = run.out.create("table_e1.csv")?;
            write_table(&rows, &mut w)?;
            w.flush()?;
        }
        Command::ReproSim { .. } => {
            let report = run_study(&cfg.study, None)?;
            let levels = [0.3, 0.4, 0.5, 0.6, 0.7];
            let mut stdout = std::io::stdout().lock();
            for r in &report.reps {
                writeln!(
                    stdout,
                    "rep {}: {} stock-months, {:.0}s",
                    r.rep, r.stock_months, r.seconds
                )?;
                writeln!(stdout, "{:>6} {:>8} {:>8}", "tau", "GARCH", "NN")?;
                for (k, t) in report.taus.iter().enumerate() {
                    writeln!(stdout, "{t:>6.3} {:>8.3} {:>8.3}", r.rmse_garch[k], r.rmse_net[k])?;
                }
            }
            writeln!(
                stdout,
                "network below GARCH at 0.3..0.7 in {} of {} repetitions",
                report.wins(&levels),
                report.reps.len()
            )?;
            let mut w = run.out.create("sim_rmse.csv")?;
            report.write_csv(&mut w)?;
            w.flush()?;
        }
    }
    run.finish()
}

fn simulate(run: &mut Run, pool: Option<&Path>) -> Result<()> {
    let cfg = run.cfg;
    let spec = &cfg.simulate.dgp;
    let pool = match pool {
        Some(p) => {
            run.input(p)?;
            Some(read_pool(reader(p)?)?)
        }
        None => None,
    };
    let params = sample_stock_params(spec, pool.as_deref(), cfg.seed)?;
    let sim = simulate_panel(spec, &params, cfg.seed)?;
    let mut w = run.out.create("panel.csv")?;
    sim.panel.write_csv(&mut w)?;
    w.flush()?;
    let mut w = run.out.create("params.csv")?;
    write_pool(&params, &mut w)?;
    w.flush()?;
    if cfg.simulate.truth_paths > 0 {
        let taus = cfg.tau_grid()?;
        let stocks: Vec<usize> = (0..spec.n_stocks).collect();
        let mut rows = Vec::new();
        for m in spec.test_start_month().max(1)..spec.n_months() {
            rows.extend(true_quantiles(
                &sim,
                m,
                &stocks,
                &taus,
                cfg.simulate.truth_paths,
                cfg.seed,
            )?);
        }
        let mut w = run.out.create("true_quantiles.csv")?;
        write_true_quantiles(&sim, &rows, &taus, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn train(run: &mut Run, panel_path: &Path, features: Option<&Path>) -> Result<()> {
    let cfg = run.cfg;
    if cfg.schedule.test_years.is_empty() {
        return Err(Error::Config(
            "no test years: set schedule.test_years or --test-years".into(),
        ));
    }
    run.input(panel_path)?;
    let panel = read_panel(panel_path)?;
    let ft = match features {
        Some(p) => {
            run.input(p)?;
            FeatureTable::read_csv(reader(p)?)?
        }
        None => build_features(&panel, &cfg.features)?,
    };
    if ft.dates != panel.dates || ft.stocks != panel.stocks {
        return Err(Error::Data("features and panel cover different dates or stocks".into()));
    }
    let labels = forward_returns(&panel, cfg.schedule.horizon);
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let taus = cfg.tau_grid()?;
    let out = run_schedule(&ft, &labels, &cfg.net, &train_cfg, &taus, &cfg.schedule)?;
    let mut w = run.out.create("forecasts.csv")?;
    write_forecasts(&out.records, &taus, &mut w)?;
    w.flush()?;
    let mut w = run.out.create("training.csv")?;
    writeln!(w, "year,cutoff,rows,member,epochs,best_epoch,best_val_loss")?;
    for win in &out.windows {
        for (m, r) in win.members.iter().enumerate() {
            let best = r
                .val_losses
                .get(r.best_epoch.saturating_sub(1))
                .copied()
                .unwrap_or(f64::NAN);
            writeln!(
                w,
                "{},{},{},{m},{},{},{}",
                win.year,
                win.cutoff,
                win.rows,
                r.train_losses.len(),
                r.best_epoch,
                fmt_f64(best)
            )?;
        }
    }
    w.flush()?;
    if let Some(ens) = &out.ensemble {
        save_ensemble(ens, &ft.stock_names, &ft.market_names, &mut run.out)?;
    }
    Ok(())
}

fn density(run: &mut Run, path: &Path) -> Result<()> {
    run.input(path)?;
    let (taus, records) = read_records(path)?;
    let mut dens = run.out.create("density.csv")?;
    let mut tails = run.out.create("density_tails.csv")?;
    writeln!(dens, "stock_id,date,x,density")?;
    writeln!(tails, "stock_id,date,p_lower,p_upper,x_min,x_max,kind")?;
    let mut failed = 0;
    for r in &records {
        let g = QuantileGrid::new(taus.levels().to_vec(), r.q_raw.clone())?;
        let d = match fit_pdf(&g, &run.cfg.density) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("{} {}: {e}", r.stock, r.date);
                failed += 1;
                continue;
            }
        };
        for (x, y) in d.x.iter().zip(&d.density) {
            writeln!(dens, "{},{},{},{}", r.stock, r.date, fmt_f64(*x), fmt_f64(*y))?;
        }
        writeln!(
            tails,
            "{},{},{},{},{},{},{}",
            r.stock,
            r.date,
            fmt_f64(d.p_lower),
            fmt_f64(d.p_upper),
            fmt_f64(d.x_min),
            fmt_f64(d.x_max),
            d.kind.as_str()
        )?;
    }
    if failed == records.len() && failed > 0 {
        return Err(Error::Data("no forecast record produced a density".into()));
    }
    dens.flush()?;
    tails.flush()?;
    Ok(())
}

/// Mean and variance per record; `None` where the pipeline fails.
fn record_moments(records: &[ForecastRecord], taus: &TauGrid, opts: &DensityOptions) -> Vec<Option<(f64, f64)>> {
    records
        .iter()
        .map(|r| {
            let g = QuantileGrid::new(taus.levels().to_vec(), r.q_raw.clone()).ok()?;
            let (_, m) = moments_from_quantiles(&g, opts).ok()?;
            Some((m.mean, m.variance))
        })
        .collect()
}

fn moments(run: &mut Run, path: &Path) -> Result<()> {
    run.input(path)?;
    let (taus, records) = read_records(path)?;
    let mut w = run.out.create("moments.csv")?;
    writeln!(
        w,
        "stock_id,date,mean,variance,skewness,kurtosis,variance_adj,skewness_adj,kurtosis_adj,fallback_flag"
    )?;
    let mut failed = 0;
    for r in &records {
        let g = QuantileGrid::new(taus.levels().to_vec(), r.q_raw.clone())?;
        let (d, m) = match moments_from_quantiles(&g, &run.cfg.density) {
            Ok(x) => x,
            Err(e) => {
                log::warn!("{} {}: {e}", r.stock, r.date);
                failed += 1;
                continue;
            }
        };
        let a = m.adjusted.ok_or_else(|| Error::State("adjustment missing".into()))?;
        let f = fmt_f64;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.stock,
            r.date,
            f(m.mean),
            f(m.variance),
            f(m.skewness),
            f(m.kurtosis),
            f(a.variance),
            f(a.skewness),
            f(a.kurtosis),
            u8::from(d.is_fallback())
        )?;
    }
    if failed == records.len() && failed > 0 {
        return Err(Error::Data("no forecast record produced moments".into()));
    }
    w.flush()?;
    Ok(())
}

fn garch(run: &mut Run, panel_path: &Path) -> Result<()> {
    let cfg = run.cfg;
    run.input(panel_path)?;
    let panel = read_panel(panel_path)?;
    let taus = cfg.tau_grid()?;
    let years: Vec<i64> = if cfg.schedule.test_years.is_empty() {
        let cal = &cfg.schedule.calendar;
        let (a, b) = (cal.year(panel.dates[0]), cal.year(*panel.dates.last().unwrap_or(&0)));
        (a..=b).collect()
    } else {
        cfg.schedule.test_years.clone()
    };
    let origins: Vec<usize> = years
        .iter()
        .flat_map(|&y| forecast_origins(&panel.dates, &cfg.schedule.calendar, y))
        .filter(|&t| t + 1 >= cfg.garch.window.min(250))
        .collect();
    use rayon::prelude::*;
    let per_stock: Vec<Vec<ForecastRecord>> = (0..panel.n_stocks())
        .into_par_iter()
        .map(|i| -> Result<Vec<ForecastRecord>> {
            let series = panel.series(i);
            let mut start: Option<GarchParams> = None;
            let mut out = Vec::new();
            for &t in &origins {
                let lo = (t + 1).saturating_sub(cfg.garch.window);
                let window = &series[lo..=t];
                if window.iter().filter(|r| r.is_finite()).count() < cfg.garch.spec.min_obs {
                    continue;
                }
                let seed = cfg.seed ^ ((i as u64) << 32 | t as u64).wrapping_mul(0x2545_F491_4F6C_DD1D);
                let (fit, fc) = forecast_window(
                    window,
                    &cfg.garch.spec,
                    start.as_ref(),
                    cfg.schedule.horizon,
                    cfg.garch.paths,
                    &taus,
                    seed,
                )?;
                if !fit.fallback {
                    start = Some(fit.params);
                }
                out.push(ForecastRecord {
                    stock: panel.stocks[i].clone(),
                    date: panel.dates[t],
                    q_std: fc.quantiles.clone(),
                    q_raw: fc.quantiles,
                    sigma_bar: 1.0,
                    scale: 1.0,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut records: Vec<ForecastRecord> = per_stock.into_iter().flatten().collect();
    records.sort_by(|a, b| (a.date, &a.stock).cmp(&(b.date, &b.stock)));
    if records.is_empty() {
        return Err(Error::Data("no stock has enough history for a GARCH forecast".into()));
    }
    let mut w = run.out.create("forecasts.csv")?;
    write_forecasts(&records, &taus, &mut w)?;
    w.flush()?;
    Ok(())
}

fn evaluate(run: &mut Run, panel_path: &Path, files: &[PathBuf], names: Option<&[String]>) -> Result<()> {
    let cfg = run.cfg;
    run.input(panel_path)?;
    let panel = read_panel(panel_path)?;
    let names: Vec<String> = match names {
        Some(n) if n.len() == files.len() => n.to_vec(),
        Some(_) => return Err(Error::Config("--names needs one name per forecast file".into())),
        None => files
            .iter()
            .map(|p| {
                p.file_stem()
                    .map_or("model".into(), |s| s.to_string_lossy().into_owned())
            })
            .collect(),
    };
    let realized = realized_returns(&panel, cfg.evaluate.horizon);
    let vols = realized_vols(&panel, cfg.evaluate.horizon);
    let mut metrics = run.out.create("metrics.csv")?;
    writeln!(metrics, "model,records,avg_quantile_loss,crps,r2_mean,vol_mad,vol_rmse")?;
    let mut per_tau = run.out.create("tau_losses.csv")?;
    writeln!(per_tau, "model,tau,loss")?;
    let mut panels = Vec::new();
    for (name, file) in names.iter().zip(files) {
        run.input(file)?;
        let (taus, records) = read_records(file)?;
        let lp = loss_panel(&records, &realized, &taus)?;
        let avg = avg_quantile_loss(&records, &realized, &taus)?;
        let (_, _, crps) = crps_panel(&records, &realized, &taus)?;
        let mom = record_moments(&records, &taus, &cfg.density);
        let (mut mu, mut r, mut sd, mut rv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (rec, m) in records.iter().zip(&mom) {
            let Some((mean, var)) = m else { continue };
            let key = (rec.stock.clone(), rec.date);
            if let Some(&y) = realized.get(&key) {
                mu.push(*mean);
                r.push(y);
            }
            if let Some(&v) = vols.get(&key) {
                sd.push(var.sqrt());
                rv.push(v);
            }
        }
        let r2 = oos_r2(&mu, &r).unwrap_or(f64::NAN);
        let (mad, rmse) = vol_eval(&sd, &rv).unwrap_or((f64::NAN, f64::NAN));
        writeln!(
            metrics,
            "{name},{},{},{},{},{},{}",
            records.len(),
            fmt_f64(avg),
            fmt_f64(crps),
            fmt_f64(r2),
            fmt_f64(mad),
            fmt_f64(rmse)
        )?;
        for (t, l) in taus.levels().iter().zip(lp.per_tau()) {
            writeln!(per_tau, "{name},{t},{}", fmt_f64(l))?;
        }
        panels.push(lp);
    }
    metrics.flush()?;
    per_tau.flush()?;
    let mut dm = run.out.create("dm.csv")?;
    writeln!(dm, "model_a,model_b,statistic,mean_diff,se,n")?;
    for a in 0..panels.len() {
        for b in a + 1..panels.len() {
            match dm_loss_panels(&panels[a], &panels[b], cfg.evaluate.lags) {
                Ok(res) => writeln!(
                    dm,
                    "{},{},{},{},{},{}",
                    names[a],
                    names[b],
                    res.statistic.map_or(String::new(), fmt_f64),
                    fmt_f64(res.mean_diff),
                    res.se.map_or(String::new(), fmt_f64),
                    res.n
                )?,
                Err(e) => log::warn!("DM {} vs {}: {e}", names[a], names[b]),
            }
        }
    }
    dm.flush()?;
    Ok(())
}

fn read_caps(path: &Path) -> Result<Realized> {
    #[derive(Deserialize)]
    struct Row {
        stock_id: String,
        date: i64,
        cap: f64,
    }
    let mut rdr = csv::Reader::from_reader(reader(path)?);
    let mut out = Realized::new();
    for row in rdr.deserialize() {
        let r: Row = row?;
        out.insert((r.stock_id, r.date), r.cap);
    }
    Ok(out)
}

fn backtest_cmd(run: &mut Run, panel_path: &Path, file: &Path, tau: Option<f64>, caps: Option<&Path>) -> Result<()> {
    let cfg = run.cfg;
    run.input(panel_path)?;
    run.input(file)?;
    let panel = read_panel(panel_path)?;
    let (taus, records) = read_records(file)?;
    let signals: Vec<Signal> = match tau {
        Some(t) => {
            let k = taus
                .levels()
                .iter()
                .position(|x| (x - t).abs() < 1e-12)
                .ok_or_else(|| Error::Config(format!("tau {t} is not in the forecast grid")))?;
            records
                .iter()
                .map(|r| Signal {
                    stock: r.stock.clone(),
                    date: r.date,
                    value: r.q_raw[k],
                })
                .collect()
        }
        None => records
            .iter()
            .zip(record_moments(&records, &taus, &cfg.density))
            .filter_map(|(r, m)| {
                m.map(|(mean, _)| Signal {
                    stock: r.stock.clone(),
                    date: r.date,
                    value: mean,
                })
            })
            .collect(),
    };
    let caps = match caps {
        Some(p) => {
            run.input(p)?;
            Some(read_caps(p)?)
        }
        None => None,
    };
    let spec = SortSpec {
        weighting: if caps.is_some() {
            Weighting::Value
        } else {
            cfg.backtest.weighting
        },
        ..cfg.backtest
    };
    let realized = realized_returns(&panel, cfg.evaluate.horizon);
    let p = backtest(&signals, &realized, caps.as_ref(), &spec)?;
    let mut w = run.out.create("portfolio.csv")?;
    writeln!(w, "date,long,short,long_short")?;
    for k in 0..p.dates.len() {
        writeln!(
            w,
            "{},{},{},{}",
            p.dates[k],
            fmt_f64(p.long[k]),
            fmt_f64(p.short[k]),
            fmt_f64(p.long_short[k])
        )?;
    }
    w.flush()?;
    let mut w = run.out.create("portfolio_summary.csv")?;
    writeln!(w, "leg,mean,vol,sharpe,t_stat")?;
    for (leg, s) in [
        ("long", &p.long_stats),
        ("short", &p.short_stats),
        ("long_short", &p.long_short_stats),
    ] {
        writeln!(
            w,
            "{leg},{},{},{},{}",
            fmt_f64(s.mean),
            fmt_f64(s.vol),
            s.sharpe.map_or(String::new(), fmt_f64),
            s.t_stat.map_or(String::new(), fmt_f64)
        )?;
    }
    w.flush()?;
    Ok(())
}
