//! Runs the simulation study at a configurable scale and prints the RMSE
//! and bias of the network and the GARCH baseline against the true
//! quantiles.
//!
//! `cargo run --release --example sim_study -- [--once] [stocks] [years] [paths] [members] [reps] [only_rep]`
//!
//! `--once` trains a single ensemble before the first test year instead of
//! refitting every year.

use distforge::study::{run_repetition, run_study, StudyConfig, StudyReport};

fn main() -> distforge::Result<()> {
    env_logger::init();
    let (flags, args): (Vec<String>, Vec<String>) = std::env::args().skip(1).partition(|a| a.starts_with("--"));
    let arg = |k: usize| args.get(k - 1).and_then(|s| s.parse::<usize>().ok());
    let mut cfg = StudyConfig::default();
    cfg.dgp.n_stocks = arg(1).unwrap_or(20);
    cfg.dgp.n_years = arg(2).unwrap_or(6);
    cfg.truth_paths = arg(3).unwrap_or(2_000);
    cfg.garch_paths = cfg.truth_paths.max(1_000);
    cfg.train.ensemble_size = arg(4).unwrap_or(2);
    cfg.repetitions = arg(5).unwrap_or(1);
    if flags.iter().any(|f| f == "--once") {
        cfg.refit = distforge::qnn::Refit::Once;
    }
    let report = match arg(6) {
        Some(rep) => StudyReport {
            taus: cfg.taus.clone(),
            reps: vec![run_repetition(&cfg, rep, None)?],
        },
        None => run_study(&cfg, None)?,
    };
    for r in &report.reps {
        println!(
            "rep {}: {} stock-months, {} excluded, {} training rows, {} GARCH fallbacks, {:.0}s",
            r.rep, r.stock_months, r.excluded, r.train_rows, r.garch_fallbacks, r.seconds
        );
        println!(
            "{:>6} {:>8} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "tau", "mean", "sd", "GARCH", "NN", "b_GARCH", "b_NN"
        );
        for (k, t) in report.taus.iter().enumerate() {
            println!(
                "{:>6.3} {:>8.3} {:>7.3} {:>7.3} {:>7.3} {:>+7.3} {:>+7.3}",
                t, r.truth_mean[k], r.truth_sd[k], r.rmse_garch[k], r.rmse_net[k], r.bias_garch[k], r.bias_net[k]
            );
        }
    }
    println!("wins at 0.3..0.7: {}", report.wins(&[0.3, 0.4, 0.5, 0.6, 0.7]));
    Ok(())
}
