//! Trains a small two-stage quantile ensemble on a simulated panel and
//! forecasts the last year out of sample.
//!
//! `RUST_LOG=info cargo run --release --example train_two_stage`

use distforge::features::{build_features, forward_returns, FeatureConfig};
use distforge::market_sim::{sample_stock_params, simulate_panel, DgpSpec};
use distforge::qnn::{run_schedule, NetConfig, Refit, RowSelection, Schedule, TrainConfig};
use distforge::TauGrid;

fn main() -> distforge::Result<()> {
    env_logger::init();
    let spec = DgpSpec {
        n_stocks: 20,
        n_years: 4,
        ..DgpSpec::default()
    };
    let sim = simulate_panel(&spec, &sample_stock_params(&spec, None, 3)?, 3)?;
    let ft = build_features(&sim.panel, &FeatureConfig::default())?;
    let labels = forward_returns(&sim.panel, 22);
    let net = NetConfig {
        stage_hidden: vec![32, 32, 4, 32],
        ..NetConfig::default()
    };
    let train = TrainConfig {
        batch_size: 256,
        ensemble_size: 3,
        ..TrainConfig::default()
    };
    let schedule = Schedule {
        test_years: vec![3],
        refit: Refit::Once,
        rows: RowSelection::Every(5),
        calendar: spec.calendar(),
        ..Schedule::default()
    };
    let taus = TauGrid::standard();
    let out = run_schedule(&ft, &labels, &net, &train, &taus, &schedule)?;
    for w in &out.windows {
        for (m, r) in w.members.iter().enumerate() {
            println!(
                "year {} member {m}: best epoch {} of {}",
                w.year,
                r.best_epoch,
                r.train_losses.len()
            );
        }
    }
    let r = &out.records[0];
    let mid = taus.position(0.5).expect("median on the grid");
    println!(
        "{} forecasts; first: stock {} date {}",
        out.records.len(),
        r.stock,
        r.date
    );
    println!(
        "  q05 {:+.4}  median {:+.4}  q95 {:+.4}",
        r.q_raw[8],
        r.q_raw[mid],
        r.q_raw[taus.len() - 9]
    );
    Ok(())
}
