//! Builds the stock and market feature table of a simulated panel.

use distforge::features::{build_features, FeatureConfig};
use distforge::market_sim::{sample_stock_params, simulate_panel, DgpSpec};

fn main() -> distforge::Result<()> {
    let spec = DgpSpec {
        n_stocks: 5,
        n_years: 2,
        ..DgpSpec::default()
    };
    let sim = simulate_panel(&spec, &sample_stock_params(&spec, None, 1)?, 1)?;
    let ft = build_features(&sim.panel, &FeatureConfig::default())?;
    println!("{} stock features: {}", ft.width(), ft.stock_names.join(", "));
    println!("{} market features: {}", ft.market_width(), ft.market_names.join(", "));
    let t = ft.n_dates() - 1;
    println!("sigma_bar on the last date: {:.5}", ft.sigma_bar[t]);
    for (name, v) in ft.stock_names.iter().zip(ft.x(t, 0)) {
        println!("  {name:<24} {v:+.4}");
    }
    Ok(())
}
