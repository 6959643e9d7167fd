//! Simulates a small one-factor market and prints per-stock summary
//! statistics of the daily returns.

use distforge::market_sim::{sample_stock_params, simulate_panel, DgpSpec};

fn main() -> distforge::Result<()> {
    let spec = DgpSpec {
        n_stocks: 8,
        n_years: 3,
        ..DgpSpec::default()
    };
    let params = sample_stock_params(&spec, None, 42)?;
    let sim = simulate_panel(&spec, &params, 42)?;
    println!("{} days x {} stocks", sim.panel.n_dates(), sim.panel.n_stocks());
    println!(
        "{:>6} {:>6} {:>6} {:>6} {:>9} {:>9}",
        "stock", "beta", "alpha", "garch", "mean", "sd"
    );
    for (i, p) in params.iter().enumerate() {
        let r = sim.panel.series(i);
        let m = r.iter().sum::<f64>() / r.len() as f64;
        let sd = (r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (r.len() - 1) as f64).sqrt();
        println!(
            "{:>6} {:>6.2} {:>6.3} {:>6.3} {:>9.5} {:>9.5}",
            sim.panel.stocks[i], p.beta_mkt, p.alpha, p.beta, m, sd
        );
    }
    Ok(())
}
