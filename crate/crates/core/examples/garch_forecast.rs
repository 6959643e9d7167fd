//! Fits a GARCH(1,1) with t innovations to a simulated path and produces a
//! Monte Carlo quantile forecast of the next month's return.

use distforge::garch::{forecast_window, simulate_path, GarchParams, GarchSpec, MeanMode};
use distforge::TauGrid;

fn main() -> distforge::Result<()> {
    let truth = GarchParams {
        omega: 4e-6,
        alpha: 0.07,
        beta: 0.9,
        gamma: 0.0,
        df: 7.0,
        mu: MeanMode::fixed_mu(0.0),
    };
    let returns = simulate_path(&truth, 3_000, 11)?;
    let taus = TauGrid::new(vec![0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99])?;
    let (fit, fc) = forecast_window(&returns, &GarchSpec::default(), None, 22, 20_000, &taus, 3)?;
    let p = fit.params;
    println!(
        "true   ω={:.2e} α={:.3} β={:.3} df={:.1}",
        truth.omega, truth.alpha, truth.beta, truth.df
    );
    println!(
        "fitted ω={:.2e} α={:.3} β={:.3} df={:.1} (converged {})",
        p.omega, p.alpha, p.beta, p.df, fit.converged
    );
    println!("22-day volatility {:.4}", fc.volatility);
    for (t, q) in taus.levels().iter().zip(&fc.quantiles) {
        println!("  q({t:<4}) = {q:+.4}");
    }
    Ok(())
}
