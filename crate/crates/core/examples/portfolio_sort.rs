//! Decile sorts on a noisy signal of next-period returns.

use distforge::evaluation::Realized;
use distforge::portfolio::{backtest, Signal, SortSpec};
use rand::Rng as _;

fn main() -> distforge::Result<()> {
    let mut rng = distforge::seeded(5);
    let mut realized = Realized::new();
    let mut signals = Vec::new();
    for date in 0..120 {
        for i in 0..200 {
            let stock = format!("s{i:03}");
            let edge: f64 = rng.random_range(-0.01..0.01);
            realized.insert((stock.clone(), date), edge + rng.random_range(-0.1..0.1));
            signals.push(Signal {
                stock,
                date,
                value: edge + rng.random_range(-0.02..0.02),
            });
        }
    }
    let p = backtest(&signals, &realized, None, &SortSpec::default())?;
    for (name, s) in [
        ("long", p.long_stats),
        ("short", p.short_stats),
        ("long-short", p.long_short_stats),
    ] {
        println!(
            "{name:<10} mean {:+.4} vol {:.4} sharpe {:>6.2} t {:>6.2}",
            s.mean,
            s.vol,
            s.sharpe.unwrap_or(f64::NAN),
            s.t_stat.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
