//! Moments of a skewed distribution from its quantiles, before and after
//! the bias adjustment.

use distforge::density::{DensityOptions, QuantileGrid};
use distforge::moments::moments_from_quantiles;
use distforge::moments::nct::NonCentralT;
use distforge::TauGrid;

fn main() -> distforge::Result<()> {
    let taus = TauGrid::standard();
    let nct = NonCentralT::new(6.0, 1.5, 0.02)?;
    let g = QuantileGrid::new(taus.levels().to_vec(), nct.quantiles(taus.levels())?)?;
    let (_, m) = moments_from_quantiles(&g, &DensityOptions::default())?;
    let exact = nct.moments()?;
    let adj = m.adjusted.expect("adjusted moments are always filled in");
    println!("{:>10} {:>12} {:>12} {:>12}", "", "exact", "naive", "adjusted");
    println!("{:>10} {:>12.6} {:>12.6} {:>12}", "mean", exact.mean, m.mean, "");
    println!(
        "{:>10} {:>12.3e} {:>12.3e} {:>12.3e}",
        "variance", exact.variance, m.variance, adj.variance
    );
    println!(
        "{:>10} {:>12.4} {:>12.4} {:>12.4}",
        "skewness", exact.skewness, m.skewness, adj.skewness
    );
    println!(
        "{:>10} {:>12.4} {:>12.4} {:>12.4}",
        "kurtosis", exact.kurtosis, m.kurtosis, adj.kurtosis
    );
    Ok(())
}
