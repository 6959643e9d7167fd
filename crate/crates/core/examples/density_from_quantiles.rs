//! Turns 37 quantiles of a Student t into a density with tail masses and
//! compares it to the analytic pdf.

use distforge::density::{fit_pdf, DensityOptions, QuantileGrid};
use distforge::TauGrid;
use statrs::distribution::{Continuous, ContinuousCDF, StudentsT};

fn main() -> distforge::Result<()> {
    let taus = TauGrid::standard();
    let t = StudentsT::new(0.0, 0.05, 5.0).expect("valid t");
    let q: Vec<f64> = taus.levels().iter().map(|&p| t.inverse_cdf(p)).collect();
    let d = fit_pdf(
        &QuantileGrid::new(taus.levels().to_vec(), q)?,
        &DensityOptions::default(),
    )?;
    println!("spline {}, {} grid points", d.kind.as_str(), d.x.len());
    println!(
        "tail masses {:.2e} / {:.2e}, total {:.6}",
        d.p_lower,
        d.p_upper,
        d.total_mass()
    );
    println!("{:>9} {:>9} {:>9}", "x", "fitted", "exact");
    for k in (0..d.x.len()).step_by(d.x.len() / 12) {
        println!("{:>9.4} {:>9.4} {:>9.4}", d.x[k], d.density[k], t.pdf(d.x[k]));
    }
    Ok(())
}
