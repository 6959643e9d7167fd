//! Scores two quantile forecasters of a Student t return with average
//! quantile loss and CRPS, and compares them with a Diebold-Mariano test.

use distforge::evaluation::{avg_quantile_loss, crps_panel, dm_loss_panels, loss_panel, Realized};
use distforge::qnn::ForecastRecord;
use distforge::TauGrid;
use rand::Rng as _;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

fn main() -> distforge::Result<()> {
    let taus = TauGrid::standard();
    let t = StudentsT::new(0.0, 0.05, 4.0).expect("valid t");
    let normal = Normal::new(0.0, 0.05 * 2f64.sqrt()).expect("valid normal");
    let mut rng = distforge::seeded(9);
    let mut realized = Realized::new();
    let (mut good, mut bad) = (Vec::new(), Vec::new());
    for date in 0..240 {
        for i in 0..25 {
            let stock = format!("s{i:02}");
            realized.insert((stock.clone(), date), t.inverse_cdf(rng.random_range(0.0..1.0)));
            let record = |q: Vec<f64>| ForecastRecord {
                stock: stock.clone(),
                date,
                q_std: q.clone(),
                q_raw: q,
                sigma_bar: 1.0,
                scale: 1.0,
            };
            good.push(record(taus.levels().iter().map(|&p| t.inverse_cdf(p)).collect()));
            bad.push(record(taus.levels().iter().map(|&p| normal.inverse_cdf(p)).collect()));
        }
    }
    for (name, recs) in [("student t", &good), ("normal", &bad)] {
        let (_, _, c) = crps_panel(recs, &realized, &taus)?;
        println!(
            "{name:<10} avg quantile loss {:.4}  CRPS {c:.5}",
            avg_quantile_loss(recs, &realized, &taus)?
        );
    }
    let dm = dm_loss_panels(
        &loss_panel(&bad, &realized, &taus)?,
        &loss_panel(&good, &realized, &taus)?,
        12,
    )?;
    println!("DM statistic (normal vs t): {:.2}", dm.statistic.unwrap_or(f64::NAN));
    Ok(())
}
