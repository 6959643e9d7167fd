use proptest::prelude::*;
use statrs::distribution::{Continuous, ContinuousCDF, Normal, StudentsT};

use super::*;
use crate::moments::nct::NonCentralT;
use crate::taus::TauGrid;

fn grid_from(taus: &[f64], values: Vec<f64>) -> QuantileGrid {
    QuantileGrid::new(taus.to_vec(), values).unwrap()
}

fn normal_grid() -> QuantileGrid {
    let taus = TauGrid::standard();
    let n = Normal::new(0.0, 1.0).unwrap();
    grid_from(taus.levels(), taus.levels().iter().map(|&p| n.inverse_cdf(p)).collect())
}

fn six_taus() -> Vec<f64> {
    vec![0.05, 0.1, 0.3, 0.5, 0.7, 0.9]
}

#[test]
fn preprocess_collapses_leading_total_loss() {
    let taus = vec![0.01, 0.05, 0.1, 0.3, 0.5, 0.7, 0.9];
    let g = grid_from(&taus, vec![-1.0, -1.0, -0.5, -0.1, 0.0, 0.1, 0.3]);
    let out = preprocess_quantiles(&g, DEFAULT_EPS).unwrap();
    assert_eq!(out.taus, taus[1..].to_vec());
    assert_eq!(out.values, vec![-1.0, -0.5, -0.1, 0.0, 0.1, 0.3]);
}

#[test]
fn preprocess_pushes_ties_apart() {
    let g = grid_from(&six_taus(), vec![-0.2, 0.1, 0.1, 0.2, 0.3, 0.4]);
    let out = preprocess_quantiles(&g, 1e-4).unwrap();
    assert_eq!(out.values[1], 0.1);
    assert!((out.values[2] - 0.1001).abs() < 1e-15);
}

#[test]
fn preprocess_keeps_increasing_grid() {
    let g = grid_from(&six_taus(), vec![-0.2, -0.1, 0.0, 0.1, 0.2, 0.3]);
    assert_eq!(preprocess_quantiles(&g, 1e-4).unwrap(), g);
}

#[test]
fn short_grid_is_rejected() {
    let taus = vec![0.1, 0.3, 0.5, 0.7, 0.9];
    let g = grid_from(&taus, vec![-0.2, -0.1, 0.0, 0.1, 0.2]);
    assert!(matches!(
        preprocess_quantiles(&g, 1e-4),
        Err(Error::InsufficientGrid { len: 5 })
    ));
    // Collapse can shrink a valid grid below the minimum.
    let g = grid_from(&six_taus(), vec![-1.0, -1.0, 0.0, 0.1, 0.2, 0.3]);
    assert!(matches!(
        fit_pdf(&g, &DensityOptions::default()),
        Err(Error::InsufficientGrid { len: 5 })
    ));
}

#[test]
fn dense_grid_sizes_and_spacing() {
    let x = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
    let d = dense_grid(&x, 100);
    assert_eq!(d.len(), 300);
    assert_eq!(d[0], 1.0);
    assert!((d[1] - d[0] - 0.01).abs() < 1e-12);
    // Endpoint shared by adjacent intervals appears once.
    assert_eq!(d.iter().filter(|&&v| v == 2.0).count(), 1);
}

#[test]
fn normal_density_at_zero() {
    let d = fit_pdf(&normal_grid(), &DensityOptions::default()).unwrap();
    assert_eq!(d.kind, SplineKind::Cubic);
    let i = d.x.partition_point(|&x| x < 0.0);
    let at0 = d.cdf.derivative(0.0);
    assert!((at0 - 0.398_942_28).abs() < 0.01 * 0.398_942_28, "{at0}");
    assert!((d.density[i] - 0.398_942_28).abs() < 0.01 * 0.398_942_28);
    assert!((eval_cdf(&d, 0.0) - 0.5).abs() < 1e-3);
}

#[test]
fn cdf_hits_knots_and_tail_mass() {
    let taus = TauGrid::standard();
    let n = Normal::new(0.0, 0.1).unwrap();
    let g = grid_from(taus.levels(), taus.levels().iter().map(|&p| n.inverse_cdf(p)).collect());
    let d = fit_pdf(&g, &DensityOptions::default()).unwrap();
    for (x, t) in g.values.iter().zip(&g.taus) {
        assert!((eval_cdf(&d, *x) - t).abs() < 1e-12, "{x} {t}");
    }
    assert_eq!(eval_cdf(&d, -50.0), d.p_lower);
    assert!((d.p_lower - 0.00005).abs() < 1e-3);
    assert!((d.p_upper - 0.00005).abs() < 1e-3);
    assert!((d.total_mass() - 1.0).abs() < 1e-2);
}

#[test]
fn near_atom_falls_back_to_linear() {
    // Most of the mass squeezed into a tiny interval around zero.
    let taus = TauGrid::standard();
    let values: Vec<f64> = taus
        .levels()
        .iter()
        .map(|&p| {
            if (0.15..=0.85).contains(&p) {
                (p - 0.5) * 1e-3
            } else if p < 0.5 {
                -0.3 + p
            } else {
                0.3 - (1.0 - p)
            }
        })
        .collect();
    let d = fit_pdf(&grid_from(taus.levels(), values), &DensityOptions::default()).unwrap();
    assert!(d.is_fallback());
    assert!(d.density.iter().all(|&v| v >= DEFAULT_MIN_DENSITY));
}

#[test]
fn truncates_at_total_loss() {
    let taus = TauGrid::standard();
    let n = Normal::new(0.0, 0.6).unwrap();
    let values: Vec<f64> = taus.levels().iter().map(|&p| n.inverse_cdf(p)).collect();
    let d = fit_pdf(&grid_from(taus.levels(), values), &DensityOptions::default()).unwrap();
    assert_eq!(d.x_min, -1.0);
    assert!(d.x[0] >= -1.0);
    assert!((d.p_lower - n.cdf(-1.0)).abs() < 1e-3);
}

fn central_pdf_error(q: impl Fn(f64) -> f64, pdf: impl Fn(f64) -> f64) -> f64 {
    let taus = TauGrid::standard();
    let values: Vec<f64> = taus.levels().iter().map(|&p| q(p)).collect();
    let d = fit_pdf(&grid_from(taus.levels(), values), &DensityOptions::default()).unwrap();
    let (lo, hi) = (q(0.1), q(0.9));
    d.x.iter()
        .zip(&d.density)
        .filter(|(x, _)| **x >= lo && **x <= hi)
        .map(|(x, v)| ((v - pdf(*x)) / pdf(*x)).abs())
        .fold(0.0, f64::max)
}

#[test]
fn pdf_recovery_normal_t_nct() {
    let n = Normal::new(0.0, 0.1).unwrap();
    let e = central_pdf_error(|p| n.inverse_cdf(p), |x| n.pdf(x));
    assert!(e < 0.02, "normal {e}");
    for df in [5.0, 10.0] {
        let t = StudentsT::new(0.0, 0.1, df).unwrap();
        let e = central_pdf_error(|p| t.inverse_cdf(p), |x| t.pdf(x));
        assert!(e < 0.02, "t{df} {e}");
    }
    let nct = NonCentralT::new(6.0, 1.0, 0.1).unwrap();
    let e = central_pdf_error(|p| nct.quantile(p).unwrap(), |x| nct.pdf(x));
    assert!(e < 0.02, "nct {e}");
}

#[test]
fn csv_dump_has_sidecar() {
    let d = fit_pdf(&normal_grid(), &DensityOptions::default()).unwrap();
    let mut buf = Vec::new();
    d.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("x,density\n"));
    assert_eq!(text.lines().count(), d.x.len() + 2);
    assert!(text.lines().last().unwrap().starts_with("# p_lower="));
}

proptest! {
    #[test]
    fn preprocess_output_strictly_increasing(values in proptest::collection::vec(-2.0f64..2.0, 8)) {
        let taus: Vec<f64> = (1..=8).map(|i| i as f64 / 9.0).collect();
        let g = QuantileGrid::new(taus, values).unwrap();
        if let Ok(out) = preprocess_quantiles(&g, DEFAULT_EPS) {
            prop_assert!(out.values.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn density_respects_floor(values in proptest::collection::vec(-0.5f64..0.5, 12)) {
        let taus: Vec<f64> = (1..=12).map(|i| i as f64 / 13.0).collect();
        let mut v = values;
        v.sort_by(f64::total_cmp);
        let g = QuantileGrid::new(taus, v).unwrap();
        let d = fit_pdf(&g, &DensityOptions::default()).unwrap();
        prop_assert!(d.density.iter().all(|&x| x >= DEFAULT_MIN_DENSITY));
        prop_assert!(d.x.windows(2).all(|w| w[1] > w[0]));
    }
}
