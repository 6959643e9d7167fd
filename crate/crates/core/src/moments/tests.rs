use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use super::*;
use crate::density::{DensityOptions, QuantileGrid, SplineKind};
use crate::taus::TauGrid;

fn pipeline(q: impl Fn(f64) -> f64) -> MomentSet {
    let taus = TauGrid::standard();
    let values = taus.levels().iter().map(|&p| q(p)).collect();
    let g = QuantileGrid::new(taus.levels().to_vec(), values).unwrap();
    moments_from_quantiles(&g, &DensityOptions::default()).unwrap().1
}

fn flat_density(x: Vec<f64>, density: Vec<f64>, p_lower: f64, p_upper: f64) -> DensityApprox {
    let x_min = x[0];
    let x_max = *x.last().unwrap();
    let cdf =
        crate::density::SplineCdf::Linear(crate::density::LinearSpline::fit(&[x_min, x_max], &[0.0, 1.0]).unwrap());
    DensityApprox {
        x,
        density,
        p_lower,
        p_upper,
        x_min,
        x_max,
        kind: SplineKind::Linear,
        cdf,
    }
}

#[test]
fn uniform_density_is_exact() {
    let x: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let d = flat_density(x, vec![1.0; 11], 0.0, 0.0);
    let m = integrate_moments(&d).unwrap();
    assert!((m.m0 - 1.0).abs() < 1e-15);
    assert!((m.mean - 0.5).abs() < 1e-15);
    assert!((m.raw[1] - 1.0 / 3.0).abs() < 1e-15);
    assert!((m.variance - 1.0 / 12.0).abs() < 1e-15);
    assert!(m.skewness.abs() < 1e-12);
    assert!((m.kurtosis - 1.8).abs() < 1e-12);
}

#[test]
fn zero_variance_is_degenerate() {
    assert!(matches!(
        MomentSet::from_raw(1.0, [0.5, 0.25, 0.125, 0.0625]),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn normal_and_t_rows() {
    // Distributions at scale 0.1; variances reported per unit scale.
    let n = Normal::new(0.0, 0.1).unwrap();
    let m = pipeline(|p| n.inverse_cdf(p));
    assert!((m.variance / 0.01 - 0.998).abs() < 0.01, "{m:?}");
    assert!((m.kurtosis - 2.980).abs() < 0.01);
    assert!((m.m0 - 1.0).abs() < 1e-3);
    assert!(m.mean.abs() < 1e-6);

    let t = StudentsT::new(0.0, 0.1, 10.0).unwrap();
    let m = pipeline(|p| t.inverse_cdf(p));
    assert!((m.variance / 0.01 - 1.244).abs() < 0.02, "{m:?}");
    assert!((m.kurtosis - 3.852).abs() < 0.02);
    let adj = m.adjusted.unwrap();
    assert!((adj.variance / 0.01 - 1.250).abs() < 0.01);
    assert!((adj.kurtosis - 4.242).abs() < 0.02);
}

#[test]
fn adjustment_arithmetic() {
    let a = adjust_moments(1.0, 0.0, 3.0).unwrap();
    assert!((a.variance - 1.0023).abs() < 1e-12);
    assert_eq!(a.skewness, 0.0);
    assert!((a.kurtosis - 3.0).abs() < 1e-12);

    let a = adjust_moments(1.0, 1.0, 3.0).unwrap();
    assert!((a.variance - 1.0002).abs() < 1e-12);
    assert!((a.skewness - 1.0211).abs() < 1e-12);
    assert!((a.kurtosis - 2.2605).abs() < 1e-12);

    let a = adjust_moments(1.244, -0.0, 3.852).unwrap();
    assert!((a.variance - 1.250).abs() < 1e-3);
    assert!((a.skewness - 0.009).abs() < 1e-3);
    assert!((a.kurtosis - 4.242).abs() < 1e-3);

    assert!(adjust_moments(0.0, 0.0, 3.0).is_err());
    // Far outside the fitted region the kurtosis is floored.
    assert_eq!(adjust_moments(1.0, 5.0, 1.5).unwrap().kurtosis, MIN_ADJUSTED_KURTOSIS);
}

#[test]
fn affine_equivariance() {
    let t = StudentsT::new(0.0, 0.05, 6.0).unwrap();
    let base = pipeline(|p| t.inverse_cdf(p));
    let (a, b) = (1.7, 0.02);
    let moved = pipeline(|p| a * t.inverse_cdf(p) + b);
    assert!((moved.mean - (a * base.mean + b)).abs() < 1e-6 * (a * base.mean + b).abs().max(1e-3));
    assert!((moved.variance / (a * a * base.variance) - 1.0).abs() < 1e-6);
    assert!((moved.skewness - base.skewness).abs() < 1e-6);
    assert!((moved.kurtosis / base.kurtosis - 1.0).abs() < 1e-6);
}

#[test]
fn symmetric_input_has_no_skew() {
    // Narrow enough that the -1 truncation does not cut the left tail.
    let t = StudentsT::new(0.0, 0.05, 5.0).unwrap();
    let m = pipeline(|p| t.inverse_cdf(p));
    assert!(m.mean.abs() < 1e-6, "{}", m.mean);
    assert!(m.skewness.abs() < 1e-3);
}

#[test]
fn matches_riemann_sum() {
    let x = vec![-0.3, -0.1, 0.0, 0.05, 0.2, 0.4];
    let d = vec![0.5, 1.5, 3.0, 2.5, 1.0, 0.2];
    let m = piecewise_linear_moments(&x, &d);
    let n = 1_000_000;
    let h = (x[5] - x[0]) / n as f64;
    let mut brute = [0.0; 5];
    let mut seg = 0;
    for i in 0..n {
        let t = x[0] + (i as f64 + 0.5) * h;
        while t > x[seg + 1] {
            seg += 1;
        }
        let w = (t - x[seg]) / (x[seg + 1] - x[seg]);
        let dens = d[seg] * (1.0 - w) + d[seg + 1] * w;
        for (k, b) in brute.iter_mut().enumerate() {
            *b += dens * t.powi(k as i32) * h;
        }
    }
    for k in 0..5 {
        assert!((m[k] - brute[k]).abs() < 1e-8, "k={k} {} {}", m[k], brute[k]);
    }
}

#[test]
fn refit_small_sample_signs() {
    let spec = RefitSpec {
        n: 600,
        seed: 3,
        ..RefitSpec::default()
    };
    let r = refit_adjustment(&spec).unwrap();
    let c = r.coefficients;
    assert!((c.variance[0] - 1.0023).abs() < 0.01, "{r:?}");
    assert!(c.skewness[0] > 0.9 && c.skewness[0] < 1.1);
    assert!(c.kurtosis[0] > 1.0 && c.kurtosis[1] > 0.0 && c.kurtosis[2] < 0.0);
    assert!(r.discarded > 0);
}
