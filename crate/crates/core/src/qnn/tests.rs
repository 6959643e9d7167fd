use rand::Rng as _;

use super::*;
use crate::nn::Tensor2;
use crate::seeded;

fn small_cfg(arch: Architecture) -> NetConfig {
    NetConfig {
        architecture: arch,
        stage_hidden: vec![6, 3, 5],
        market_hidden: vec![4],
        benchmark_width: 6,
        ..NetConfig::default()
    }
}

fn grid() -> TauGrid {
    TauGrid::new(vec![0.05, 0.25, 0.5, 0.75, 0.95]).unwrap()
}

fn random(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Tensor2 {
    let mut rng = seeded(seed);
    Tensor2::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn pinball_definition() {
    assert_eq!(pinball(0.9, 1.0).unwrap(), 0.9);
    assert!((pinball(0.9, -1.0).unwrap() - 0.1).abs() < 1e-15);
    for t in [0.01, 0.5, 0.99] {
        assert_eq!(pinball(t, 0.0).unwrap(), 0.0);
    }
    assert!(pinball(0.0, 1.0).is_err());
    assert!(pinball(1.0, 1.0).is_err());
}

#[test]
fn aggregated_loss_examples() {
    let taus = TauGrid::new(vec![0.5]).unwrap();
    let q = Tensor2::from_vec(1, 1, vec![0.0]).unwrap();
    assert_eq!(aggregated_loss(&[1.0], &[1.0], &q, &q, &taus).unwrap(), 1.0);
    let perfect = Tensor2::from_vec(1, 1, vec![1.0]).unwrap();
    assert_eq!(aggregated_loss(&[1.0], &[1.0], &perfect, &perfect, &taus).unwrap(), 0.0);
}

#[test]
fn aggregated_loss_matches_double_loop() {
    let taus = grid();
    let mut rng = seeded(3);
    let b = 9;
    let r: Vec<f64> = (0..b).map(|_| rng.random_range(-0.5..0.5)).collect();
    let rs: Vec<f64> = (0..b).map(|_| rng.random_range(-3.0..3.0)).collect();
    let q = random(b, 5, -0.5, 0.5, 4);
    let qs = random(b, 5, -3.0, 3.0, 5);
    let mut naive = 0.0;
    for i in 0..b {
        for (k, &t) in taus.levels().iter().enumerate() {
            let a = r[i] - q.get(i, k);
            let c = rs[i] - qs.get(i, k);
            naive += if a >= 0.0 { t * a } else { (t - 1.0) * a };
            naive += if c >= 0.0 { t * c } else { (t - 1.0) * c };
        }
    }
    naive /= (b * 5) as f64;
    let got = aggregated_loss(&r, &rs, &q, &qs, &taus).unwrap();
    assert!((got - naive).abs() < 1e-14);
}

#[test]
fn epoch_rule() {
    assert_eq!(epochs_for(3_000_000, 3e6).unwrap(), 100);
    assert_eq!(epochs_for(6_000_000, 3e6).unwrap(), 50);
    assert_eq!(epochs_for(1_000_000_000, 3e6).unwrap(), 1);
    assert!(epochs_for(0, 3e6).is_err());
}

#[test]
fn patience_rule() {
    let mut s = EarlyStopping::new(2);
    let d: Vec<StopDecision> = [3.0, 2.0, 2.5, 2.4].iter().map(|&l| s.update(l)).collect();
    assert_eq!(
        d,
        vec![
            StopDecision::Improved,
            StopDecision::Improved,
            StopDecision::Continue,
            StopDecision::Stop
        ]
    );
    assert_eq!(s.best_epoch(), 2);
}

fn zero_market(net: &mut QuantileNet) {
    for p in net.store.params_mut() {
        if p.name.starts_with("market") {
            p.value.fill(0.0);
        }
    }
}

#[test]
fn unit_market_factor_scales_by_sigma_bar() {
    let mut net = QuantileNet::new(&small_cfg(Architecture::TwoStage), &grid(), 4, 3, 1).unwrap();
    zero_market(&mut net);
    let x = random(6, 4, -1.0, 1.0, 2);
    let z = random(6, 3, -1.0, 1.0, 3);
    let sb = vec![0.02, 0.05, 0.1, 0.2, 0.03, 0.07];
    let out = net.forward(&x, &z, &sb, Mode::Eval, &mut seeded(0)).unwrap();
    for i in 0..6 {
        assert!((out.scale[i] - 1.0).abs() < 1e-15);
        for k in 0..5 {
            // With a fixed floor the standardised head is clipped on its own.
            if out.std.get(i, k) > -1.0 {
                assert!((out.raw.get(i, k) - out.std.get(i, k) * sb[i]).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn raw_quantiles_are_floored_at_minus_one() {
    let mut net = QuantileNet::new(&small_cfg(Architecture::TwoStage), &grid(), 4, 3, 1).unwrap();
    zero_market(&mut net);
    let n = net.store.params().len();
    let last_stage = (0..n)
        .filter(|&i| net.store.params()[i].name.starts_with("stage"))
        .collect::<Vec<_>>();
    let (w, b) = (last_stage[last_stage.len() - 2], last_stage[last_stage.len() - 1]);
    net.store.params_mut()[w].value.fill(0.0);
    net.store.params_mut()[b].value.fill(-20.0);
    let out = net
        .forward(
            &random(2, 4, -1.0, 1.0, 2),
            &random(2, 3, -1.0, 1.0, 3),
            &[0.1, 0.1],
            Mode::Eval,
            &mut seeded(0),
        )
        .unwrap();
    assert!(out.raw.data().iter().all(|&v| v == -1.0));
    assert!(out.std.data().iter().all(|&v| (v + 10.0).abs() < 1e-12));

    net.config.std_floor = StdFloor::Unit;
    let out = net
        .forward(
            &random(2, 4, -1.0, 1.0, 2),
            &random(2, 3, -1.0, 1.0, 3),
            &[0.1, 0.1],
            Mode::Eval,
            &mut seeded(0),
        )
        .unwrap();
    assert!(out.raw.data().iter().all(|&v| v == -1.0));
    assert!(out.std.data().iter().all(|&v| v == -1.0));
}

#[test]
fn market_factor_is_shared_within_a_date() {
    let mut net = QuantileNet::new(&small_cfg(Architecture::TwoStage), &grid(), 4, 3, 7).unwrap();
    let x = random(5, 4, -1.0, 1.0, 2);
    let zrow = [0.3, -0.2, 1.1];
    let z = Tensor2::from_rows(&vec![zrow.to_vec(); 5]).unwrap();
    let out = net.forward(&x, &z, &[0.05; 5], Mode::Eval, &mut seeded(0)).unwrap();
    assert!(out.scale.iter().all(|&m| m == out.scale[0] && m > 0.0));
}

#[test]
fn nonpositive_sigma_bar_is_rejected() {
    let mut net = QuantileNet::new(&small_cfg(Architecture::TwoStage), &grid(), 4, 3, 1).unwrap();
    let r = net.forward(
        &random(2, 4, -1.0, 1.0, 2),
        &random(2, 3, -1.0, 1.0, 3),
        &[0.1, 0.0],
        Mode::Eval,
        &mut seeded(0),
    );
    assert!(matches!(r, Err(Error::Input(_))));
}

/// Central differences of the training loss against the analytic gradient.
/// Coordinates where the one-sided differences disagree straddle a kink of
/// the loss and are skipped.
fn gradient_error(net: &mut QuantileNet, x: &Tensor2, z: &Tensor2, sb: &[f64], r: &[f64]) -> (f64, usize) {
    let loss = |net: &mut QuantileNet| {
        let out = net.forward(x, z, sb, Mode::Train, &mut seeded(42)).unwrap();
        net.loss(&out, r).unwrap()
    };
    net.store.zero_grad();
    let out = net.forward(x, z, sb, Mode::Train, &mut seeded(42)).unwrap();
    net.backward(&out, r).unwrap();
    let analytic: Vec<Vec<f64>> = net.store.params().iter().map(|p| p.grad.data().to_vec()).collect();
    let h = 1e-5;
    let base = loss(net);
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    for pi in 0..analytic.len() {
        for k in 0..analytic[pi].len() {
            let orig = net.store.params()[pi].value.data()[k];
            net.store.params_mut()[pi].value.data_mut()[k] = orig + h;
            let lp = loss(net);
            net.store.params_mut()[pi].value.data_mut()[k] = orig - h;
            let lm = loss(net);
            net.store.params_mut()[pi].value.data_mut()[k] = orig;
            let (fwd, bwd) = ((lp - base) / h, (base - lm) / h);
            if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1e-2) {
                skipped += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic[pi][k];
            worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-3));
        }
    }
    (worst, skipped)
}

#[test]
fn gradients_match_finite_differences_for_every_architecture() {
    for (s, arch) in [
        Architecture::TwoStage,
        Architecture::Lnn,
        Architecture::OneHidden,
        Architecture::TwoHidden,
        Architecture::TwoHiddenMse,
    ]
    .into_iter()
    .enumerate()
    {
        let mut net = QuantileNet::new(&small_cfg(arch), &grid(), 4, 3, 10 + s as u64).unwrap();
        let x = random(8, 4, -1.5, 1.5, 20);
        let z = random(8, 3, -1.5, 1.5, 21);
        let sb: Vec<f64> = (0..8).map(|i| 0.05 + 0.01 * i as f64).collect();
        let r: Vec<f64> = random(8, 1, -0.3, 0.3, 22).into_vec();
        let (worst, skipped) = gradient_error(&mut net, &x, &z, &sb, &r);
        let total: usize = net.store.params().iter().map(|p| p.value.data().len()).sum();
        assert!(worst < 1e-4, "{arch:?}: {worst}");
        assert!(skipped * 20 < total, "{arch:?}: skipped {skipped} of {total}");
    }
}

#[test]
fn zero_linear_net_returns_its_bias() {
    let mut net = QuantileNet::new(&small_cfg(Architecture::Lnn), &grid(), 4, 0, 1).unwrap();
    net.store.params_mut()[0].value.fill(0.0);
    let bias = vec![-0.2, -0.1, 0.0, 0.1, 0.2];
    net.store.params_mut()[1].value.data_mut().copy_from_slice(&bias);
    let out = net
        .forward(
            &random(3, 4, -1.0, 1.0, 2),
            &Tensor2::zeros(3, 0),
            &[0.1; 3],
            Mode::Eval,
            &mut seeded(0),
        )
        .unwrap();
    for i in 0..3 {
        assert_eq!(out.raw.row(i), &bias[..]);
    }
}

#[test]
fn benchmark_loss_is_the_raw_head_only() {
    let mut net = QuantileNet::new(&small_cfg(Architecture::TwoHidden), &grid(), 4, 0, 1).unwrap();
    let out = net
        .forward(
            &random(6, 4, -1.0, 1.0, 2),
            &Tensor2::zeros(6, 0),
            &[0.1; 6],
            Mode::Eval,
            &mut seeded(0),
        )
        .unwrap();
    let r = random(6, 1, -0.3, 0.3, 3).into_vec();
    assert_eq!(
        net.loss(&out, &r).unwrap(),
        raw_head_loss(&r, &out.raw, &grid()).unwrap()
    );
}

fn constant_dataset(n: usize, y: f64) -> Dataset {
    let x = random(n, 4, -1.0, 1.0, 5).into_vec();
    Dataset {
        x_width: 4,
        z_width: 3,
        x,
        z: random(n, 3, -1.0, 1.0, 6).into_vec(),
        sigma_bar: vec![0.05; n],
        r: vec![y; n],
        keys: (0..n).map(|i| (i, 0)).collect(),
    }
}

#[test]
fn mean_network_learns_a_constant() {
    let cfg = NetConfig {
        dropout: 0.0,
        ..small_cfg(Architecture::TwoHiddenMse)
    };
    let mut net = QuantileNet::new(&cfg, &grid(), 4, 3, 2).unwrap();
    let data = constant_dataset(512, 0.03);
    let tc = TrainConfig {
        batch_size: 64,
        adam: crate::nn::AdamConfig {
            lr: 0.01,
            ..Default::default()
        },
        validation_fraction: 0.0,
        max_epochs: Some(150),
        ..TrainConfig::default()
    };
    train_member(&mut net, &data, &tc, 1).unwrap();
    let (x, z, sb, _) = data.batch(&(0..32).collect::<Vec<_>>()).unwrap();
    let out = net.forward(&x, &z, &sb, Mode::Eval, &mut seeded(0)).unwrap();
    let m = crate::stats::mean(out.raw.data());
    assert!((m - 0.03).abs() < 0.005, "{m}");
}

fn sim_features(n_stocks: usize, years: usize, seed: u64) -> (crate::features::FeatureTable, Vec<f64>) {
    use crate::market_sim::{sample_stock_params, simulate_panel, DgpSpec};
    let spec = DgpSpec {
        n_stocks,
        n_years: years,
        ..DgpSpec::default()
    };
    let params = sample_stock_params(&spec, None, seed).unwrap();
    let sim = simulate_panel(&spec, &params, seed).unwrap();
    let ft = crate::features::build_features(&sim.panel, &crate::features::FeatureConfig::default()).unwrap();
    let labels = crate::features::forward_returns(&sim.panel, 22);
    (ft, labels)
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        batch_size: 256,
        ensemble_size: 2,
        max_epochs: Some(3),
        adam: crate::nn::AdamConfig {
            lr: 0.003,
            ..Default::default()
        },
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_reproducible_and_reduces_loss() {
    let (ft, labels) = sim_features(12, 3, 2);
    let rows: Vec<usize> = (0..ft.n_dates()).step_by(5).collect();
    let data = build_dataset(&ft, Some(&labels), &rows);
    assert!(!data.is_empty());
    let cfg = small_cfg(Architecture::TwoStage);
    let tc = TrainConfig {
        max_epochs: Some(8),
        ensemble_size: 1,
        ..quick_train()
    };
    let a = train_ensemble(&cfg, &grid(), &data, &tc, None).unwrap();
    let b = train_ensemble(&cfg, &grid(), &data, &tc, None).unwrap();
    let mut ca = Vec::new();
    let mut cb = Vec::new();
    a.members[0].store.write_checkpoint(&mut ca).unwrap();
    b.members[0].store.write_checkpoint(&mut cb).unwrap();
    assert_eq!(ca, cb);
    let tl = &a.reports[0].train_losses;
    assert!(tl.last().unwrap() < &tl[0], "{tl:?}");
}

#[test]
fn identical_members_match_a_single_member() {
    let (ft, labels) = sim_features(8, 2, 3);
    let rows: Vec<usize> = (0..ft.n_dates()).step_by(5).collect();
    let data = build_dataset(&ft, Some(&labels), &rows);
    let tc = TrainConfig {
        ensemble_size: 1,
        ..quick_train()
    };
    let single = train_ensemble(&small_cfg(Architecture::TwoStage), &grid(), &data, &tc, None).unwrap();
    let mut one = single.clone();
    let mut two = Ensemble {
        members: vec![single.members[0].clone(), single.members[0].clone()],
        reports: vec![single.reports[0].clone(); 2],
    };
    let (s1, q1, m1) = one.predict(&data, 100).unwrap();
    let (s2, q2, m2) = two.predict(&data, 100).unwrap();
    for i in 0..q1.len() {
        for k in 0..q1[i].len() {
            assert!((q1[i][k] - q2[i][k]).abs() < 1e-12);
            assert!((s1[i][k] - s2[i][k]).abs() < 1e-12);
        }
        assert!((m1[i] - m2[i]).abs() < 1e-12);
    }
}

#[test]
fn schedule_forecasts_are_monotone_and_causal() {
    let (ft, labels) = sim_features(10, 4, 4);
    let schedule = Schedule {
        test_years: vec![2, 3],
        ..Schedule::default()
    };
    let out = run_schedule(
        &ft,
        &labels,
        &small_cfg(Architecture::TwoStage),
        &quick_train(),
        &grid(),
        &schedule,
    )
    .unwrap();
    assert_eq!(out.windows.len(), 2);
    assert!(!out.records.is_empty());
    assert!(out.records.iter().all(ForecastRecord::is_monotone));
    assert!(out.records.iter().all(|r| r.q_raw.iter().all(|&q| q >= -1.0)));
    for w in &out.windows {
        // First origin of year y is the last day of the previous year.
        assert_eq!(w.cutoff, (w.year as usize) * 264 - 1);
    }
    // 12 origins a year for 10 stocks.
    assert_eq!(out.records.len(), 2 * 12 * 10);
}

#[test]
fn forecast_csv_round_trip() {
    let taus = grid();
    let recs = vec![
        ForecastRecord {
            stock: "a".into(),
            date: 20200131,
            q_std: vec![-1.0, -0.3, 0.1, 0.4, 1.0 / 3.0],
            q_raw: vec![-0.1, -0.03, 0.01, 0.04, 0.1 + 1e-13],
            sigma_bar: 0.1,
            scale: 1.0,
        },
        ForecastRecord {
            stock: "b".into(),
            date: 20200131,
            q_std: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
            q_raw: vec![-0.2, -0.1, 0.0, 0.1, 0.2],
            sigma_bar: 0.1,
            scale: 1.0,
        },
    ];
    let mut buf = Vec::new();
    write_forecasts(&recs, &taus, &mut buf).unwrap();
    let (t2, back) = read_forecasts(&buf[..]).unwrap();
    assert_eq!(t2, taus);
    for (a, b) in recs.iter().zip(&back) {
        assert_eq!((a.stock.as_str(), a.date), (b.stock.as_str(), b.date));
        assert_eq!(a.q_std, b.q_std);
        assert_eq!(a.q_raw, b.q_raw);
    }
}
