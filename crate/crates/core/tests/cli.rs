use std::path::Path;
use std::process::{Command, Output};

fn distforge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distforge"))
        .current_dir(dir)
        .args(args)
        .env_remove("DISTFORGE_SEED")
        .env_remove("DISTFORGE_THREADS")
        .env_remove("DISTFORGE_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = distforge(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

const SMALL: &[&str] = &["simulate", "--stocks", "6", "--years", "3", "--truth-paths", "1000"];

#[test]
fn simulate_is_reproducible_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let files = [
        "panel.csv",
        "params.csv",
        "true_quantiles.csv",
        "simulate.manifest.json",
    ];
    let run = |seed: &str| -> Vec<String> {
        let mut args = SMALL.to_vec();
        args.extend(["--seed", seed, "-o", "out"]);
        ok(d, &args);
        files
            .iter()
            .map(|f| String::from_utf8(read(d.join("out").join(f))).unwrap())
            .collect()
    };
    let (a, b, c) = (run("7"), run("7"), run("8"));
    for (k, f) in files.iter().enumerate() {
        assert!(a[k] == b[k], "{f} differs between identical runs");
    }
    assert!(a[0] != c[0]);
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (sub, threads) in [("one", "1"), ("two", "2")] {
        let mut args = SMALL.to_vec();
        args.extend(["--seed", "3", "--threads", threads, "-o", sub]);
        ok(d, &args);
    }
    for f in ["panel.csv", "true_quantiles.csv"] {
        assert!(
            read(d.join("one").join(f)) == read(d.join("two").join(f)),
            "{f} depends on the thread count"
        );
    }
}

#[test]
fn environment_seed_sits_between_file_and_flag() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), "seed = 1\n").unwrap();
    let run = |sub: &str, env: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_distforge"));
        cmd.current_dir(d).args(SMALL).args(["--config", "run.toml", "-o", sub]);
        cmd.env_remove("DISTFORGE_SEED");
        if let Some(s) = env {
            cmd.env("DISTFORGE_SEED", s);
        }
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        assert!(cmd.output().unwrap().status.success());
        let m: serde_json::Value = serde_json::from_slice(&read(d.join(sub).join("simulate.manifest.json"))).unwrap();
        m["seed"].as_u64().unwrap()
    };
    assert_eq!(run("file", None, None), 1);
    assert_eq!(run("env", Some("2"), None), 2);
    assert_eq!(run("flag", Some("2"), Some("3")), 3);
}

#[test]
fn bad_invocations_fail_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = distforge(d, &["simulate", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(d.join("bad.toml"), "[train]\nbatch_size = \"many\"\n").unwrap();
    let out = distforge(d, &["simulate", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));

    let out = distforge(d, &["density", "--forecasts", "missing.csv", "-o", "o"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("density"));
    let left: Vec<_> = std::fs::read_dir(d.join("o")).map(|r| r.collect()).unwrap_or_default();
    assert!(left.is_empty(), "no artifacts after a failed stage");
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("small.toml"),
        "seed = 5\n\
         [net]\nstage_hidden = [8, 4, 8]\nmarket_hidden = [4]\n\
         [train]\nbatch_size = 128\nensemble_size = 2\nmax_epochs = 3\n\
         [schedule]\ntest_years = [2]\n\
         [garch]\npaths = 1000\nwindow = 264\n\
         [backtest]\nn_groups = 3\n",
    )
    .unwrap();
    let c = ["--config", "small.toml"];
    let step = |args: &[&str]| {
        let mut a = args.to_vec();
        a.extend(c);
        ok(d, &a)
    };
    let mut sim = SMALL.to_vec();
    sim.extend(["-o", "sim"]);
    step(&sim);
    step(&["features", "--panel", "sim/panel.csv", "-o", "feat"]);
    step(&[
        "train",
        "--panel",
        "sim/panel.csv",
        "--features",
        "feat/features.csv",
        "-o",
        "model",
    ]);
    step(&[
        "forecast",
        "--features",
        "feat/features.csv",
        "--model",
        "model",
        "-o",
        "fc",
    ]);
    step(&["garch-forecast", "--panel", "sim/panel.csv", "-o", "garch"]);
    step(&["density", "--forecasts", "model/forecasts.csv", "-o", "dens"]);
    step(&["moments", "--forecasts", "model/forecasts.csv", "-o", "mom"]);
    step(&[
        "evaluate",
        "--panel",
        "sim/panel.csv",
        "--forecasts",
        "model/forecasts.csv",
        "--forecasts",
        "garch/forecasts.csv",
        "--names",
        "nn,garch",
        "-o",
        "eval",
    ]);
    step(&[
        "backtest",
        "--panel",
        "sim/panel.csv",
        "--forecasts",
        "model/forecasts.csv",
        "-o",
        "bt",
    ]);

    let forecasts = String::from_utf8(read(d.join("model/forecasts.csv"))).unwrap();
    assert!(forecasts.starts_with("stock_id,date,tau,q_std,q_raw"));
    // 6 stocks, 12 monthly origins, 37 levels.
    assert_eq!(forecasts.lines().count(), 1 + 6 * 12 * 37);
    let moments = String::from_utf8(read(d.join("mom/moments.csv"))).unwrap();
    assert!(moments.starts_with("stock_id,date,mean,variance,skewness,kurtosis,variance_adj"));
    assert_eq!(moments.lines().count(), 1 + 6 * 12);
    let metrics = String::from_utf8(read(d.join("eval/metrics.csv"))).unwrap();
    let rows: Vec<&str> = metrics.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("nn,") && rows[1].starts_with("garch,"));
    for name in ["dm.csv", "tau_losses.csv", "evaluate.manifest.json"] {
        assert!(d.join("eval").join(name).exists(), "{name}");
    }
    assert!(d.join("bt/portfolio_summary.csv").exists());

    // A reloaded model reproduces the training-time forecasts exactly.
    let reloaded = String::from_utf8(read(d.join("fc/forecasts.csv"))).unwrap();
    let trained: std::collections::HashSet<&str> = forecasts.lines().collect();
    let test_origins: Vec<&str> = reloaded.lines().skip(1).filter(|l| trained.contains(l)).collect();
    assert_eq!(test_origins.len(), 6 * 12 * 37);
}

#[test]
fn table_reproduction_command() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["repro-table-e1", "-o", "t"]);
    let csv = String::from_utf8(read(dir.path().join("t/table_e1.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 8);
    assert!(csv.lines().nth(2).unwrap().starts_with("t: df=10,"));
    assert!(!out.stdout.is_empty());
}
