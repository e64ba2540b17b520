use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;
use xcal_cli::{Loaded, RunConfig};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn smoke_config() -> RunConfig {
    RunConfig::from_toml(&fs::read_to_string(configs_dir().join("smoke.toml")).unwrap()).unwrap()
}

/// Writes `c` into a fresh directory with local output folders.
fn workspace(mut c: RunConfig) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    c.paths.data_dir = "data".into();
    c.paths.artifacts_dir = "artifacts".into();
    c.paths.reports_dir = "reports".into();
    for sub in ["data", "artifacts", "reports"] {
        fs::create_dir_all(dir.path().join(sub)).unwrap();
    }
    let path = dir.path().join("run.toml");
    fs::write(&path, toml::to_string(&c).unwrap()).unwrap();
    (dir, path)
}

fn xcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xcal"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn ok(args: &[&str]) {
    let out = xcal(args);
    assert!(
        out.status.success(),
        "xcal {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Smoke {
    dir: TempDir,
    config: String,
}

impl Smoke {
    fn path(&self, rel: &str) -> String {
        self.dir.path().join(rel).display().to_string()
    }
}

/// One trained and calibrated smoke run shared by the tests below.
fn smoke() -> &'static Smoke {
    static RUN: OnceLock<Smoke> = OnceLock::new();
    RUN.get_or_init(|| {
        let (dir, config) = workspace(smoke_config());
        let s = Smoke {
            dir,
            config: config.display().to_string(),
        };
        let c = s.config.as_str();
        ok(&["simulate", "-c", c]);
        ok(&["train", "-c", c]);
        ok(&["calibrate", "-c", c, "--data", &s.path("data/engine1_ftp.csv")]);
        s
    })
}

/// A copy of the smoke posterior with `edit` applied.
fn edited_posterior(name: &str, edit: impl FnOnce(&mut serde_json::Value)) -> String {
    let s = smoke();
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(s.path("artifacts/posterior_engine1_ftp.json")).unwrap()).unwrap();
    edit(&mut v);
    let path = s.path(&format!("artifacts/{name}.json"));
    fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
    path
}

#[test]
fn pipeline_writes_reports() {
    let s = smoke();
    let c = s.config.as_str();
    let posterior = s.path("artifacts/posterior_engine1_ftp.json");
    let data = s.path("data/engine1_set.csv");
    ok(&["predict", "-c", c, "--posterior", &posterior, "--data", &data, "--out", &s.path("reports/p_set.csv")]);
    ok(&["evaluate", "-c", c, "--predictions", &s.path("reports/p_set.csv"), "--data", &data]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(s.path("reports/report_p_set.json")).unwrap()).unwrap();
    let cov = report["calibrated"]["coverage95"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&cov));
    assert!(report["rmse_ratio"].as_f64().unwrap() > 0.0);
    let cumulative = fs::read_to_string(s.path("reports/cumulative_p_set.csv")).unwrap();
    assert!(cumulative.starts_with("time_s,observed,median,lo95,hi95,baseline"));
    assert!(Path::new(&s.path("reports/train_report.json")).is_file());
    assert!(Path::new(&s.path("reports/marginals_engine1_ftp.csv")).is_file());
}

#[test]
fn zero_bias_engine_matches_nominal() {
    let mut c = smoke_config();
    let sim = c.simulate.as_mut().unwrap();
    sim.engines[0].alpha = 0.0;
    sim.engines[0].b = vec![0.0; sim.engines[0].b.len()];
    let (dir, config) = workspace(c);
    ok(&["simulate", "-c", config.to_str().unwrap()]);
    for cycle in ["ftp", "set"] {
        let engine = fs::read(dir.path().join(format!("data/engine1_{cycle}.csv"))).unwrap();
        let nominal = fs::read(dir.path().join(format!("data/nominal_{cycle}.csv"))).unwrap();
        assert_eq!(engine, nominal, "{cycle}");
    }
}

#[test]
fn default_config_describes_a_nominal_and_three_sample_engines() {
    let l = Loaded::read(&configs_dir().join("default.toml"), None).unwrap();
    let sim = l.config.simulate.as_ref().unwrap();
    assert_eq!(sim.engines.len(), 3);
    assert!(sim.engines.iter().all(|e| e.id != "nominal"));
    let prior = l.config.prior_spec();
    for e in &sim.engines {
        assert!(prior.alpha_bounds.0 <= e.alpha && e.alpha <= prior.alpha_bounds.1);
        for (b, (lo, hi)) in e.b.iter().zip(&prior.b_bounds) {
            assert!(lo <= b && b <= hi);
        }
    }
}

#[test]
fn zero_window_is_a_config_error() {
    let mut c = smoke_config();
    c.gp.window_s = 0.0;
    let (_dir, config) = workspace(c);
    let out = xcal(&["simulate", "-c", config.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn bad_arguments_exit_1_and_help_exits_0() {
    assert_eq!(code(&xcal(&["calibrate"])), 1);
    assert_eq!(code(&xcal(&["frobnicate"])), 1);
    assert_eq!(code(&xcal(&["--help"])), 0);
}

#[test]
fn missing_config_is_an_io_error() {
    assert_eq!(code(&xcal(&["simulate", "-c", "/nonexistent/run.toml"])), 2);
}

#[test]
fn unreadable_model_exits_2() {
    let s = smoke();
    let bad = s.path("artifacts/garbage.json");
    fs::write(&bad, "{ not a model").unwrap();
    let out = xcal(&["calibrate", "-c", &s.config, "--model", &bad, "--data", &s.path("data/engine1_ftp.csv"), "--out", &s.path("artifacts/unused.json")]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_output_directory_exits_2() {
    let s = smoke();
    let out = xcal(&[
        "predict",
        "-c",
        &s.config,
        "--posterior",
        &s.path("artifacts/posterior_engine1_ftp.json"),
        "--data",
        &s.path("data/engine1_ftp.csv"),
        "--out",
        &s.path("no_such_dir/p.csv"),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn zero_tolerance_accepts_nothing_and_exits_3() {
    let s = smoke();
    let out = xcal(&[
        "calibrate",
        "-c",
        &s.config,
        "--data",
        &s.path("data/engine1_ftp.csv"),
        "--epsilon",
        "0",
        "--out",
        &s.path("artifacts/eps0.json"),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn negative_tolerance_is_a_usage_error() {
    let s = smoke();
    let out = xcal(&["calibrate", "-c", &s.config, "--data", &s.path("data/engine1_ftp.csv"), "--epsilon=-1"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn empty_posterior_exits_3() {
    let s = smoke();
    let posterior = edited_posterior("empty", |v| {
        for key in ["samples", "distances", "draw_indices"] {
            v[key] = serde_json::json!([]);
        }
    });
    let out = xcal(&["predict", "-c", &s.config, "--posterior", &posterior, "--data", &s.path("data/engine1_ftp.csv"), "--out", &s.path("reports/empty.csv")]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn posterior_from_another_model_exits_4() {
    let s = smoke();
    let posterior = edited_posterior("foreign", |v| {
        v["provenance"]["model_hash"] = serde_json::json!("0".repeat(64));
    });
    let out = xcal(&["predict", "-c", &s.config, "--posterior", &posterior, "--data", &s.path("data/engine1_ftp.csv"), "--out", &s.path("reports/foreign.csv")]);
    assert_eq!(code(&out), 4);
}

#[test]
fn posterior_under_another_config_exits_4() {
    let s = smoke();
    let posterior = edited_posterior("otherconfig", |v| {
        v["provenance"]["config_hash"] = serde_json::json!("f".repeat(64));
    });
    let out = xcal(&["predict", "-c", &s.config, "--posterior", &posterior, "--data", &s.path("data/engine1_ftp.csv"), "--out", &s.path("reports/other.csv")]);
    assert_eq!(code(&out), 4);
}

#[test]
fn thread_count_must_be_positive() {
    let s = smoke();
    let out = Command::new(env!("CARGO_BIN_EXE_xcal"))
        .args(["simulate", "-c", &s.config])
        .env("XCAL_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
}
