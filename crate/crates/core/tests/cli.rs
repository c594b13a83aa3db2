use std::fs;
use std::path::Path;
use std::process::Command;

use alset_core::alset::Summary;
use alset_core::cli::config::{apply_override, ExperimentConfig, RateMetric};
use alset_core::cli::output::TRAJECTORY_HEADER;
use alset_core::cli::{main_with_args, rate_from_runs, RunResult, RunStatus, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK};
use serde_json::{json, Value};
use tempfile::TempDir;

fn one_d_problem() -> Value {
    json!({"kind": "quadratic_bilevel", "source": {"inline": {
        "A": [[1.0]], "B": [[1.0]], "c": [0.0], "P": [[0.0]], "Q": [[0.0]], "R": [[1.0]],
        "p": [0.0], "q": [0.0],
        "noise_sigma_grad_f": 0.0, "noise_sigma_grad_g": 0.0, "noise_sigma_hess": 0.0,
        "region_radius": 10.0
    }}})
}

fn fixed_alset(alpha: f64, beta: f64) -> Value {
    json!({"kind": "alset_bilevel", "config": {
        "inner_T": 1, "alpha_base": 1.0, "eta": 1.0,
        "neumann": {"depth_N": 1, "exact_inverse_mode": true},
        "preset": "manual",
        "stepsizes": {"kind": "fixed", "alpha": alpha, "beta": beta},
        "x0": [1.0], "y0": [1.0]
    }})
}

fn canonical() -> Value {
    json!({"problem": one_d_problem(), "algorithm": fixed_alset(0.5, 0.5), "sweep": [3], "seeds": [0]})
}

fn noisy() -> Value {
    json!({
        "problem": {"kind": "quadratic_bilevel", "source": {"generated":
            {"kappa": 4.0, "dim_upper": 3, "dim_lower": 3, "noise": [0.1, 0.1, 0.05], "seed": 3}}},
        "algorithm": {"kind": "alset_bilevel", "config": {
            "inner_T": 1, "alpha_base": 0.4, "eta": 1.0, "neumann": {"depth_N": 4},
            "preset": "manual", "x0": [1.0, -1.0, 0.5], "y0": [0.0, 0.0, 0.0]}},
        "sweep": [40, 160, 640],
        "seeds": [1, 2]
    })
}

fn write_config(dir: &Path, cfg: &Value) -> String {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("alset").chain(args.iter().copied()))
}

fn cmd(sub: &str, cfg: &Value) -> (TempDir, i32) {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), cfg);
    let out = dir.path().join("out");
    let code = run(&[sub, "--config", &config, "--out", out.to_str().unwrap()]);
    (dir, code)
}

fn read(dir: &TempDir, name: &str) -> String {
    fs::read_to_string(dir.path().join("out").join(name)).unwrap()
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn canonical_run_writes_the_hand_computed_row() {
    let (dir, code) = cmd("run", &canonical());
    assert_eq!(code, EXIT_OK);
    let csv = read(&dir, "run_K3_seed0.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(TRAJECTORY_HEADER));
    assert_eq!(
        TRAJECTORY_HEADER,
        "k,grad_F_norm_sq,lower_err_sq,lyapunov,alpha_k,beta_k,xi_samples,phi_samples"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    // x¹ = 0.5 so ∇F(x¹) = 0.5
    assert!(rows[1].starts_with("1,2.5000000000000000e-1,"), "{}", rows[1]);
    assert_eq!(column(&csv, "alpha_k")[1], "5.0000000000000000e-1");
}

#[test]
fn summary_has_the_documented_keys() {
    let (dir, code) = cmd("run", &canonical());
    assert_eq!(code, EXIT_OK);
    let s: Value = serde_json::from_str(&read(&dir, "summary.json")).unwrap();
    for key in ["code_version", "command", "config", "runs"] {
        assert!(s.get(key).is_some(), "missing {key}");
    }
    assert_eq!(s["command"], "run");
    let runs = s["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0]["status"], "ok");
    assert_eq!(runs[0]["csv"], "run_K3_seed0.csv");
    // the echoed config parses back to the same experiment
    let echoed = ExperimentConfig::from_json(&s["config"].to_string(), &[]).unwrap();
    let original = ExperimentConfig::from_json(&canonical().to_string(), &[]).unwrap();
    assert_eq!(echoed, original);
}

#[test]
fn reruns_are_byte_identical_for_any_job_count() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), &noisy());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run(&["run", "--config", &config, "--out", a.to_str().unwrap(), "--jobs", "1"]), EXIT_OK);
    assert_eq!(run(&["run", "--config", &config, "--out", b.to_str().unwrap(), "--jobs", "4"]), EXIT_OK);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn config_errors_exit_one() {
    let mut empty = canonical();
    empty["sweep"] = json!([]);
    let mut dup = canonical();
    dup["sweep"] = json!([3, 3]);
    let mut dup_seed = canonical();
    dup_seed["seeds"] = json!([1, 1]);
    let mut unknown = canonical();
    unknown["algorithm"]["config"]["alpha"] = json!(1.0);
    let mut wrong_dim = canonical();
    wrong_dim["algorithm"]["config"]["x0"] = json!([1.0, 2.0]);
    let mut mismatch = canonical();
    mismatch["algorithm"]["kind"] = json!("alset_minmax");
    for bad in [empty, dup, dup_seed, unknown, wrong_dim, mismatch] {
        assert_eq!(cmd("run", &bad).1, EXIT_CONFIG, "{bad}");
    }

    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{ not json").unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["run", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]), EXIT_CONFIG);
    let missing = dir.path().join("nope.json");
    assert_eq!(run(&["run", "--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]), EXIT_CONFIG);
}

#[test]
fn cli_usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), &canonical());
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(run(&["run", "--config", &config]), EXIT_CONFIG, "no --out and no output field");
    assert_eq!(run(&["run", "--config", &config, "--out", out, "--jobs", "0"]), EXIT_CONFIG);
    assert_eq!(run(&["run", "--config", &config, "--jobs", "many"]), EXIT_CONFIG);
    assert_eq!(run(&["launch"]), EXIT_CONFIG);
    assert_eq!(run(&["run"]), EXIT_CONFIG);
    assert_eq!(run(&["run", "--config", &config, "--out", out, "--override", "sweep"]), EXIT_CONFIG);
    assert_eq!(run(&["--help"]), EXIT_OK);
    assert_eq!(run(&["--version"]), EXIT_OK);
}

#[test]
fn output_field_is_used_without_out_flag() {
    let dir = TempDir::new().unwrap();
    let mut cfg = canonical();
    cfg["output"] = json!(dir.path().join("from_config").to_str().unwrap());
    let config = write_config(dir.path(), &cfg);
    assert_eq!(run(&["run", "--config", &config]), EXIT_OK);
    assert!(dir.path().join("from_config/run_K3_seed0.csv").exists());
}

#[test]
fn rate_needs_three_horizons() {
    let mut cfg = canonical();
    cfg["sweep"] = json!([10, 20]);
    cfg["rate"] = json!({"metric": "mean_grad_F_norm_sq", "slope_interval": [-0.65, -0.35]});
    assert_eq!(cmd("rate", &cfg).1, EXIT_CONFIG);
    let mut cfg = canonical();
    cfg["sweep"] = json!([10, 20, 40]);
    assert_eq!(cmd("rate", &cfg).1, EXIT_CONFIG, "no rate section");
}

#[test]
fn divergence_exits_two_and_keeps_the_partial_trajectory() {
    let mut cfg = canonical();
    cfg["algorithm"] = fixed_alset(100.0, 0.5);
    cfg["sweep"] = json!([1000]);
    let (dir, code) = cmd("run", &cfg);
    assert_eq!(code, EXIT_NUMERIC);
    let csv = read(&dir, "run_K1000_seed0.csv");
    let rows = csv.lines().count() - 1;
    assert!(rows > 1 && rows < 1001, "{rows} rows");
    let s: Value = serde_json::from_str(&read(&dir, "summary.json")).unwrap();
    let r = &s["runs"][0];
    assert_eq!(r["status"], "diverged");
    assert!(r["diverged_at"].as_u64().unwrap() < 1000);
}

#[test]
fn overrides_reach_the_run() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), &canonical());
    let out = dir.path().join("out");
    let code = run(&[
        "run", "--config", &config, "--out", out.to_str().unwrap(),
        "--override", "sweep.0=5", "--override", "algorithm.config.stepsizes.alpha=0.25",
    ]);
    assert_eq!(code, EXIT_OK);
    let csv = fs::read_to_string(out.join("run_K5_seed0.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert_eq!(column(&csv, "alpha_k")[0], "2.5000000000000000e-1");

    let mut v = json!({"a": {"b": [1, 2]}});
    apply_override(&mut v, "a.b.1=7").unwrap();
    apply_override(&mut v, "a.c=hello").unwrap();
    assert_eq!(v, json!({"a": {"b": [1, 7], "c": "hello"}}));
    assert!(apply_override(&mut v, "a.b.9=1").is_err());
}

fn fake_run(k: usize, seed: u64, mean: f64) -> RunResult {
    let summary = Summary {
        iterations: k,
        final_x: vec![0.0],
        final_y: vec![0.0],
        mean_grad_F_norm_sq: Some(mean),
        final_grad_F_norm_sq: Some(mean),
        final_lower_err_sq: Some(2.0 * mean),
        total_xi_samples: 0,
        total_phi_samples: 0,
    };
    RunResult { K: k, seed, status: RunStatus::Ok, diverged_at: None, csv: String::new(), summary }
}

#[test]
fn rate_fit_on_an_injected_power_law() {
    let runs: Vec<RunResult> = [100usize, 400, 1600, 6400]
        .iter()
        .flat_map(|&k| (0..3).map(move |s| fake_run(k, s, 5.0 / (k as f64).sqrt())))
        .collect();
    for metric in [RateMetric::MeanGradFNormSq, RateMetric::FinalLowerErrSq] {
        let fit = rate_from_runs(&runs, metric).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
        assert!(fit.slope_within(-0.65, -0.35));
    }
    let mut missing = runs.clone();
    missing[0].summary.mean_grad_F_norm_sq = None;
    assert!(rate_from_runs(&missing, RateMetric::MeanGradFNormSq).is_err());
}

#[test]
fn rate_command_writes_the_fit() {
    let mut cfg = noisy();
    cfg["rate"] = json!({"metric": "mean_grad_F_norm_sq", "slope_interval": [-10.0, 10.0]});
    let (dir, code) = cmd("rate", &cfg);
    assert_eq!(code, EXIT_OK);
    let r: Value = serde_json::from_str(&read(&dir, "rate.json")).unwrap();
    for key in ["metric", "slope_interval", "pass", "fit"] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
    assert_eq!(r["metric"], "mean_grad_F_norm_sq");
    assert_eq!(r["pass"], true);
    assert!(r["fit"]["slope"].as_f64().unwrap() < 0.0);
    let s: Value = serde_json::from_str(&read(&dir, "summary.json")).unwrap();
    assert_eq!(s["command"], "rate");
    assert_eq!(s["runs"].as_array().unwrap().len(), 6);
}

#[test]
fn diag_writes_bias_certificates_and_lyapunov() {
    let mut cfg = noisy();
    cfg["problem"]["source"]["generated"]["noise"] = json!([0.0, 0.0, 0.0]);
    cfg["diagnostics"] = json!([
        {"kind": "neumann_bias", "x": [0.0, 0.0, 0.0], "y": [0.0, 0.0, 0.0], "v": [1.0, 1.0, 1.0],
         "depths": [1, 2, 4, 8, 16], "draws": 1600, "sampling": "stratified", "seed": 0},
        {"kind": "lipschitz", "which": ["y_star", "grad_f", "jac_y_star"], "n_pairs": 200, "seed": 0},
        {"kind": "lyapunov", "horizon_K": 50, "seed": 1}
    ]);
    let (dir, code) = cmd("diag", &cfg);
    assert_eq!(code, EXIT_OK);

    let bias = read(&dir, "neumann_bias.csv");
    assert!(bias.starts_with("depth_N,empirical_bias,standard_error,bound\n"));
    let b: Vec<f64> = column(&bias, "empirical_bias").iter().map(|s| s.parse().unwrap()).collect();
    let bound: Vec<f64> = column(&bias, "bound").iter().map(|s| s.parse().unwrap()).collect();
    assert_eq!(b.len(), 5);
    assert!(b.windows(2).all(|w| w[1] < w[0]), "{b:?}");
    assert!(b.iter().zip(&bound).all(|(b, u)| b <= u));

    let lip = read(&dir, "lipschitz.csv");
    assert!(lip.starts_with("which,max_ratio,declared,pass\n"));
    assert_eq!(column(&lip, "which"), ["y_star", "grad_f", "jac_y_star"]);
    assert!(column(&lip, "pass").iter().all(|p| p == "true"));

    let lyap = read(&dir, "lyapunov.csv");
    assert!(lyap.starts_with("k,lyapunov\n"));
    assert_eq!(lyap.lines().count(), 52);
}

#[test]
fn diag_epsilon_app_is_zero_with_identity_features() {
    let cfg = json!({
        "problem": {"kind": "tabular_mdp", "source": {"inline": {
            "n_states": 2, "n_actions": 2,
            "transition": [[[0.2, 0.8], [0.6, 0.4]], [[0.5, 0.5], [0.9, 0.1]]],
            "reward": [[[1.0, 0.0], [0.0, 2.0]], [[0.5, 0.5], [1.0, -1.0]]],
            "gamma": 0.9,
            "init_dist": [0.5, 0.5],
            "features": [[1.0, 0.0], [0.0, 1.0]]
        }}},
        "algorithm": {"kind": "actor_critic", "config": {
            "alpha_scale": 1.0, "beta_scale": 1.0,
            "theta_grid": {"n_random": 20, "scale": 1.0, "seed": 0},
            "theta0": [0.0, 0.0, 0.0, 0.0], "y0": [0.0, 0.0]}},
        "sweep": [10],
        "seeds": [0],
        "diagnostics": [{"kind": "epsilon_app", "grid": {"n_random": 20, "scale": 1.0, "seed": 0}}]
    });
    let (dir, code) = cmd("diag", &cfg);
    assert_eq!(code, EXIT_OK);
    let csv = read(&dir, "epsilon_app.csv");
    assert_eq!(column(&csv, "n_theta"), ["21"]);
    let e: f64 = column(&csv, "epsilon_app_sampled_lower_estimate")[0].parse().unwrap();
    assert!(e <= 1e-8, "{e}");

    // bilevel diagnostics on an MDP are a configuration error
    let mut bad = cfg.clone();
    bad["diagnostics"] = json!([{"kind": "lyapunov", "horizon_K": 5, "seed": 0}]);
    assert_eq!(cmd("diag", &bad).1, EXIT_CONFIG);
    let mut none = cfg;
    none["diagnostics"] = json!([]);
    assert_eq!(cmd("diag", &none).1, EXIT_CONFIG);
}

#[test]
fn presets_table_from_the_binary() {
    let out = Command::new(env!("CARGO_BIN_EXE_alset")).args(["presets", "--kappa", "2,8"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "preset,kappa,alpha_base,inner_T,eta");
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("bilevel_kappa,2,"));
    assert!(lines[4].starts_with("minmax_kappa,8,"));
    assert!(lines[5].starts_with("compositional,"));

    let bad = Command::new(env!("CARGO_BIN_EXE_alset")).args(["presets", "--kappa", "0.5"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let usage = Command::new(env!("CARGO_BIN_EXE_alset")).args(["frobnicate"]).output().unwrap();
    assert_eq!(usage.status.code(), Some(1));
    let help = Command::new(env!("CARGO_BIN_EXE_alset")).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn binary_exit_code_on_divergence() {
    let dir = TempDir::new().unwrap();
    let mut cfg = canonical();
    cfg["algorithm"] = fixed_alset(100.0, 0.5);
    cfg["sweep"] = json!([1000]);
    let config = write_config(dir.path(), &cfg);
    let out = Command::new(env!("CARGO_BIN_EXE_alset"))
        .args(["run", "--config", &config, "--out", dir.path().join("o").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
