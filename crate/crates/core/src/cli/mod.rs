//! The `alset` experiment driver.
//!
//! Subcommands `run`, `rate`, `diag` and `presets`. Exit codes: 0 success,
//! 1 configuration error, 2 numeric abort. Every error is reported as a
//! single line on stderr.

pub mod config;
pub mod output;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::actor_critic::{epsilon_app, run_actor_critic};
use crate::alset::{apply_preset, run_bilevel, run_compositional, run_minmax, run_two_timescale_baseline, Preset, Summary, Trajectory};
use crate::diagnostics::{fit_rate, lipschitz_certificate, lyapunov_series, neumann_bias_curve, RateFit};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::problem_model::{derive_constants, solve_lower_hessian, BilevelProblem};

use self::config::{actor_critic_for_run, alset_for_run, Algorithm, Built, DiagnosticSpec, ExperimentConfig, RateMetric};
use self::output::{code_version, float, run_file_stem, table_csv, trajectory_csv, write_json, write_text};

#[derive(Debug, Parser)]
#[command(name = "alset", version, about = "Alternating stochastic gradient experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One run per (K, seed): per-run CSV plus summary.json.
    Run(CommonArgs),
    /// Run the sweep and fit log(metric) against log K.
    Rate(CommonArgs),
    /// Bias curves, Lipschitz certificates, Lyapunov series, ε_app.
    Diag(CommonArgs),
    /// Print the κ presets.
    Presets(PresetArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Output directory; defaults to the config's `output` field.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads for the sweep.
    #[arg(long, value_name = "N")]
    pub jobs: Option<usize>,
    /// Dotted-path override applied before validation, e.g. `sweep.0=500`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PresetArgs {
    /// Condition numbers to tabulate.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 4.0, 8.0])]
    pub kappa: Vec<f64>,
    /// Proportionality constant of the presets.
    #[arg(long, default_value_t = 1.0)]
    pub constant: f64,
    /// Take κ and the other constants from this experiment's problem instead.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

/// Parse `args` (including the program name) and execute.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            eprintln!("error: {}", first_line(&e.to_string()));
            return EXIT_CONFIG;
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", first_line(&e.to_string()));
            exit_code(&e)
        }
    }
}

fn first_line(s: &str) -> String {
    let s = s.trim_start_matches("error: ");
    s.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim().to_string()
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } | Error::LinearSolve { .. } => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

pub fn execute(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::Run(a) => {
            let (cfg, out) = load(a)?;
            let report = with_pool(a.jobs, || sweep(&cfg, &out))??;
            write_summary(&out, "run", &cfg, &report)?;
            Ok(report.exit_code())
        }
        Command::Rate(a) => {
            let (cfg, out) = load(a)?;
            let spec = cfg.validate_for_rate()?.clone();
            let report = with_pool(a.jobs, || sweep(&cfg, &out))??;
            write_summary(&out, "rate", &cfg, &report)?;
            if report.exit_code() != EXIT_OK {
                return Ok(report.exit_code());
            }
            let fit = rate_from_runs(&report.runs, spec.metric)?;
            let [lo, hi] = spec.slope_interval;
            let pass = fit.slope_within(lo, hi);
            let json = RateJson { metric: spec.metric, slope_interval: spec.slope_interval, pass, fit: fit.clone() };
            write_json(&out.join("rate.json"), &json)?;
            println!("slope {} (r^2 {}) in [{lo}, {hi}]: {}", fit.slope, fit.r_squared, if pass { "pass" } else { "fail" });
            Ok(EXIT_OK)
        }
        Command::Diag(a) => {
            let (cfg, out) = load(a)?;
            with_pool(a.jobs, || diagnose(&cfg, &out))??;
            Ok(EXIT_OK)
        }
        Command::Presets(a) => {
            print!("{}", presets_table(a)?);
            Ok(EXIT_OK)
        }
    }
}

fn load(a: &CommonArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let text = fs::read_to_string(&a.config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", a.config.display())))?;
    let cfg = ExperimentConfig::from_json(&text, &a.overrides)?;
    let out = match (&a.out, &cfg.output) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => PathBuf::from(o),
        (None, None) => return Err(Error::Config("no output directory: pass --out or set `output`".into())),
    };
    if a.jobs == Some(0) {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    fs::create_dir_all(&out).map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
    Ok((cfg, out))
}

fn with_pool<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Diverged,
}

/// Result of one `(K, seed)` run.
#[allow(non_snake_case)]
#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub K: usize,
    pub seed: u64,
    pub status: RunStatus,
    /// Iteration at which a non-finite iterate appeared.
    pub diverged_at: Option<usize>,
    pub csv: String,
    pub summary: Summary,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub runs: Vec<RunResult>,
}

impl SweepReport {
    pub fn exit_code(&self) -> i32 {
        if self.runs.iter().any(|r| matches!(r.status, RunStatus::Diverged)) {
            EXIT_NUMERIC
        } else {
            EXIT_OK
        }
    }
}

#[derive(Serialize)]
struct SummaryJson<'a> {
    code_version: String,
    command: &'a str,
    config: &'a ExperimentConfig,
    runs: &'a [RunResult],
}

#[derive(Serialize)]
struct RateJson {
    metric: RateMetric,
    slope_interval: [f64; 2],
    pass: bool,
    fit: RateFit,
}

fn write_summary(out: &Path, command: &str, cfg: &ExperimentConfig, report: &SweepReport) -> Result<()> {
    let json = SummaryJson { code_version: code_version(), command, config: cfg, runs: &report.runs };
    write_json(&out.join("summary.json"), &json)
}

/// Run every `(K, seed)` pair and write one CSV per run.
///
/// All runs are prepared (and so validated) before any of them starts.
pub fn sweep(cfg: &ExperimentConfig, out: &Path) -> Result<SweepReport> {
    let built = cfg.problem.build().map_err(to_config)?;
    let pairs: Vec<(usize, u64)> = cfg.sweep.iter().flat_map(|&k| cfg.seeds.iter().map(move |&s| (k, s))).collect();
    let plans = pairs
        .iter()
        .map(|&(k, s)| plan(&built, &cfg.algorithm, k, s))
        .collect::<Result<Vec<_>>>()
        .map_err(to_config)?;
    let runs = plans
        .par_iter()
        .zip(pairs.par_iter())
        .map(|(p, &(k, seed))| {
            let stem = run_file_stem(k, seed);
            let csv = format!("{stem}.csv");
            let (traj, status, at) = match execute_plan(&built, p) {
                Ok(t) => (t, RunStatus::Ok, None),
                Err(Error::Diverged { k: at, partial }) => (*partial, RunStatus::Diverged, Some(at)),
                Err(e) => return Err(e),
            };
            write_text(&out.join(&csv), &trajectory_csv(&traj))?;
            Ok(RunResult { K: k, seed, status, diverged_at: at, csv, summary: traj.summary })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport { runs })
}

fn to_config(e: Error) -> Error {
    match e {
        Error::Domain(m) | Error::Singular(m) | Error::Degenerate(m) => Error::Config(m),
        other => other,
    }
}

#[allow(clippy::large_enum_variant)]
enum Plan {
    Alset(Algorithm, crate::alset::AlsetConfig),
    ActorCritic(crate::actor_critic::ActorCriticConfig),
}

fn plan(built: &Built, alg: &Algorithm, k: usize, seed: u64) -> Result<Plan> {
    match (built, alg) {
        (Built::Mdp(mdp), Algorithm::ActorCritic { config }) => {
            let c = actor_critic_for_run(config, k, seed);
            if c.theta0.len() != mdp.dim_theta() || c.y0.len() != mdp.dim_critic() {
                return Err(Error::Config("initial theta/critic have the wrong dimension".into()));
            }
            Ok(Plan::ActorCritic(c))
        }
        (Built::Bilevel(p), Algorithm::AlsetBilevel { config, depth_from_horizon }) => {
            Ok(Plan::Alset(alg.clone(), checked(p.as_ref(), alset_for_run(p.as_ref(), config, k, seed, *depth_from_horizon)?)?))
        }
        (
            Built::Bilevel(p),
            Algorithm::AlsetMinmax { config } | Algorithm::AlsetCompositional { config } | Algorithm::TwoTimescale { config },
        ) => Ok(Plan::Alset(alg.clone(), checked(p.as_ref(), alset_for_run(p.as_ref(), config, k, seed, false)?)?)),
        _ => Err(Error::Config("algorithm and problem kinds do not match".into())),
    }
}

fn checked(p: &dyn BilevelProblem, c: crate::alset::AlsetConfig) -> Result<crate::alset::AlsetConfig> {
    c.validate()?;
    if c.x0.len() != p.dim_upper() || c.y0.len() != p.dim_lower() {
        return Err(Error::Config(format!(
            "x0/y0 have lengths ({}, {}), problem needs ({}, {})",
            c.x0.len(),
            c.y0.len(),
            p.dim_upper(),
            p.dim_lower()
        )));
    }
    Ok(c)
}

fn execute_plan(built: &Built, plan: &Plan) -> Result<Trajectory> {
    match (built, plan) {
        (Built::Mdp(mdp), Plan::ActorCritic(c)) => run_actor_critic(mdp, c),
        (Built::Bilevel(p), Plan::Alset(alg, c)) => {
            let p = p.as_ref();
            match alg {
                Algorithm::AlsetBilevel { .. } => run_bilevel(p, c),
                Algorithm::AlsetMinmax { .. } => run_minmax(p, c),
                Algorithm::AlsetCompositional { .. } => run_compositional(p, c),
                Algorithm::TwoTimescale { .. } => run_two_timescale_baseline(p, c),
                Algorithm::ActorCritic { .. } => unreachable!("planned as actor-critic"),
            }
        }
        _ => unreachable!("plans are built for their problem"),
    }
}

/// Group runs by K and fit the chosen metric against K.
pub fn rate_from_runs(runs: &[RunResult], metric: RateMetric) -> Result<RateFit> {
    let mut by_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in runs {
        let v = match metric {
            RateMetric::MeanGradFNormSq => r.summary.mean_grad_F_norm_sq,
            RateMetric::FinalLowerErrSq => r.summary.final_lower_err_sq,
        }
        .ok_or_else(|| Error::Degenerate(format!("run K={} seed={} has no ground-truth metric", r.K, r.seed)))?;
        by_k.entry(r.K).or_default().push(v);
    }
    let sweep: Vec<(usize, Vec<f64>)> = by_k.into_iter().collect();
    fit_rate(&sweep)
}

fn diagnose(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    if cfg.diagnostics.is_empty() {
        return Err(Error::Config("diag needs at least one entry in `diagnostics`".into()));
    }
    let built = cfg.problem.build().map_err(to_config)?;
    let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
    for d in &cfg.diagnostics {
        *counts.entry(diag_name(d)).or_default() += 1;
    }
    for (i, d) in cfg.diagnostics.iter().enumerate() {
        let name = diag_name(d);
        let file = if counts[name] > 1 { format!("{name}_{i}.csv") } else { format!("{name}.csv") };
        let csv = diagnostic_csv(&built, cfg, d)?;
        write_text(&out.join(&file), &csv)?;
    }
    Ok(())
}

fn diag_name(d: &DiagnosticSpec) -> &'static str {
    match d {
        DiagnosticSpec::NeumannBias { .. } => "neumann_bias",
        DiagnosticSpec::Lipschitz { .. } => "lipschitz",
        DiagnosticSpec::Lyapunov { .. } => "lyapunov",
        DiagnosticSpec::EpsilonApp { .. } => "epsilon_app",
    }
}

fn bilevel<'a>(built: &'a Built, what: &str) -> Result<&'a dyn BilevelProblem> {
    match built {
        Built::Bilevel(p) => Ok(p.as_ref()),
        Built::Mdp(_) => Err(Error::Config(format!("{what} needs a bilevel-type problem"))),
    }
}

fn diagnostic_csv(built: &Built, cfg: &ExperimentConfig, d: &DiagnosticSpec) -> Result<String> {
    match d {
        DiagnosticSpec::NeumannBias { x, y, v, depths, draws, sampling, seed } => {
            let p = bilevel(built, "neumann_bias")?;
            if x.len() != p.dim_upper() || y.len() != p.dim_lower() || v.len() != p.dim_lower() {
                return Err(Error::Config("neumann_bias x/y/v have the wrong dimension".into()));
            }
            let (x, y, v) = (Vector::from_vec(x.clone()), Vector::from_vec(y.clone()), Vector::from_vec(v.clone()));
            let reference = solve_lower_hessian(p, &x, &y, &v)?;
            let curve = neumann_bias_curve(p, &x, &y, &v, &reference, depths, *draws, *sampling, *seed).map_err(to_config)?;
            let rows: Vec<Vec<String>> = curve
                .iter()
                .map(|b| vec![b.depth_n.to_string(), float(b.empirical_bias), float(b.standard_error), float(b.bound)])
                .collect();
            Ok(table_csv("depth_N,empirical_bias,standard_error,bound", &rows))
        }
        DiagnosticSpec::Lipschitz { which, n_pairs, radius, seed } => {
            let p = bilevel(built, "lipschitz")?;
            let rows = which
                .iter()
                .map(|w| {
                    let c = lipschitz_certificate(p, *w, *n_pairs, *radius, *seed).map_err(to_config)?;
                    let name = serde_json::to_value(w).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                    Ok(vec![name, float(c.max_ratio), float(c.declared), c.pass.to_string()])
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(table_csv("which,max_ratio,declared,pass", &rows))
        }
        DiagnosticSpec::Lyapunov { horizon_K, seed } => {
            let p = bilevel(built, "lyapunov")?;
            if *horizon_K == 0 {
                return Err(Error::Config("lyapunov horizon_K must be at least 1".into()));
            }
            let pl = plan(built, &cfg.algorithm, *horizon_K, *seed).map_err(to_config)?;
            let traj = execute_plan(built, &pl)?;
            let series = lyapunov_series(p, &traj)?;
            let rows: Vec<Vec<String>> =
                series.iter().enumerate().map(|(k, v)| vec![k.to_string(), float(*v)]).collect();
            Ok(table_csv("k,lyapunov", &rows))
        }
        DiagnosticSpec::EpsilonApp { grid } => {
            let Built::Mdp(mdp) = built else {
                return Err(Error::Config("epsilon_app needs a tabular_mdp problem".into()));
            };
            let thetas = grid.points(mdp.dim_theta());
            let e = epsilon_app(mdp, &thetas)?;
            // a max over finitely many θ can only under-estimate the sup
            Ok(table_csv("n_theta,epsilon_app_sampled_lower_estimate", &[vec![thetas.len().to_string(), float(e)]]))
        }
    }
}

fn presets_table(a: &PresetArgs) -> Result<String> {
    let mut s = String::new();
    if let Some(path) = &a.config {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg = ExperimentConfig::from_json(&text, &a.overrides)?;
        let built = cfg.problem.build().map_err(to_config)?;
        let p = bilevel(&built, "presets")?;
        let base = match &cfg.algorithm {
            Algorithm::AlsetBilevel { config, .. }
            | Algorithm::AlsetMinmax { config }
            | Algorithm::AlsetCompositional { config }
            | Algorithm::TwoTimescale { config } => config.clone(),
            Algorithm::ActorCritic { .. } => unreachable!("validated as a bilevel-type problem"),
        };
        let c = p.constants();
        s.push_str(&format!("kappa {} L_f {} L_y {} L_F {} L_yx {}\n", c.kappa, c.L_f, c.L_y, c.L_F, c.L_yx));
        s.push_str("preset,alpha_base,inner_T,eta\n");
        for preset in [Preset::BilevelKappa, Preset::MinmaxKappa, Preset::Compositional] {
            let mut cfg = base.clone();
            cfg.preset = preset;
            cfg.preset_constant = a.constant;
            let o = apply_preset(c, &cfg)?;
            s.push_str(&format!("{},{},{},{}\n", preset_name(preset), o.alpha_base, o.inner_T, o.eta));
        }
        return Ok(s);
    }
    if !(a.constant > 0.0) {
        return Err(Error::Config("--constant must be positive".into()));
    }
    s.push_str("preset,kappa,alpha_base,inner_T,eta\n");
    for &kappa in &a.kappa {
        if !(kappa >= 1.0) || !kappa.is_finite() {
            return Err(Error::Config(format!("kappa must be finite and at least 1, got {kappa}")));
        }
        let c = derive_constants(1.0, 1.0, 1.0, kappa, 0.0, 0.0, 0.0, 0.0)?;
        for preset in [Preset::BilevelKappa, Preset::MinmaxKappa] {
            let cfg = crate::alset::AlsetConfig {
                horizon_K: 1,
                inner_T: 1,
                alpha_base: 1.0,
                eta: 1.0,
                neumann: crate::estimators::NeumannConfig::exact(),
                preset,
                preset_constant: a.constant,
                stepsizes: crate::alset::StepsizeRule::Schedule,
                main_text_ratio: false,
                two_timescale_beta: None,
                seed: 0,
                run_index: 0,
                x0: Vec::new(),
                y0: Vec::new(),
            };
            let o = apply_preset(&c, &cfg)?;
            s.push_str(&format!("{},{},{},{},{}\n", preset_name(preset), kappa, o.alpha_base, o.inner_T, o.eta));
        }
    }
    s.push_str("compositional,any,1,1,1/L_yx (1 when L_yx = 0)\n");
    Ok(s)
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::BilevelKappa => "bilevel_kappa",
        Preset::MinmaxKappa => "minmax_kappa",
        Preset::Compositional => "compositional",
        Preset::Manual => "manual",
    }
}
