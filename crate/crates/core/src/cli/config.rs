//! Experiment configuration files.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::actor_critic::{random_mdp, ActorCriticConfig, TabularMdp, ThetaGrid};
use crate::alset::{apply_preset, AlsetConfig, Preset};
use crate::diagnostics::{Certified, DepthSampling, CERTIFICATE_RADIUS};
use crate::error::{Error, Result};
use crate::estimators::depth_for_horizon;
use crate::problem_model::BilevelProblem;
use crate::synthetic::{
    canned_compositional, canned_minmax, canned_quadratic, canned_smooth, make_compositional, make_minmax_quadratic,
    make_quadratic_bilevel, make_smooth_bilevel, CompositionalSpec, MinMaxSpec, QuadraticBilevelSpec, SmoothBilevelSpec,
};

/// Either the full instance or the generator arguments that produce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Source<I, G> {
    Inline(I),
    Generated(G),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticGenerator {
    pub kappa: f64,
    pub dim_upper: usize,
    pub dim_lower: usize,
    /// `[σ_grad_f, σ_grad_g, σ_hess]`.
    pub noise: [f64; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothGenerator {
    pub kappa: f64,
    pub dim_upper: usize,
    pub dim_lower: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinMaxGenerator {
    pub kappa: f64,
    pub dim_upper: usize,
    pub dim_lower: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionalGenerator {
    pub dim_upper: usize,
    pub dim_lower: usize,
    /// `[σ_h, σ_grad_h, σ_grad_f]`.
    pub noise: [f64; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpGenerator {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    QuadraticBilevel { source: Source<QuadraticBilevelSpec, QuadraticGenerator> },
    SmoothBilevel { source: Source<SmoothBilevelSpec, SmoothGenerator> },
    MinmaxQuadratic { source: Source<MinMaxSpec, MinMaxGenerator> },
    Compositional { source: Source<CompositionalSpec, CompositionalGenerator> },
    TabularMdp { source: Source<TabularMdp, MdpGenerator> },
}

pub enum Built {
    Bilevel(Box<dyn BilevelProblem>),
    Mdp(TabularMdp),
}

impl ProblemSpec {
    pub fn build(&self) -> Result<Built> {
        Ok(match self {
            ProblemSpec::QuadraticBilevel { source } => {
                let spec = match source {
                    Source::Inline(s) => s.clone(),
                    Source::Generated(g) => canned_quadratic(g.kappa, g.dim_upper, g.dim_lower, g.noise, g.seed),
                };
                Built::Bilevel(Box::new(make_quadratic_bilevel(&spec)?))
            }
            ProblemSpec::SmoothBilevel { source } => {
                let spec = match source {
                    Source::Inline(s) => s.clone(),
                    Source::Generated(g) => canned_smooth(g.kappa, g.dim_upper, g.dim_lower, g.seed),
                };
                Built::Bilevel(Box::new(make_smooth_bilevel(&spec)?))
            }
            ProblemSpec::MinmaxQuadratic { source } => {
                let spec = match source {
                    Source::Inline(s) => s.clone(),
                    Source::Generated(g) => canned_minmax(g.kappa, g.dim_upper, g.dim_lower, g.noise_sigma, g.seed),
                };
                Built::Bilevel(Box::new(make_minmax_quadratic(&spec)?))
            }
            ProblemSpec::Compositional { source } => {
                let spec = match source {
                    Source::Inline(s) => s.clone(),
                    Source::Generated(g) => canned_compositional(g.dim_upper, g.dim_lower, g.noise, g.seed),
                };
                Built::Bilevel(Box::new(make_compositional(&spec)?))
            }
            ProblemSpec::TabularMdp { source } => {
                let mdp = match source {
                    Source::Inline(m) => m.clone(),
                    Source::Generated(g) => {
                        if g.n_states == 0 || g.n_actions == 0 {
                            return Err(Error::Config("generated MDP needs states and actions".into()));
                        }
                        random_mdp(g.n_states, g.n_actions, g.gamma, g.seed)
                    }
                };
                mdp.validate()?;
                Built::Mdp(mdp)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Algorithm {
    AlsetBilevel {
        config: AlsetConfig,
        /// Replace `neumann.depth_N` by `depth_for_horizon(K)` per run.
        #[serde(default)]
        depth_from_horizon: bool,
    },
    AlsetMinmax { config: AlsetConfig },
    AlsetCompositional { config: AlsetConfig },
    TwoTimescale { config: AlsetConfig },
    ActorCritic { config: ActorCriticConfig },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMetric {
    /// `(1/K) Σ_{k<K} ‖∇F(x^k)‖²`.
    #[serde(rename = "mean_grad_F_norm_sq")]
    MeanGradFNormSq,
    /// `‖y^K − y*(x^K)‖²`.
    FinalLowerErrSq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSpec {
    pub metric: RateMetric,
    pub slope_interval: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiagnosticSpec {
    NeumannBias {
        x: Vec<f64>,
        y: Vec<f64>,
        v: Vec<f64>,
        depths: Vec<usize>,
        draws: usize,
        sampling: DepthSampling,
        seed: u64,
    },
    Lipschitz {
        which: Vec<Certified>,
        n_pairs: usize,
        #[serde(default = "default_radius")]
        radius: f64,
        seed: u64,
    },
    /// Lyapunov values along the run with horizon `horizon_K` and `seed`.
    Lyapunov {
        horizon_K: usize,
        seed: u64,
    },
    EpsilonApp { grid: ThetaGrid },
}

fn default_radius() -> f64 {
    CERTIFICATE_RADIUS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub algorithm: Algorithm,
    /// Horizons K; each also serves as the run index of the stream key.
    pub sweep: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Output directory, overridable with `--out`.
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub rate: Option<RateSpec>,
    #[serde(default)]
    pub diagnostics: Vec<DiagnosticSpec>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweep.is_empty() {
            return Err(Error::Config("sweep must list at least one horizon K".into()));
        }
        if self.sweep.contains(&0) {
            return Err(Error::Config("every K in sweep must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        let mut ks = self.sweep.clone();
        ks.sort_unstable();
        ks.dedup();
        if ks.len() != self.sweep.len() {
            return Err(Error::Config("sweep contains duplicate horizons".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("seeds contains duplicates".into()));
        }
        let mdp_problem = matches!(self.problem, ProblemSpec::TabularMdp { .. });
        let mdp_algorithm = matches!(self.algorithm, Algorithm::ActorCritic { .. });
        if mdp_problem != mdp_algorithm {
            return Err(Error::Config("actor_critic runs on tabular_mdp problems and nothing else does".into()));
        }
        let needed = match &self.algorithm {
            Algorithm::AlsetMinmax { .. } => Some("minmax_quadratic"),
            Algorithm::AlsetCompositional { .. } => Some("compositional"),
            _ => None,
        };
        let kind = match self.problem {
            ProblemSpec::QuadraticBilevel { .. } => "quadratic_bilevel",
            ProblemSpec::SmoothBilevel { .. } => "smooth_bilevel",
            ProblemSpec::MinmaxQuadratic { .. } => "minmax_quadratic",
            ProblemSpec::Compositional { .. } => "compositional",
            ProblemSpec::TabularMdp { .. } => "tabular_mdp",
        };
        if let Some(n) = needed {
            if n != kind {
                return Err(Error::Config(format!("algorithm needs a {n} problem, got {kind}")));
            }
        }
        if let Some(r) = &self.rate {
            let [lo, hi] = r.slope_interval;
            if !(lo <= hi) {
                return Err(Error::Config("slope_interval must be [lo, hi] with lo <= hi".into()));
            }
        }
        match &self.algorithm {
            Algorithm::AlsetBilevel { config, .. }
            | Algorithm::AlsetMinmax { config }
            | Algorithm::AlsetCompositional { config }
            | Algorithm::TwoTimescale { config } => config.validate().map_err(config_error),
            Algorithm::ActorCritic { .. } => Ok(()),
        }
    }

    /// `rate` requires at least three horizons.
    pub fn validate_for_rate(&self) -> Result<&RateSpec> {
        let r = self.rate.as_ref().ok_or_else(|| Error::Config("rate command needs a rate section".into()))?;
        if self.sweep.len() < 3 {
            return Err(Error::Config("rate fit needs at least 3 horizons in sweep".into()));
        }
        Ok(r)
    }
}

fn config_error(e: Error) -> Error {
    match e {
        Error::Domain(m) => Error::Config(m),
        other => other,
    }
}

/// Per-run optimizer settings for horizon `k` and `seed`.
pub fn alset_for_run(problem: &dyn BilevelProblem, base: &AlsetConfig, k: usize, seed: u64, depth_from_horizon: bool) -> Result<AlsetConfig> {
    let mut cfg = base.clone();
    cfg.horizon_K = k;
    cfg.seed = seed;
    cfg.run_index = k as u64;
    if cfg.preset != Preset::Manual {
        cfg = apply_preset(problem.constants(), &cfg)?;
    }
    if depth_from_horizon {
        cfg.neumann.depth_N = depth_for_horizon(problem.constants(), k)?;
    }
    Ok(cfg)
}

pub fn actor_critic_for_run(base: &ActorCriticConfig, k: usize, seed: u64) -> ActorCriticConfig {
    let mut cfg = base.clone();
    cfg.horizon_K = k;
    cfg.seed = seed;
    cfg.run_index = k as u64;
    cfg
}

/// Set a dotted path (`algorithm.config.alpha_base`, `sweep.0`) to a value.
/// The value is parsed as JSON and falls back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not KEY=VALUE")))?;
    if path.is_empty() {
        return Err(Error::Config("override key is empty".into()));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert((*part).to_string(), value);
                    return Ok(());
                }
                map.entry((*part).to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("override path '{path}': '{part}' is not an index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("override path '{path}': index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("override path '{path}' runs through a scalar at '{part}'"))),
        };
    }
    unreachable!("loop returns on the last segment")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_follow_dotted_paths() {
        let mut v = json!({"a": {"b": 1}, "sweep": [1, 2]});
        apply_override(&mut v, "a.b=2.5").unwrap();
        apply_override(&mut v, "sweep.1=7").unwrap();
        apply_override(&mut v, "a.c=name").unwrap();
        assert_eq!(v, json!({"a": {"b": 2.5, "c": "name"}, "sweep": [1, 7]}));
        assert!(apply_override(&mut v, "sweep.5=1").is_err());
        assert!(apply_override(&mut v, "a.b.c=1").is_err());
        assert!(apply_override(&mut v, "novalue").is_err());
    }
}
