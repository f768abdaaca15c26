//! Flat key-value experiment configuration.
//!
//! The format is one `key = value` pair per line, `#` starts a comment.
//! Unknown keys are rejected so typos cannot silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use opeval_core::envs::{ChainSpec, OpenWorldSpec};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub enum EnvChoice {
    Chain(ChainSpec<f64>),
    OpenWorld(OpenWorldSpec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorChoice {
    /// Sampled one-step Bellman backup.
    OneStep,
    /// Trajectory-based multi-step estimate with the configured traces.
    Retrace,
    /// Marginalized estimate with exactly converted TD weights.
    MarginalizedExact,
    /// Marginalized estimate with Monte-Carlo estimated weights,
    /// interleaved with the value updates.
    MarginalizedAlg2,
    /// Marginalized estimate with weights from the exact-gradient
    /// saddle-point solver.
    MarginalizedGda,
}

impl fmt::Display for OperatorChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OperatorChoice::OneStep => "one_step",
            OperatorChoice::Retrace => "retrace",
            OperatorChoice::MarginalizedExact => "marginalized_exact",
            OperatorChoice::MarginalizedAlg2 => "marginalized_alg2",
            OperatorChoice::MarginalizedGda => "marginalized_gda",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceChoice {
    OneStep,
    ImportanceSampling,
    Retrace,
    TreeBackup,
    QLambda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricChoice {
    /// Sum over actions of per-action relative errors at the start state.
    RelativeSum,
    /// Worst per-action relative error at the start state.
    RelativeMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PiMode {
    Soft,
    Hard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvChoice,
    pub operator: OperatorChoice,
    pub trace: TraceChoice,
    pub lambda: f64,
    pub cbar: f64,
    pub n_iterations: usize,
    pub n_seeds: usize,
    pub q_step_size: f64,
    pub metric: MetricChoice,
    pub out_dir: String,
    /// Iterations at which the open-world runner snapshots value grids.
    pub checkpoints: Vec<usize>,
    /// Start pairs for the weight-export grids.
    pub weight_starts: Vec<(usize, usize)>,
    pub pi_mode: PiMode,
    pub pi_steps: usize,
    pub pi_eval_iterations: usize,
    pub pi_rollouts: usize,
    pub alg2_alpha: f64,
    pub gda_lr_w: f64,
    pub gda_lr_q: f64,
    pub gda_steps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvChoice::Chain(ChainSpec::default()),
            operator: OperatorChoice::Retrace,
            trace: TraceChoice::Retrace,
            lambda: 1.0,
            cbar: 1.0,
            n_iterations: 1000,
            n_seeds: 100,
            q_step_size: 0.1,
            metric: MetricChoice::RelativeSum,
            out_dir: "results".to_string(),
            checkpoints: vec![0, 100, 1000],
            weight_starts: vec![(0, 0)],
            pi_mode: PiMode::Soft,
            pi_steps: 30,
            pi_eval_iterations: 300,
            pi_rollouts: 200,
            alg2_alpha: 0.1,
            gda_lr_w: 0.01,
            gda_lr_q: 4.0,
            gda_steps: 10_000,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_seeds == 0 {
            return Err(bad("seeds", "must be at least 1"));
        }
        if self.q_step_size <= 0.0 || self.q_step_size > 1.0 {
            return Err(bad("q_step_size", "must lie in (0, 1]"));
        }
        if self.alg2_alpha <= 0.0 || self.alg2_alpha > 1.0 {
            return Err(bad("alg2.alpha", "must lie in (0, 1]"));
        }
        if self.pi_rollouts == 0 {
            return Err(bad("pi.rollouts", "must be at least 1"));
        }
        Ok(())
    }
}

fn bad(field: &str, reason: &str) -> HarnessError {
    HarnessError::Config { field: field.to_string(), reason: reason.to_string() }
}

fn parse<T: FromStr>(field: &str, value: &str) -> Result<T, HarnessError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| bad(field, &format!("cannot parse {value:?}: {e}")))
}

impl FromStr for ExperimentConfig {
    type Err = HarnessError;

    fn from_str(text: &str) -> Result<Self, HarnessError> {
        let mut entries: BTreeMap<String, String> = BTreeMap::new();
        for (line_no, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(bad(&format!("line {}", line_no + 1), "expected `key = value`"));
            };
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }

        let mut config = ExperimentConfig::default();
        let mut chain = ChainSpec::<f64>::default();
        let mut world = OpenWorldSpec::<f64>::default();
        let mut env_kind = "chain".to_string();
        let mut discount: Option<f64> = None;

        for (key, value) in &entries {
            match key.as_str() {
                "env" => env_kind = value.clone(),
                "chain.actions" => chain.n_actions = parse(key, value)?,
                "chain.horizon" => chain.horizon = parse(key, value)?,
                "chain.beta" => chain.off_policy_level = parse(key, value)?,
                "chain.noise" => chain.noise_std = parse(key, value)?,
                "chain.optimal_action" => chain.optimal_action = parse(key, value)?,
                "world.side" => world.side = parse(key, value)?,
                "discount" => discount = Some(parse(key, value)?),
                "operator" => {
                    config.operator = match value.as_str() {
                        "one_step" => OperatorChoice::OneStep,
                        "retrace" => OperatorChoice::Retrace,
                        "marginalized_exact" => OperatorChoice::MarginalizedExact,
                        "marginalized_alg2" => OperatorChoice::MarginalizedAlg2,
                        "marginalized_gda" => OperatorChoice::MarginalizedGda,
                        other => return Err(bad(key, &format!("unknown operator {other:?}"))),
                    }
                }
                "trace" => {
                    config.trace = match value.as_str() {
                        "one_step" => TraceChoice::OneStep,
                        "is" => TraceChoice::ImportanceSampling,
                        "retrace" => TraceChoice::Retrace,
                        "tree_backup" => TraceChoice::TreeBackup,
                        "q_lambda" => TraceChoice::QLambda,
                        other => return Err(bad(key, &format!("unknown trace scheme {other:?}"))),
                    }
                }
                "lambda" => config.lambda = parse(key, value)?,
                "cbar" => config.cbar = parse(key, value)?,
                "iterations" => config.n_iterations = parse(key, value)?,
                "seeds" => config.n_seeds = parse(key, value)?,
                "q_step_size" => config.q_step_size = parse(key, value)?,
                "metric" => {
                    config.metric = match value.as_str() {
                        "relative_sum" => MetricChoice::RelativeSum,
                        "relative_max" => MetricChoice::RelativeMax,
                        other => return Err(bad(key, &format!("unknown metric {other:?}"))),
                    }
                }
                "out" => config.out_dir = value.clone(),
                "checkpoints" => {
                    config.checkpoints = value
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| parse(key, s.trim()))
                        .collect::<Result<_, _>>()?;
                }
                "weight_starts" => {
                    config.weight_starts = value
                        .split(';')
                        .filter(|s| !s.trim().is_empty())
                        .map(|pair| {
                            let Some((x, a)) = pair.split_once(',') else {
                                return Err(bad(key, "expected `state,action` pairs separated by `;`"));
                            };
                            Ok((parse(key, x.trim())?, parse(key, a.trim())?))
                        })
                        .collect::<Result<_, _>>()?;
                }
                "pi.mode" => {
                    config.pi_mode = match value.as_str() {
                        "soft" => PiMode::Soft,
                        "hard" => PiMode::Hard,
                        other => return Err(bad(key, &format!("unknown mode {other:?}"))),
                    }
                }
                "pi.steps" => config.pi_steps = parse(key, value)?,
                "pi.eval_iterations" => config.pi_eval_iterations = parse(key, value)?,
                "pi.rollouts" => config.pi_rollouts = parse(key, value)?,
                "alg2.alpha" => config.alg2_alpha = parse(key, value)?,
                "gda.lr_w" => config.gda_lr_w = parse(key, value)?,
                "gda.lr_q" => config.gda_lr_q = parse(key, value)?,
                "gda.steps" => config.gda_steps = parse(key, value)?,
                other => return Err(bad(other, "unknown configuration key")),
            }
        }

        if let Some(gamma) = discount {
            chain.discount = gamma;
            world.discount = gamma;
        }
        config.env = match env_kind.as_str() {
            "chain" => EnvChoice::Chain(chain),
            "open_world" => EnvChoice::OpenWorld(world),
            other => return Err(bad("env", &format!("unknown environment {other:?}"))),
        };
        config.validate()?;
        Ok(config)
    }
}
