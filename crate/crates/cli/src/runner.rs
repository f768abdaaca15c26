//! Experiment drivers: evaluation loops, open-world heatmaps, policy
//! iteration, and TD-weight export. Seeds fan out to a worker pool and are
//! reduced deterministically in seed order.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use opeval_core::envs::{build_chain, build_open_world};
use opeval_core::estimation::{estimate_operator, EstimatorKind, OperatorParams, WeightEstimator};
use opeval_core::mdp::{
    discount_horizon_steps, exact_q, sample_trajectory, Policy, QFunction, TabularMdp, Trajectory,
};
use opeval_core::operators::{
    apply_marginalized, apply_multistep, materialize_traces, residual_report_row, trace_to_weights,
    TdWeights, TraceScheme,
};
use opeval_core::saddle::gda_estimate_weights;

use crate::config::{EnvChoice, ExperimentConfig, OperatorChoice, PiMode, TraceChoice};
use crate::metrics::{relative_error, write_grid, write_series, MetricSeries};
use crate::HarnessError;

pub struct Environment {
    pub mdp: TabularMdp<f64>,
    pub target: Policy<f64>,
    pub behavior: Policy<f64>,
    pub start_state: usize,
    pub side: Option<usize>,
}

pub fn build_environment(config: &ExperimentConfig) -> Result<Environment, HarnessError> {
    match &config.env {
        EnvChoice::Chain(spec) => {
            let (mdp, target, behavior) = build_chain(spec)?;
            Ok(Environment { mdp, target, behavior, start_state: spec.start_state(), side: None })
        }
        EnvChoice::OpenWorld(spec) => {
            let (mdp, target, behavior) = build_open_world(spec)?;
            Ok(Environment {
                mdp,
                target,
                behavior,
                start_state: spec.start_state(),
                side: Some(spec.side),
            })
        }
    }
}

pub fn trace_scheme(config: &ExperimentConfig) -> TraceScheme<f64> {
    match config.trace {
        TraceChoice::OneStep => TraceScheme::OneStep,
        TraceChoice::ImportanceSampling => TraceScheme::ImportanceSampling,
        TraceChoice::Retrace => TraceScheme::Retrace { lambda: config.lambda, clip: config.cbar },
        TraceChoice::TreeBackup => TraceScheme::TreeBackup,
        TraceChoice::QLambda => TraceScheme::QLambda(config.lambda),
    }
}

/// Exact or optimizer-based weight tables, shared across seeds. The
/// Monte-Carlo estimator is per-run state instead.
enum WeightSource {
    None,
    Exact(TdWeights<f64>),
    PerRow(Vec<Vec<f64>>),
}

fn prepare_weights(
    config: &ExperimentConfig,
    env: &Environment,
    traces: &[f64],
) -> Result<WeightSource, HarnessError> {
    match config.operator {
        OperatorChoice::MarginalizedExact => {
            let w = trace_to_weights(&env.mdp, &env.behavior, traces)?;
            Ok(WeightSource::Exact(w))
        }
        OperatorChoice::MarginalizedGda => {
            let n = env.mdp.n_pairs();
            let rows: Result<Vec<Vec<f64>>, _> = (0..n)
                .into_par_iter()
                .map(|pair| {
                    let start = env.mdp.pair_from_index(pair);
                    gda_estimate_weights(
                        &env.mdp,
                        &env.behavior,
                        traces,
                        start,
                        None,
                        config.gda_lr_w,
                        config.gda_lr_q,
                        config.gda_steps,
                    )
                    .map(|state| state.w)
                })
                .collect();
            Ok(WeightSource::PerRow(rows?))
        }
        _ => Ok(WeightSource::None),
    }
}

fn suffix_of(traj: &Trajectory<f64>, t: usize) -> Trajectory<f64> {
    Trajectory {
        steps: traj.steps[t..].to_vec(),
        final_state: traj.final_state,
        terminated: traj.terminated,
    }
}

struct RunState<'a> {
    q: QFunction<f64>,
    alg2: Option<WeightEstimator<f64>>,
    weights: &'a WeightSource,
}

/// One collect-and-update iteration of the evaluation loop: sample a
/// trajectory, refresh the weight estimator if one is running, and fold the
/// operator's stochastic targets into the value table for every visited pair.
fn evaluation_iteration(
    config: &ExperimentConfig,
    env: &Environment,
    traces: &[f64],
    state: &mut RunState<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<(), HarnessError> {
    let mdp = &env.mdp;
    let horizon = discount_horizon_steps(mdp.discount(), 1e-12);
    let a0 = env.behavior.sample_action(env.start_state, rng);
    let traj = sample_trajectory(mdp, &env.behavior, (env.start_state, a0), horizon, rng.gen())?;

    if let Some(estimator) = state.alg2.as_mut() {
        estimator.observe(mdp, &traj);
    }

    let alpha = config.q_step_size;
    for t in 0..traj.len() {
        let step = traj.steps[t];
        let pair = mdp.pair_index(step.state, step.action);
        let target_value = match config.operator {
            OperatorChoice::OneStep => {
                let next = traj.next_state(t);
                step.reward + mdp.discount() * state.q.expected_under(&env.target, next)
            }
            OperatorChoice::Retrace => {
                let sample = estimate_operator(
                    &suffix_of(&traj, t),
                    mdp,
                    &env.target,
                    &env.behavior,
                    &state.q,
                    OperatorParams::Multistep { traces },
                    EstimatorKind::Trajectory,
                    (step.state, step.action),
                    0,
                )?;
                sample.value
            }
            OperatorChoice::MarginalizedExact
            | OperatorChoice::MarginalizedAlg2
            | OperatorChoice::MarginalizedGda => {
                let row: Vec<f64>;
                let row_ref: &[f64] = match (&state.weights, state.alg2.as_ref()) {
                    (WeightSource::Exact(w), _) => w.row(pair),
                    (WeightSource::PerRow(rows), _) => &rows[pair],
                    (WeightSource::None, Some(estimator)) => {
                        row = estimator.normalized_row(pair);
                        &row
                    }
                    (WeightSource::None, None) => {
                        return Err(HarnessError::Internal("no weight source prepared".into()))
                    }
                };
                let sample = estimate_operator(
                    &suffix_of(&traj, t),
                    mdp,
                    &env.target,
                    &env.behavior,
                    &state.q,
                    OperatorParams::Marginalized { weight_row: row_ref },
                    EstimatorKind::Trajectory,
                    (step.state, step.action),
                    0,
                )?;
                sample.value
            }
        };
        state.q.values[pair] = (1.0 - alpha) * state.q.values[pair] + alpha * target_value;
    }
    Ok(())
}

fn make_run_state<'a>(
    config: &ExperimentConfig,
    env: &Environment,
    traces: &[f64],
    weights: &'a WeightSource,
) -> Result<RunState<'a>, HarnessError> {
    let alg2 = if config.operator == OperatorChoice::MarginalizedAlg2 {
        Some(WeightEstimator::new(&env.mdp, traces, config.alg2_alpha)?)
    } else {
        None
    };
    Ok(RunState { q: QFunction::zeros(env.mdp.n_pairs()), alg2, weights })
}

fn run_seeds(master_seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    (0..n).map(|_| rng.gen()).collect()
}

/// Relative-error evaluation experiment. Returns the seed-reduced series
/// (entry 0 is the error of the zero initialization) and writes `eval.csv`.
pub fn run_evaluation(
    config: &ExperimentConfig,
    master_seed: u64,
) -> Result<MetricSeries, HarnessError> {
    config.validate()?;
    let env = build_environment(config)?;
    let traces = materialize_traces(&trace_scheme(config), &env.target, &env.behavior)?;
    let weights = prepare_weights(config, &env, &traces)?;
    let q_pi = exact_q(&env.mdp, &env.target)?;

    let seeds = run_seeds(master_seed, config.n_seeds);
    let runs: Result<Vec<Vec<f64>>, HarnessError> = seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut state = make_run_state(config, &env, &traces, &weights)?;
            let mut series = Vec::with_capacity(config.n_iterations + 1);
            series.push(relative_error(&state.q, &q_pi, &env.mdp, env.start_state, config.metric));
            for _ in 0..config.n_iterations {
                evaluation_iteration(config, &env, &traces, &mut state, &mut rng)?;
                series.push(relative_error(&state.q, &q_pi, &env.mdp, env.start_state, config.metric));
            }
            Ok(series)
        })
        .collect();
    let series = MetricSeries::from_runs(&runs?);
    write_series(&Path::new(&config.out_dir).join("eval.csv"), "mean_error", &series)?;
    Ok(series)
}

/// Open-world evaluation with value-grid snapshots. Returns the seed-averaged
/// grid per checkpoint and writes one `heatmap_<operator>_iter<k>.csv` each.
pub fn run_openworld_heatmap(
    config: &ExperimentConfig,
    master_seed: u64,
) -> Result<Vec<(usize, Vec<f64>)>, HarnessError> {
    config.validate()?;
    let env = build_environment(config)?;
    let side = env.side.ok_or_else(|| HarnessError::Config {
        field: "env".into(),
        reason: "heatmaps need env = open_world".into(),
    })?;
    let traces = materialize_traces(&trace_scheme(config), &env.target, &env.behavior)?;
    let weights = prepare_weights(config, &env, &traces)?;
    let mut checkpoints = config.checkpoints.clone();
    checkpoints.sort_unstable();
    checkpoints.dedup();

    let seeds = run_seeds(master_seed, config.n_seeds);
    let runs: Result<Vec<Vec<Vec<f64>>>, HarnessError> = seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut state = make_run_state(config, &env, &traces, &weights)?;
            let mut grids = Vec::with_capacity(checkpoints.len());
            let mut next_checkpoint = 0usize;
            for iteration in 0..=config.n_iterations {
                if next_checkpoint < checkpoints.len() && checkpoints[next_checkpoint] == iteration {
                    grids.push(state.q.to_state_values(&env.target).values);
                    next_checkpoint += 1;
                }
                if iteration < config.n_iterations {
                    evaluation_iteration(config, &env, &traces, &mut state, &mut rng)?;
                }
            }
            Ok(grids)
        })
        .collect();
    let runs = runs?;

    let n_states = env.mdp.n_states();
    let mut averaged = Vec::new();
    for (k, &checkpoint) in checkpoints.iter().enumerate() {
        if checkpoint > config.n_iterations {
            continue;
        }
        let mut grid = vec![0.0; n_states];
        for run in &runs {
            for (acc, v) in grid.iter_mut().zip(&run[k]) {
                *acc += v;
            }
        }
        for v in &mut grid {
            *v /= runs.len() as f64;
        }
        let path =
            Path::new(&config.out_dir).join(format!("heatmap_{}_iter{checkpoint}.csv", config.operator));
        write_grid(&path, side, &grid)?;
        averaged.push((checkpoint, grid));
    }
    Ok(averaged)
}

/// How policy iteration obtains its value estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PiValueSource {
    /// Run the configured operator's evaluation loop between improvements.
    Operator,
    /// Plug in the exact value of the current policy (diagnostic mode).
    ExactQ,
}

/// Policy iteration on the open world: evaluate under the fixed uniform
/// behavior policy, improve toward the greedy policy (ties to the lowest
/// action index), and score each new policy by Monte-Carlo returns from
/// uniformly random start states. Writes `pi.csv`.
pub fn run_policy_iteration(
    config: &ExperimentConfig,
    master_seed: u64,
    value_source: PiValueSource,
) -> Result<MetricSeries, HarnessError> {
    config.validate()?;
    let env = build_environment(config)?;
    if env.side.is_none() {
        return Err(HarnessError::Config {
            field: "env".into(),
            reason: "policy iteration needs env = open_world".into(),
        });
    }
    let improvement_rate = match config.pi_mode {
        PiMode::Soft => 0.1,
        PiMode::Hard => 1.0,
    };

    let seeds = run_seeds(master_seed, config.n_seeds);
    let runs: Result<Vec<Vec<f64>>, HarnessError> = seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mdp = &env.mdp;
            let mut policy = Policy::uniform(mdp.n_states(), mdp.n_actions());
            let mut q = QFunction::zeros(mdp.n_pairs());
            let mut returns = Vec::with_capacity(config.pi_steps);
            for _ in 0..config.pi_steps {
                match value_source {
                    PiValueSource::ExactQ => {
                        q = exact_q(mdp, &policy)?;
                    }
                    PiValueSource::Operator => {
                        let pi_env = Environment {
                            mdp: mdp.clone(),
                            target: policy.clone(),
                            behavior: env.behavior.clone(),
                            start_state: env.start_state,
                            side: env.side,
                        };
                        let traces = materialize_traces(&trace_scheme(config), &policy, &env.behavior)?;
                        let weights = prepare_weights(config, &pi_env, &traces)?;
                        let mut state = make_run_state(config, &pi_env, &traces, &weights)?;
                        state.q = q;
                        for _ in 0..config.pi_eval_iterations {
                            evaluation_iteration(config, &pi_env, &traces, &mut state, &mut rng)?;
                        }
                        q = state.q;
                    }
                }
                let greedy = greedy_policy(mdp, &q);
                policy = greedy.mix(&policy, improvement_rate)?;
                returns.push(mc_average_return(mdp, &policy, config.pi_rollouts, &mut rng));
            }
            Ok(returns)
        })
        .collect();
    let series = MetricSeries::from_runs(&runs?);
    write_series(&Path::new(&config.out_dir).join("pi.csv"), "mean_return", &series)?;
    Ok(series)
}

fn greedy_policy(mdp: &TabularMdp<f64>, q: &QFunction<f64>) -> Policy<f64> {
    let na = mdp.n_actions();
    let mut probs = vec![0.0; mdp.n_pairs()];
    for x in 0..mdp.n_states() {
        let mut best = 0usize;
        for a in 1..na {
            if q.values[x * na + a] > q.values[x * na + best] {
                best = a;
            }
        }
        probs[x * na + best] = 1.0;
    }
    Policy::new(mdp.n_states(), na, probs).expect("greedy policy is row-stochastic")
}

fn mc_average_return(
    mdp: &TabularMdp<f64>,
    policy: &Policy<f64>,
    n_rollouts: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let horizon = discount_horizon_steps(mdp.discount(), 1e-10);
    let mut total = 0.0;
    for _ in 0..n_rollouts {
        let x0 = rng.gen_range(0..mdp.n_states());
        let a0 = policy.sample_action(x0, rng);
        let traj = sample_trajectory(mdp, policy, (x0, a0), horizon, rng.gen())
            .expect("rollout from valid start");
        let mut disc = 1.0;
        let mut ret = 0.0;
        for step in &traj.steps {
            ret += disc * step.reward;
            disc *= mdp.discount();
        }
        total += ret;
    }
    total / n_rollouts as f64
}

/// Export per-state averaged TD-weight grids for the configured start pairs:
/// entry `x'` of a grid is the mean over `a'` of `w_{start}(x', a')`.
/// Writes one `weights_s<state>_a<action>.csv` per start pair.
pub fn export_weights(config: &ExperimentConfig, master_seed: u64) -> Result<(), HarnessError> {
    config.validate()?;
    let env = build_environment(config)?;
    let side = env.side.ok_or_else(|| HarnessError::Config {
        field: "env".into(),
        reason: "weight export needs env = open_world".into(),
    })?;
    for &(x, a) in &config.weight_starts {
        env.mdp.check_start((x, a))?;
    }
    let traces = materialize_traces(&trace_scheme(config), &env.target, &env.behavior)?;
    let rows: Vec<(usize, Vec<f64>)> = match config.operator {
        OperatorChoice::MarginalizedExact => {
            let w = trace_to_weights(&env.mdp, &env.behavior, &traces)?;
            config
                .weight_starts
                .iter()
                .map(|&(x, a)| {
                    let pair = env.mdp.pair_index(x, a);
                    (pair, w.row(pair).to_vec())
                })
                .collect()
        }
        OperatorChoice::MarginalizedGda => {
            // only the requested rows; each one is a separate optimization
            let mut rows = Vec::with_capacity(config.weight_starts.len());
            for &(x, a) in &config.weight_starts {
                let state = gda_estimate_weights(
                    &env.mdp,
                    &env.behavior,
                    &traces,
                    (x, a),
                    None,
                    config.gda_lr_w,
                    config.gda_lr_q,
                    config.gda_steps,
                )?;
                rows.push((env.mdp.pair_index(x, a), state.w));
            }
            rows
        }
        OperatorChoice::MarginalizedAlg2 => {
            let mut estimator = WeightEstimator::new(&env.mdp, &traces, config.alg2_alpha)?;
            let horizon = discount_horizon_steps(env.mdp.discount(), 1e-12);
            let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
            for _ in 0..config.n_iterations {
                let a0 = env.behavior.sample_action(env.start_state, &mut rng);
                let traj = sample_trajectory(
                    &env.mdp,
                    &env.behavior,
                    (env.start_state, a0),
                    horizon,
                    rng.gen(),
                )?;
                estimator.observe(&env.mdp, &traj);
            }
            config
                .weight_starts
                .iter()
                .map(|&(x, a)| {
                    let pair = env.mdp.pair_index(x, a);
                    (pair, estimator.normalized_row(pair))
                })
                .collect()
        }
        OperatorChoice::OneStep | OperatorChoice::Retrace => {
            return Err(HarnessError::Config {
                field: "operator".into(),
                reason: "weight export needs a marginalized operator".into(),
            })
        }
    };

    let na = env.mdp.n_actions();
    for (pair, row) in rows {
        let (x, a) = env.mdp.pair_from_index(pair);
        let grid: Vec<f64> = (0..env.mdp.n_states())
            .map(|state| (0..na).map(|action| row[state * na + action]).sum::<f64>() / na as f64)
            .collect();
        let path = Path::new(&config.out_dir).join(format!("weights_s{x}_a{a}.csv"));
        write_grid(&path, side, &grid)?;
    }
    Ok(())
}

/// Quick internal consistency checks; prints one line per check.
pub fn selftest() -> Result<(), HarnessError> {
    use opeval_core::mdp::discounted_visitation;

    // hand-built weight row with a known local contraction rate
    {
        let n = 5;
        let na = 2;
        let mut transition = vec![0.0; n * na * n];
        for x in 0..n {
            let next = (x + 1).min(n - 1);
            for a in 0..na {
                transition[(x * na + a) * n + next] = 1.0;
            }
        }
        let mdp: TabularMdp<f64> =
            TabularMdp::new(n, na, transition, vec![0.0; n * na], vec![0.0; n * na], 0.8, &[])?;
        let policy = Policy::uniform(n, na);
        let d_mu = discounted_visitation(&mdp, &policy, (0, 0))?.weights;
        let mut w_row = vec![0.0; n * na];
        w_row[0] = 0.2 / d_mu[0];
        w_row[4] = 0.01 / d_mu[4];
        let rate = residual_report_row(&mdp, &policy, &policy, &w_row, (0, 0))?.local_rate;
        check("handcrafted local contraction rate = 0.89", (rate - 0.89).abs() < 1e-9)?;
    }

    // operator equivalence on a random MDP
    {
        let mdp = TabularMdp::<f64>::random(5, 2, 0.9, 11);
        let target = Policy::random(5, 2, 12);
        let behavior = Policy::random(5, 2, 13);
        let c =
            materialize_traces(&TraceScheme::Retrace { lambda: 1.0, clip: 1.0 }, &target, &behavior)?;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let q = QFunction::from_values((0..10).map(|_| rng.gen::<f64>()).collect())?;
        let multi = apply_multistep(&mdp, &target, &behavior, &c, &q)?;
        let w = trace_to_weights(&mdp, &behavior, &c)?;
        let marg = apply_marginalized(&mdp, &target, &behavior, &w, &q)?;
        let gap = multi.values.iter().zip(&marg.values).fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs()));
        check("multistep and marginalized operators agree", gap < 1e-8)?;
    }

    // dual LP reproduces the exact value
    {
        let mdp = TabularMdp::<f64>::random(4, 2, 0.9, 21);
        let target = Policy::random(4, 2, 22);
        let q_pi = exact_q(&mdp, &target)?;
        let problem = opeval_core::lp::build_dual_lp(&mdp, &target, (1, 0))?;
        let solution = opeval_core::lp::simplex_solve(&problem)?;
        let pair = mdp.pair_index(1, 0);
        check(
            "dual LP objective equals the exact value",
            (solution.objective_value - q_pi.values[pair]).abs() < 1e-8,
        )?;
    }

    // chain sanity: uniform behavior, deterministic target
    {
        let (mdp, target, _behavior) = build_chain(&opeval_core::envs::ChainSpec::<f64>::default())?;
        let q = exact_q(&mdp, &target)?;
        let expected = mdp.discount().powi(9);
        check("chain start value is gamma^(T-1)", (q.values[0] - expected).abs() < 1e-12)?;
    }
    Ok(())
}

fn check(name: &str, ok: bool) -> Result<(), HarnessError> {
    if ok {
        println!("[ok] {name}");
        Ok(())
    } else {
        println!("[fail] {name}");
        Err(HarnessError::Internal(format!("selftest failed: {name}")))
    }
}
