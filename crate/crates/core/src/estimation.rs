//! Stochastic estimates of the evaluation operators and Monte-Carlo
//! TD-weight estimation.
//!
//! Estimates come in four forms: {multi-step, marginalized} x {trajectory,
//! random-time}. All four are unbiased for their exact operator. When a
//! trajectory has been absorbed into a terminal state, the remaining
//! geometric tail is added in closed form (its conditional expectation given
//! absorption), which preserves unbiasedness and removes tail variance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::mdp::{discount_horizon_steps, rollout, Policy, QFunction, TabularMdp, Trajectory};
use crate::scalar::Scalar;

/// Which operator a stochastic estimate targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    Multistep,
    Marginalized,
}

/// Trajectory-based estimates sum over the whole trajectory; random-time
/// estimates evaluate a single step at a geometric random time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Trajectory,
    RandomTime,
}

/// Operator parameters for one start pair: trace coefficients for the
/// multi-step estimate, or one TD-weight row for the marginalized estimate.
#[derive(Debug, Clone, Copy)]
pub enum OperatorParams<'a, T> {
    Multistep { traces: &'a [T] },
    Marginalized { weight_row: &'a [T] },
}

impl<T> OperatorParams<'_, T> {
    pub fn kind(&self) -> OperatorKind {
        match self {
            OperatorParams::Multistep { .. } => OperatorKind::Multistep,
            OperatorParams::Marginalized { .. } => OperatorKind::Marginalized,
        }
    }
}

/// One stochastic operator estimate.
#[derive(Debug, Clone, Copy)]
pub struct EstimatorSample<T> {
    pub value: T,
    pub start: (usize, usize),
    pub kind: EstimatorKind,
    pub operator: OperatorKind,
}

/// Draw the geometric random time with `P(tau = n) = (1-gamma) gamma^n`.
pub fn sample_random_time<T: Scalar>(gamma: T, seed: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_random_time(gamma.to_f64_lossy(), &mut rng)
}

pub(crate) fn draw_random_time<R: Rng + ?Sized>(gamma: f64, rng: &mut R) -> u64 {
    if gamma <= 0.0 {
        return 0;
    }
    // inverse CDF: P(tau >= n) = gamma^n
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    (u.ln() / gamma.ln()).floor() as u64
}

/// Sampled Bellman error at step `t`:
/// `r_t + gamma Q(x_{t+1}, pi(x_{t+1})) - Q(x_t, a_t)`.
fn sampled_bellman_error<T: Scalar>(
    traj: &Trajectory<T>,
    t: usize,
    target: &Policy<T>,
    q: &QFunction<T>,
    gamma: T,
    n_actions: usize,
) -> T {
    let step = &traj.steps[t];
    let next = traj.next_state(t);
    step.reward + gamma * q.expected_under(target, next) - q.values[step.state * n_actions + step.action]
}

/// Closed-form tail statistics at an absorbing terminal state `y`:
/// the behavior-expected trace mass and error terms used to integrate the
/// remaining `sum_{t >= L} gamma^t (...)` analytically.
struct AbsorbingTail<T> {
    /// `sum_a mu(a|y) c(y,a)`
    trace_mass: T,
    /// `sum_a mu(a|y) c(y,a) (gamma qbar - q(y,a))`
    traced_error: T,
    /// `sum_a mu(a|y) w(y,a) (gamma qbar - q(y,a))`
    weighted_error: T,
}

fn absorbing_tail<T: Scalar>(
    mdp: &TabularMdp<T>,
    target: &Policy<T>,
    behavior: &Policy<T>,
    q: &QFunction<T>,
    params: &OperatorParams<'_, T>,
    terminal: usize,
) -> AbsorbingTail<T> {
    let gamma = mdp.discount();
    let qbar = q.expected_under(target, terminal);
    let mut trace_mass = T::zero();
    let mut traced_error = T::zero();
    let mut weighted_error = T::zero();
    for a in 0..mdp.n_actions() {
        let mu = behavior.prob(terminal, a);
        if mu == T::zero() {
            continue;
        }
        let pair = mdp.pair_index(terminal, a);
        // terminal mean reward is zero by construction
        let err = gamma * qbar - q.values[pair];
        match params {
            OperatorParams::Multistep { traces } => {
                trace_mass += mu * traces[pair];
                traced_error += mu * traces[pair] * err;
            }
            OperatorParams::Marginalized { weight_row } => {
                weighted_error += mu * weight_row[pair] * err;
            }
        }
    }
    AbsorbingTail { trace_mass, traced_error, weighted_error }
}

/// Compute one stochastic operator estimate from a sampled trajectory.
///
/// The trajectory must start at `start` and either terminate or be long
/// enough that the discount tail is negligible. The seed drives the random
/// time and any action draws needed past absorption.
pub fn estimate_operator<T: Scalar>(
    trajectory: &Trajectory<T>,
    mdp: &TabularMdp<T>,
    target: &Policy<T>,
    behavior: &Policy<T>,
    q: &QFunction<T>,
    params: OperatorParams<'_, T>,
    kind: EstimatorKind,
    start: (usize, usize),
    seed: u64,
) -> Result<EstimatorSample<T>> {
    mdp.check_start(start)?;
    if trajectory.is_empty() {
        return Err(Error::InvalidArgument("trajectory is empty".into()));
    }
    if trajectory.start() != start {
        return Err(Error::InvalidArgument(format!(
            "trajectory starts at {:?}, estimator start is {:?}",
            trajectory.start(),
            start
        )));
    }
    let expected_len = mdp.n_pairs();
    let param_len = match params {
        OperatorParams::Multistep { traces } => traces.len(),
        OperatorParams::Marginalized { weight_row } => weight_row.len(),
    };
    if param_len != expected_len {
        return Err(Error::DimensionMismatch(format!(
            "operator parameters have {param_len} entries, expected {expected_len}"
        )));
    }

    let gamma = mdp.discount();
    let na = mdp.n_actions();
    let q0 = q.values[mdp.pair_index(start.0, start.1)];
    let value = match kind {
        EstimatorKind::Trajectory => {
            let mut acc = q0;
            let mut discount = T::one();
            let mut cumulative = T::one();
            for t in 0..trajectory.len() {
                let step = &trajectory.steps[t];
                if t > 0 {
                    if let OperatorParams::Multistep { traces } = params {
                        cumulative *= traces[mdp.pair_index(step.state, step.action)];
                    }
                }
                let err = sampled_bellman_error(trajectory, t, target, q, gamma, na);
                let weight = match params {
                    OperatorParams::Multistep { .. } => cumulative,
                    OperatorParams::Marginalized { weight_row } => {
                        weight_row[mdp.pair_index(step.state, step.action)]
                    }
                };
                acc += discount * weight * err;
                discount *= gamma;
            }
            if trajectory.terminated {
                let tail = absorbing_tail(mdp, target, behavior, q, &params, trajectory.final_state);
                acc += match params {
                    OperatorParams::Multistep { .. } => {
                        let denom = T::one() - gamma * tail.trace_mass;
                        if denom <= T::from_f64(1e-12) {
                            return Err(Error::NonConvergent(
                                "absorbing-state trace mass makes the tail series diverge".into(),
                            ));
                        }
                        discount * cumulative * tail.traced_error / denom
                    }
                    OperatorParams::Marginalized { .. } => {
                        discount * tail.weighted_error / (T::one() - gamma)
                    }
                };
            }
            acc
        }
        EstimatorKind::RandomTime => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tau = draw_random_time(gamma.to_f64_lossy(), &mut rng) as usize;
            let inv_scale = T::one() / (T::one() - gamma);
            if tau < trajectory.len() {
                let mut cumulative = T::one();
                if let OperatorParams::Multistep { traces } = params {
                    for t in 1..=tau {
                        let step = &trajectory.steps[t];
                        cumulative *= traces[mdp.pair_index(step.state, step.action)];
                    }
                }
                let err = sampled_bellman_error(trajectory, tau, target, q, gamma, na);
                let step = &trajectory.steps[tau];
                let weight = match params {
                    OperatorParams::Multistep { .. } => cumulative,
                    OperatorParams::Marginalized { weight_row } => {
                        weight_row[mdp.pair_index(step.state, step.action)]
                    }
                };
                q0 + inv_scale * weight * err
            } else if trajectory.terminated {
                // extend through the absorbing self-loop with fresh actions
                let y = trajectory.final_state;
                let qbar = q.expected_under(target, y);
                let mut cumulative = T::one();
                if let OperatorParams::Multistep { traces } = params {
                    for t in 1..trajectory.len() {
                        let step = &trajectory.steps[t];
                        cumulative *= traces[mdp.pair_index(step.state, step.action)];
                    }
                }
                let mut action = behavior.sample_action(y, &mut rng);
                for _ in trajectory.len()..tau {
                    if let OperatorParams::Multistep { traces } = params {
                        cumulative *= traces[mdp.pair_index(y, action)];
                    }
                    action = behavior.sample_action(y, &mut rng);
                }
                let pair = mdp.pair_index(y, action);
                let err = gamma * qbar - q.values[pair];
                let weight = match params {
                    OperatorParams::Multistep { traces } => cumulative * traces[pair],
                    OperatorParams::Marginalized { weight_row } => weight_row[pair],
                };
                q0 + inv_scale * weight * err
            } else {
                return Err(Error::InvalidArgument(format!(
                    "random time {tau} falls beyond an unterminated trajectory of length {}",
                    trajectory.len()
                )));
            }
        }
    };
    Ok(EstimatorSample { value, start, kind, operator: params.kind() })
}

/// Tables produced by the Monte-Carlo TD-weight estimator.
///
/// `raw` tracks the discounted trace mass per pair, whose stationary point is
/// the weight-times-visitation table `d^w = w . d^mu`; `visitation` tracks
/// the same statistic with unit traces, i.e. an estimate of `d^mu`. Dividing
/// the two recovers the TD weights themselves.
#[derive(Debug, Clone)]
pub struct WeightEstimate<T> {
    pub raw: Mat<T>,
    pub visitation: Mat<T>,
    /// Number of EMA updates each row has received; untouched rows stay at
    /// their zero initialization.
    pub row_updates: Vec<u64>,
}

impl<T: Scalar> WeightEstimate<T> {
    /// Weights normalized by the internally estimated visitation.
    pub fn normalized(&self) -> Mat<T> {
        self.normalize_by(&self.visitation)
    }

    /// Weights normalized by an externally supplied (e.g. exact) visitation
    /// matrix.
    pub fn normalized_with(&self, d_mu: &Mat<T>) -> Mat<T> {
        self.normalize_by(d_mu)
    }

    fn normalize_by(&self, den: &Mat<T>) -> Mat<T> {
        let n = self.raw.n_rows();
        let mut out = Mat::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                if den[(r, c)] > T::VISITATION_TOL {
                    out[(r, c)] = self.raw[(r, c)] / den[(r, c)];
                }
            }
        }
        out
    }
}

/// Incremental Monte-Carlo TD-weight estimator.
///
/// Every pair along an observed trajectory is treated as an initial pair.
/// For initial time `t0`, the statistic credited to a later visit of `(x,a)`
/// at time `t` is `(1-gamma) gamma^{t-t0} prod_{t0 < s <= t} c(x_s, a_s)`,
/// per-pair sums are divided by raw visit counts, and the row is folded into
/// an exponential moving average with step `alpha`. A parallel channel with
/// unit traces estimates the visitation table used for normalization.
#[derive(Debug, Clone)]
pub struct WeightEstimator<T> {
    trace: Vec<T>,
    alpha: T,
    gamma: T,
    raw: Mat<T>,
    visitation: Mat<T>,
    row_updates: Vec<u64>,
    traced_sum: Vec<T>,
    discounted_sum: Vec<T>,
    visits: Vec<u32>,
}

impl<T: Scalar> WeightEstimator<T> {
    pub fn new(mdp: &TabularMdp<T>, c: &[T], alpha: T) -> Result<Self> {
        if alpha <= T::zero() || alpha > T::one() {
            return Err(Error::InvalidArgument("alpha must lie in (0, 1]".into()));
        }
        if c.len() != mdp.n_pairs() {
            return Err(Error::DimensionMismatch("trace vector length".into()));
        }
        let n = mdp.n_pairs();
        Ok(WeightEstimator {
            trace: c.to_vec(),
            alpha,
            gamma: mdp.discount(),
            raw: Mat::zeros(n, n),
            visitation: Mat::zeros(n, n),
            row_updates: vec![0u64; n],
            traced_sum: vec![T::zero(); n],
            discounted_sum: vec![T::zero(); n],
            visits: vec![0u32; n],
        })
    }

    /// Fold one trajectory into the tables, updating the row of every pair
    /// it visits.
    pub fn observe(&mut self, mdp: &TabularMdp<T>, trajectory: &Trajectory<T>) {
        let n = mdp.n_pairs();
        let one_minus = T::one() - self.gamma;
        let pairs: Vec<usize> =
            trajectory.steps.iter().map(|s| mdp.pair_index(s.state, s.action)).collect();

        for t0 in 0..pairs.len() {
            let row = pairs[t0];
            let mut touched = Vec::new();
            let mut discount = one_minus;
            let mut cumulative = T::one();
            for (offset, &pair) in pairs[t0..].iter().enumerate() {
                if offset > 0 {
                    cumulative *= self.trace[pair];
                }
                if self.visits[pair] == 0 {
                    touched.push(pair);
                }
                self.traced_sum[pair] += discount * cumulative;
                self.discounted_sum[pair] += discount;
                self.visits[pair] += 1;
                discount *= self.gamma;
            }

            // EMA toward the per-trajectory ratio, zero for unvisited pairs
            let keep = T::one() - self.alpha;
            for col in 0..n {
                self.raw[(row, col)] *= keep;
                self.visitation[(row, col)] *= keep;
            }
            for &pair in &touched {
                let count = T::from_f64(f64::from(self.visits[pair]));
                self.raw[(row, pair)] += self.alpha * self.traced_sum[pair] / count;
                self.visitation[(row, pair)] += self.alpha * self.discounted_sum[pair] / count;
                self.traced_sum[pair] = T::zero();
                self.discounted_sum[pair] = T::zero();
                self.visits[pair] = 0;
            }
            self.row_updates[row] += 1;
        }
    }

    /// One row of the visitation-normalized weight estimate.
    pub fn normalized_row(&self, pair: usize) -> Vec<T> {
        let n = self.raw.n_cols();
        (0..n)
            .map(|col| {
                let den = self.visitation[(pair, col)];
                if den > T::VISITATION_TOL {
                    self.raw[(pair, col)] / den
                } else {
                    T::zero()
                }
            })
            .collect()
    }

    pub fn row_updates(&self) -> &[u64] {
        &self.row_updates
    }

    pub fn into_estimate(self) -> WeightEstimate<T> {
        WeightEstimate { raw: self.raw, visitation: self.visitation, row_updates: self.row_updates }
    }
}

/// Batch Monte-Carlo TD-weight estimation: collect `n_iterations`
/// trajectories from `start_state` (first action drawn from the behavior
/// policy) and fold each into a [`WeightEstimator`].
pub fn tabular_weight_estimation<T: Scalar>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    c: &[T],
    start_state: usize,
    n_iterations: usize,
    alpha: T,
    seed: u64,
) -> Result<WeightEstimate<T>> {
    if n_iterations == 0 {
        return Err(Error::InvalidArgument("n_iterations must be at least 1".into()));
    }
    if start_state >= mdp.n_states() {
        return Err(Error::InvalidArgument(format!("start state {start_state} out of range")));
    }
    let mut estimator = WeightEstimator::new(mdp, c, alpha)?;
    let horizon = discount_horizon_steps(mdp.discount(), 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_iterations {
        let a0 = behavior.sample_action(start_state, &mut rng);
        let traj = rollout(mdp, behavior, (start_state, a0), horizon, true, &mut rng);
        estimator.observe(mdp, &traj);
    }
    Ok(estimator.into_estimate())
}

/// Monte-Carlo estimate of one TD-weight row as a conditional expectation:
/// the mean cumulative trace product observed on arrival at each pair at a
/// geometric random time. Simulation runs through absorbing states because
/// the random time is global, not episodic.
#[derive(Debug, Clone)]
pub struct ConditionalIsEstimate<T> {
    pub mean: Vec<T>,
    pub std_error: Vec<T>,
    pub arrivals: Vec<u64>,
}

pub fn conditional_is_oracle<T: Scalar>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    c: &[T],
    start: (usize, usize),
    n_trajectories: usize,
    seed: u64,
) -> Result<ConditionalIsEstimate<T>> {
    mdp.check_start(start)?;
    if n_trajectories == 0 {
        return Err(Error::InvalidArgument("n_trajectories must be at least 1".into()));
    }
    if c.len() != mdp.n_pairs() {
        return Err(Error::DimensionMismatch("trace vector length".into()));
    }
    let n = mdp.n_pairs();
    let gamma = mdp.discount().to_f64_lossy();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![T::zero(); n];
    let mut sum_sq = vec![T::zero(); n];
    let mut arrivals = vec![0u64; n];

    for _ in 0..n_trajectories {
        let tau = draw_random_time(gamma, &mut rng) as usize;
        let (mut state, mut action) = start;
        let mut product = T::one();
        for _ in 0..tau {
            state = crate::mdp::sample_next_state(mdp, state, action, &mut rng);
            action = behavior.sample_action(state, &mut rng);
            product *= c[mdp.pair_index(state, action)];
        }
        let pair = mdp.pair_index(state, action);
        sum[pair] += product;
        sum_sq[pair] += product * product;
        arrivals[pair] += 1;
    }

    let mut mean = vec![T::zero(); n];
    let mut std_error = vec![T::zero(); n];
    for i in 0..n {
        if arrivals[i] > 0 {
            let count = T::from_f64(arrivals[i] as f64);
            mean[i] = sum[i] / count;
            if arrivals[i] > 1 {
                let var = (sum_sq[i] / count - mean[i] * mean[i]).max(T::zero());
                std_error[i] = (var / count).sqrt();
            }
        }
    }
    Ok(ConditionalIsEstimate { mean, std_error, arrivals })
}

/// Collect a trajectory suitable for the estimators: runs to the discount
/// horizon and stops at terminal absorption (the estimators integrate the
/// absorbed tail analytically).
pub fn estimator_trajectory<T: Scalar>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    start: (usize, usize),
    seed: u64,
) -> Result<Trajectory<T>> {
    mdp.check_start(start)?;
    let horizon = discount_horizon_steps(mdp.discount(), 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rollout(mdp, behavior, start, horizon, true, &mut rng))
}
