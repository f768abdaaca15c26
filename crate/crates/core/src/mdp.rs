//! Finite-MDP primitives: transition/reward tables, policies, exact value
//! functions, discounted visitation distributions, and seeded simulation.
//!
//! State-action pairs are flattened everywhere as `x * n_actions + a`, and
//! every square matrix over pairs uses that order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{l1_norm, solve_discounted, Mat};
use crate::scalar::Scalar;

/// A finite MDP with Gaussian reward noise attached per state-action pair.
///
/// Terminal states are modeled as absorbing self-loops with zero mean reward
/// and zero noise, so infinite-horizon matrix formulas stay exact.
#[derive(Debug, Clone)]
pub struct TabularMdp<T> {
    n_states: usize,
    n_actions: usize,
    /// `p(x'|x,a)`, laid out as `[x][a][x']`.
    transition: Vec<T>,
    /// Mean reward per `(x, a)`.
    mean_reward: Vec<T>,
    /// Standard deviation of the Gaussian reward noise per `(x, a)`.
    reward_noise_std: Vec<T>,
    discount: T,
    terminal: Vec<bool>,
}

impl<T: Scalar> TabularMdp<T> {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<T>,
        mean_reward: Vec<T>,
        reward_noise_std: Vec<T>,
        discount: T,
        terminal_states: &[usize],
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidArgument("state and action counts must be positive".into()));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::DimensionMismatch(format!(
                "transition tensor has {} entries, expected {}",
                transition.len(),
                n_states * n_actions * n_states
            )));
        }
        if mean_reward.len() != n_states * n_actions || reward_noise_std.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch(
                "reward tables must have n_states * n_actions entries".into(),
            ));
        }
        if !(discount >= T::zero() && discount < T::one()) {
            return Err(Error::InvalidArgument("discount must lie in [0, 1)".into()));
        }
        let mut terminal = vec![false; n_states];
        for &s in terminal_states {
            if s >= n_states {
                return Err(Error::InvalidArgument(format!("terminal state {s} out of range")));
            }
            terminal[s] = true;
        }

        let mdp = TabularMdp {
            n_states,
            n_actions,
            transition,
            mean_reward,
            reward_noise_std,
            discount,
            terminal,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    fn validate(&self) -> Result<()> {
        if self
            .transition
            .iter()
            .chain(&self.mean_reward)
            .chain(&self.reward_noise_std)
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidArgument("transition and reward tables must be finite".into()));
        }
        for x in 0..self.n_states {
            for a in 0..self.n_actions {
                let mut sum = T::zero();
                for x2 in 0..self.n_states {
                    let p = self.prob(x, a, x2);
                    if p < T::zero() {
                        return Err(Error::InvalidDistribution(format!(
                            "negative transition probability at ({x}, {a}, {x2})"
                        )));
                    }
                    sum += p;
                }
                if (sum - T::one()).abs() > T::STOCHASTIC_TOL {
                    return Err(Error::InvalidDistribution(format!(
                        "transition row ({x}, {a}) sums to {sum}, expected 1"
                    )));
                }
                if self.reward_noise_std[self.pair_index(x, a)] < T::zero() {
                    return Err(Error::InvalidDistribution(format!(
                        "negative reward noise std at ({x}, {a})"
                    )));
                }
            }
            if self.terminal[x] {
                for a in 0..self.n_actions {
                    if (self.prob(x, a, x) - T::one()).abs() > T::STOCHASTIC_TOL {
                        return Err(Error::InvalidDistribution(format!(
                            "terminal state {x} must self-loop with probability 1"
                        )));
                    }
                    let pair = self.pair_index(x, a);
                    if self.mean_reward[pair].abs() > T::STOCHASTIC_TOL
                        || self.reward_noise_std[pair] > T::STOCHASTIC_TOL
                    {
                        return Err(Error::InvalidDistribution(format!(
                            "terminal state {x} must have identically zero reward"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Number of state-action pairs; the side length of every pair matrix.
    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn discount(&self) -> T {
        self.discount
    }

    pub fn pair_index(&self, state: usize, action: usize) -> usize {
        debug_assert!(state < self.n_states && action < self.n_actions);
        state * self.n_actions + action
    }

    pub fn pair_from_index(&self, index: usize) -> (usize, usize) {
        (index / self.n_actions, index % self.n_actions)
    }

    pub fn prob(&self, state: usize, action: usize, next: usize) -> T {
        self.transition[(state * self.n_actions + action) * self.n_states + next]
    }

    pub fn mean_reward(&self, state: usize, action: usize) -> T {
        self.mean_reward[self.pair_index(state, action)]
    }

    /// Mean rewards flattened over pairs.
    pub fn reward_vector(&self) -> &[T] {
        &self.mean_reward
    }

    pub fn reward_noise_std(&self, state: usize, action: usize) -> T {
        self.reward_noise_std[self.pair_index(state, action)]
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        self.terminal[state]
    }

    pub fn terminal_states(&self) -> Vec<usize> {
        (0..self.n_states).filter(|&s| self.terminal[s]).collect()
    }

    pub fn check_start(&self, start: (usize, usize)) -> Result<()> {
        if start.0 >= self.n_states || start.1 >= self.n_actions {
            return Err(Error::InvalidArgument(format!(
                "start pair ({}, {}) out of range for {}x{} MDP",
                start.0, start.1, self.n_states, self.n_actions
            )));
        }
        Ok(())
    }

    /// A dense random MDP, useful for randomized tests and self checks.
    /// Transition rows are drawn from a uniform simplex, rewards from U[0, 1].
    pub fn random(n_states: usize, n_actions: usize, discount: T, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut transition = vec![T::zero(); n_states * n_actions * n_states];
        for row in transition.chunks_mut(n_states) {
            let mut sum = T::zero();
            for p in row.iter_mut() {
                *p = T::sample_uniform(&mut rng) + T::from_f64(1e-3);
                sum += *p;
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
        let mean_reward: Vec<T> =
            (0..n_states * n_actions).map(|_| T::sample_uniform(&mut rng)).collect();
        let reward_noise_std = vec![T::zero(); n_states * n_actions];
        TabularMdp::new(n_states, n_actions, transition, mean_reward, reward_noise_std, discount, &[])
            .expect("random MDP construction")
    }

    /// A random MDP with deterministic transitions and rewards.
    pub fn random_deterministic(n_states: usize, n_actions: usize, discount: T, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut transition = vec![T::zero(); n_states * n_actions * n_states];
        for row in transition.chunks_mut(n_states) {
            let next = rng.gen_range(0..n_states);
            row[next] = T::one();
        }
        let mean_reward: Vec<T> =
            (0..n_states * n_actions).map(|_| T::sample_uniform(&mut rng)).collect();
        let reward_noise_std = vec![T::zero(); n_states * n_actions];
        TabularMdp::new(n_states, n_actions, transition, mean_reward, reward_noise_std, discount, &[])
            .expect("random deterministic MDP construction")
    }
}

/// Row-stochastic state → action distribution table.
#[derive(Debug, Clone)]
pub struct Policy<T> {
    n_states: usize,
    n_actions: usize,
    probs: Vec<T>,
}

impl<T: Scalar> Policy<T> {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<T>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch(
                "policy table must have n_states * n_actions entries".into(),
            ));
        }
        for x in 0..n_states {
            let row = &probs[x * n_actions..(x + 1) * n_actions];
            if row.iter().any(|&p| !p.is_finite() || p < T::zero()) {
                return Err(Error::InvalidDistribution(format!(
                    "action probabilities at state {x} must be finite and non-negative"
                )));
            }
            let sum: T = row.iter().copied().sum();
            if !((sum - T::one()).abs() <= T::STOCHASTIC_TOL) {
                return Err(Error::InvalidDistribution(format!(
                    "policy row {x} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Policy { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = T::one() / T::from_f64(n_actions as f64);
        Policy { n_states, n_actions, probs: vec![p; n_states * n_actions] }
    }

    /// Deterministic policy selecting `action` everywhere.
    pub fn deterministic(n_states: usize, n_actions: usize, action: usize) -> Self {
        assert!(action < n_actions);
        let mut probs = vec![T::zero(); n_states * n_actions];
        for x in 0..n_states {
            probs[x * n_actions + action] = T::one();
        }
        Policy { n_states, n_actions, probs }
    }

    /// Convex mixture `beta * self + (1 - beta) * other`.
    pub fn mix(&self, other: &Policy<T>, beta: T) -> Result<Policy<T>> {
        if self.n_states != other.n_states || self.n_actions != other.n_actions {
            return Err(Error::DimensionMismatch("policy mixture shapes differ".into()));
        }
        let probs = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(&a, &b)| beta * a + (T::one() - beta) * b)
            .collect();
        Policy::new(self.n_states, self.n_actions, probs)
    }

    /// Random row-stochastic policy with full support.
    pub fn random(n_states: usize, n_actions: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probs = vec![T::zero(); n_states * n_actions];
        for row in probs.chunks_mut(n_actions) {
            let mut sum = T::zero();
            for p in row.iter_mut() {
                *p = T::sample_uniform(&mut rng) + T::from_f64(0.05);
                sum += *p;
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
        Policy { n_states, n_actions, probs }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, state: usize, action: usize) -> T {
        self.probs[state * self.n_actions + action]
    }

    pub fn row(&self, state: usize) -> &[T] {
        &self.probs[state * self.n_actions..(state + 1) * self.n_actions]
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        let u = T::sample_uniform(rng);
        let mut acc = T::zero();
        for a in 0..self.n_actions {
            acc += self.prob(state, a);
            if u < acc {
                return a;
            }
        }
        self.n_actions - 1
    }

    fn check_shape(&self, mdp: &TabularMdp<T>) -> Result<()> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(Error::DimensionMismatch(format!(
                "policy is {}x{}, MDP is {}x{}",
                self.n_states,
                self.n_actions,
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }
}

/// Action-value table flattened over state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct QFunction<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> QFunction<T> {
    pub fn zeros(n_pairs: usize) -> Self {
        QFunction { values: vec![T::zero(); n_pairs] }
    }

    pub fn from_values(values: Vec<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("Q-function entries must be finite".into()));
        }
        Ok(QFunction { values })
    }

    pub fn get(&self, mdp: &TabularMdp<T>, state: usize, action: usize) -> T {
        self.values[mdp.pair_index(state, action)]
    }

    /// `E_{a ~ policy(.|x)} Q(x, a)`.
    pub fn expected_under(&self, policy: &Policy<T>, state: usize) -> T {
        let na = policy.n_actions();
        let mut acc = T::zero();
        for a in 0..na {
            acc += policy.prob(state, a) * self.values[state * na + a];
        }
        acc
    }

    /// State values `V(x) = sum_a policy(a|x) Q(x, a)`.
    pub fn to_state_values(&self, policy: &Policy<T>) -> ValueFunction<T> {
        let values = (0..policy.n_states()).map(|x| self.expected_under(policy, x)).collect();
        ValueFunction { values }
    }
}

/// State-value table.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> ValueFunction<T> {
    pub fn zeros(n_states: usize) -> Self {
        ValueFunction { values: vec![T::zero(); n_states] }
    }
}

/// Vector over state-action pairs; may be a sub-distribution or signed
/// depending on use (visitation distributions, residual vectors).
#[derive(Debug, Clone, PartialEq)]
pub struct StateActionDist<T> {
    pub weights: Vec<T>,
}

impl<T: Scalar> StateActionDist<T> {
    pub fn l1_norm(&self) -> T {
        l1_norm(&self.weights)
    }

    pub fn total(&self) -> T {
        self.weights.iter().copied().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryStep<T> {
    pub state: usize,
    pub action: usize,
    pub reward: T,
}

/// A sampled trajectory. `final_state` is the state entered after the last
/// recorded step, which Bellman-error samples at the last step need.
#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    pub steps: Vec<TrajectoryStep<T>>,
    pub final_state: usize,
    /// True when `final_state` is terminal.
    pub terminated: bool,
}

impl<T: Scalar> Trajectory<T> {
    pub fn start(&self) -> (usize, usize) {
        let s = &self.steps[0];
        (s.state, s.action)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// State observed after step `t`.
    pub fn next_state(&self, t: usize) -> usize {
        if t + 1 < self.steps.len() {
            self.steps[t + 1].state
        } else {
            self.final_state
        }
    }
}

/// Joint transition matrix over state-action pairs with an optional trace
/// re-weighting: entry `(x,a; x',a') = p(x'|x,a) * policy(a'|x') * c(x',a')`.
///
/// With `c` omitted this is the row-stochastic matrix of the policy chain;
/// with `c <= pi/mu` it is the sub-stochastic matrix driving multi-step
/// operators.
pub fn joint_transition_matrix<T: Scalar>(
    mdp: &TabularMdp<T>,
    policy: &Policy<T>,
    trace: Option<&[T]>,
) -> Result<Mat<T>> {
    policy.check_shape(mdp)?;
    let n = mdp.n_pairs();
    if let Some(c) = trace {
        if c.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "trace vector has {} entries, expected {n}",
                c.len()
            )));
        }
        if let Some(i) = c.iter().position(|&v| v < T::zero()) {
            return Err(Error::NegativeTrace(i));
        }
    }
    let mut m = Mat::zeros(n, n);
    for x in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let row = mdp.pair_index(x, a);
            for x2 in 0..mdp.n_states() {
                let p = mdp.prob(x, a, x2);
                if p == T::zero() {
                    continue;
                }
                for a2 in 0..mdp.n_actions() {
                    let col = mdp.pair_index(x2, a2);
                    let scale = trace.map_or(T::one(), |c| c[col]);
                    m[(row, col)] = p * policy.prob(x2, a2) * scale;
                }
            }
        }
    }
    Ok(m)
}

/// Exact `Q^pi`, solved from the one-step Bellman fixed point
/// `(I - gamma P^pi) Q = r`.
pub fn exact_q<T: Scalar>(mdp: &TabularMdp<T>, target: &Policy<T>) -> Result<QFunction<T>> {
    let p = joint_transition_matrix(mdp, target, None)?;
    let values = solve_discounted(mdp.discount(), &p, mdp.reward_vector())?;
    Ok(QFunction { values })
}

/// Discounted visitation distribution from a start pair:
/// `d(x',a') = (1 - gamma) * sum_t gamma^t P(x_t = x', a_t = a')`.
pub fn discounted_visitation<T: Scalar>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    start: (usize, usize),
) -> Result<StateActionDist<T>> {
    mdp.check_start(start)?;
    let p = joint_transition_matrix(mdp, behavior, None)?;
    let n = mdp.n_pairs();
    let mut rhs = vec![T::zero(); n];
    rhs[mdp.pair_index(start.0, start.1)] = T::one() - mdp.discount();
    // Balance equation: d = (1-gamma) delta + gamma P^T d.
    let weights = solve_discounted(mdp.discount(), &p.transpose(), &rhs)?;
    Ok(StateActionDist { weights })
}

/// All discounted visitation distributions at once: row `(x,a)` holds
/// `d_{x,a}` under the given policy. Equals `(1-gamma)(I - gamma P)^{-1}`.
pub fn visitation_matrix<T: Scalar>(mdp: &TabularMdp<T>, policy: &Policy<T>) -> Result<Mat<T>> {
    let p = joint_transition_matrix(mdp, policy, None)?;
    let res = crate::linalg::resolvent(mdp.discount(), &p)?;
    let n = mdp.n_pairs();
    let scale = T::one() - mdp.discount();
    let mut out = Mat::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            out[(r, c)] = scale * res[(r, c)];
        }
    }
    Ok(out)
}

/// Per-pair Bellman errors `r(x,a) + gamma E_{x'}[Q(x', pi(x'))] - Q(x,a)`.
pub fn bellman_error_vector<T: Scalar>(
    mdp: &TabularMdp<T>,
    target: &Policy<T>,
    q: &QFunction<T>,
) -> Result<Vec<T>> {
    target.check_shape(mdp)?;
    if q.values.len() != mdp.n_pairs() {
        return Err(Error::DimensionMismatch(format!(
            "Q-function has {} entries, expected {}",
            q.values.len(),
            mdp.n_pairs()
        )));
    }
    let p = joint_transition_matrix(mdp, target, None)?;
    let pq = p.mat_vec(&q.values);
    let gamma = mdp.discount();
    Ok((0..mdp.n_pairs()).map(|i| mdp.reward_vector()[i] + gamma * pq[i] - q.values[i]).collect())
}

/// Simulate under the behavior policy from a fixed start pair. Stops on
/// entering a terminal state or after `max_steps` transitions; rewards are
/// `mean + std * N(0,1)`. Deterministic given the seed.
pub fn sample_trajectory<T: Scalar>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    start: (usize, usize),
    max_steps: usize,
    seed: u64,
) -> Result<Trajectory<T>> {
    if max_steps == 0 {
        return Err(Error::InvalidArgument("max_steps must be at least 1".into()));
    }
    mdp.check_start(start)?;
    behavior.check_shape(mdp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rollout(mdp, behavior, start, max_steps, true, &mut rng))
}

/// Like [`sample_trajectory`] but keeps simulating through absorbing
/// states for exactly `max_steps` transitions. Stochastic estimators built
/// on global (rather than episodic) time need this form.
pub fn rollout_through_absorption<T: Scalar>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    start: (usize, usize),
    max_steps: usize,
    seed: u64,
) -> Result<Trajectory<T>> {
    if max_steps == 0 {
        return Err(Error::InvalidArgument("max_steps must be at least 1".into()));
    }
    mdp.check_start(start)?;
    behavior.check_shape(mdp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rollout(mdp, behavior, start, max_steps, false, &mut rng))
}

/// Simulation core shared with the estimators. When `stop_at_terminal` is
/// false, the absorbing self-loop is simulated like any other transition.
pub(crate) fn rollout<T: Scalar, R: Rng + ?Sized>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    start: (usize, usize),
    max_steps: usize,
    stop_at_terminal: bool,
    rng: &mut R,
) -> Trajectory<T> {
    let mut steps = Vec::new();
    let (mut state, mut action) = start;
    for _ in 0..max_steps {
        let noise = T::sample_standard_normal(rng);
        let reward = mdp.mean_reward(state, action) + mdp.reward_noise_std(state, action) * noise;
        steps.push(TrajectoryStep { state, action, reward });
        let next = sample_next_state(mdp, state, action, rng);
        if stop_at_terminal && mdp.is_terminal(next) {
            return Trajectory { steps, final_state: next, terminated: true };
        }
        state = next;
        action = behavior.sample_action(state, rng);
    }
    let terminated = mdp.is_terminal(state);
    Trajectory { steps, final_state: state, terminated }
}

pub(crate) fn sample_next_state<T: Scalar, R: Rng + ?Sized>(
    mdp: &TabularMdp<T>,
    state: usize,
    action: usize,
    rng: &mut R,
) -> usize {
    let u = T::sample_uniform(rng);
    let mut acc = T::zero();
    for next in 0..mdp.n_states() {
        acc += mdp.prob(state, action, next);
        if u < acc {
            return next;
        }
    }
    mdp.n_states() - 1
}

/// Steps until `gamma^t` drops below `tail`, capped for safety.
pub fn discount_horizon_steps<T: Scalar>(gamma: T, tail: f64) -> usize {
    let g = gamma.to_f64_lossy();
    if g <= 0.0 {
        return 1;
    }
    let steps = (tail.ln() / g.ln()).ceil();
    (steps.max(1.0) as usize).min(100_000)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two states, one action, deterministic cycle.
    fn cycle_mdp(gamma: f64) -> (TabularMdp<f64>, Policy<f64>) {
        let transition = vec![
            0.0, 1.0, // x0 -> x1
            1.0, 0.0, // x1 -> x0
        ];
        let mdp = TabularMdp::new(2, 1, transition, vec![0.0, 0.0], vec![0.0, 0.0], gamma, &[]).unwrap();
        let policy = Policy::uniform(2, 1);
        (mdp, policy)
    }

    fn absorbing_unit_reward(gamma: f64) -> (TabularMdp<f64>, Policy<f64>) {
        let mdp = TabularMdp::new(1, 1, vec![1.0], vec![1.0], vec![0.0], gamma, &[]).unwrap();
        (mdp, Policy::uniform(1, 1))
    }

    #[test]
    fn joint_matrix_of_cycle_is_permutation() {
        let (mdp, policy) = cycle_mdp(0.9);
        let m = joint_transition_matrix(&mdp, &policy, None).unwrap();
        assert_eq!(m[(0, 0)], 0.0);
        assert_eq!(m[(0, 1)], 1.0);
        assert_eq!(m[(1, 0)], 1.0);
        assert_eq!(m[(1, 1)], 0.0);
    }

    #[test]
    fn joint_matrix_zero_trace_is_zero() {
        let mdp = TabularMdp::<f64>::random(4, 3, 0.9, 7);
        let policy = Policy::random(4, 3, 8);
        let m = joint_transition_matrix(&mdp, &policy, Some(&vec![0.0; 12])).unwrap();
        assert_eq!(m.max_abs(), 0.0);
    }

    #[test]
    fn joint_matrix_rows_are_stochastic() {
        let mdp = TabularMdp::<f64>::random(4, 3, 0.9, 11);
        let policy = Policy::uniform(4, 3);
        let m = joint_transition_matrix(&mdp, &policy, None).unwrap();
        for r in 0..12 {
            let sum: f64 = m.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
        }
    }

    #[test]
    fn joint_matrix_rejects_negative_trace() {
        let mdp = TabularMdp::<f64>::random(2, 2, 0.9, 1);
        let policy = Policy::uniform(2, 2);
        let c = vec![0.5, -0.1, 0.5, 0.5];
        assert!(matches!(
            joint_transition_matrix(&mdp, &policy, Some(&c)),
            Err(Error::NegativeTrace(1))
        ));
    }

    #[test]
    fn exact_q_geometric_series() {
        let (mdp, policy) = absorbing_unit_reward(0.9);
        let q = exact_q(&mdp, &policy).unwrap();
        assert!((q.values[0] - 10.0).abs() < 1e-10);
    }

    #[test]
    fn exact_q_zero_rewards() {
        let mdp = TabularMdp::new(
            3,
            2,
            TabularMdp::<f64>::random(3, 2, 0.9, 3).transition,
            vec![0.0; 6],
            vec![0.0; 6],
            0.9,
            &[],
        )
        .unwrap();
        let q = exact_q(&mdp, &Policy::uniform(3, 2)).unwrap();
        assert!(q.values.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn exact_q_satisfies_bellman_fixed_point() {
        let mdp = TabularMdp::<f64>::random(5, 3, 0.85, 42);
        let policy = Policy::random(5, 3, 43);
        let q = exact_q(&mdp, &policy).unwrap();
        let errs = bellman_error_vector(&mdp, &policy, &q).unwrap();
        assert!(errs.iter().all(|e| e.abs() < 1e-10));
    }

    #[test]
    fn bellman_errors_of_zero_q_equal_rewards() {
        let mdp = TabularMdp::<f64>::random(4, 2, 0.9, 5);
        let policy = Policy::random(4, 2, 6);
        let errs = bellman_error_vector(&mdp, &policy, &QFunction::zeros(8)).unwrap();
        for (e, r) in errs.iter().zip(mdp.reward_vector()) {
            assert!((e - r).abs() < 1e-14);
        }
    }

    #[test]
    fn bellman_errors_match_direct_summation() {
        let mdp = TabularMdp::<f64>::random(5, 2, 0.8, 17);
        let policy = Policy::random(5, 2, 18);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let q =
            QFunction::from_values((0..10).map(|_| f64::sample_uniform(&mut rng) * 4.0 - 2.0).collect())
                .unwrap();
        let errs = bellman_error_vector(&mdp, &policy, &q).unwrap();
        // direct-summation oracle
        for x in 0..5 {
            for a in 0..2 {
                let mut exp = 0.0;
                for x2 in 0..5 {
                    for a2 in 0..2 {
                        exp += mdp.prob(x, a, x2) * policy.prob(x2, a2) * q.values[x2 * 2 + a2];
                    }
                }
                let want = mdp.mean_reward(x, a) + 0.8 * exp - q.values[x * 2 + a];
                assert!((errs[x * 2 + a] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn visitation_of_absorbing_state_is_point_mass() {
        let (mdp, policy) = absorbing_unit_reward(0.9);
        let d = discounted_visitation(&mdp, &policy, (0, 0)).unwrap();
        assert!((d.weights[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn visitation_of_cycle_alternates_geometrically() {
        let (mdp, policy) = cycle_mdp(0.8);
        let d = discounted_visitation(&mdp, &policy, (0, 0)).unwrap();
        // mass on the start pair is (1-gamma) * sum_k gamma^{2k} = 1/(1+gamma)
        assert!((d.weights[0] - 1.0 / 1.8).abs() < 1e-12);
        assert!((d.weights[1] - 0.8 / 1.8).abs() < 1e-12);
    }

    #[test]
    fn visitation_is_distribution_and_balanced() {
        let mdp = TabularMdp::<f64>::random(6, 3, 0.92, 23);
        let policy = Policy::random(6, 3, 24);
        let p_t = joint_transition_matrix(&mdp, &policy, None).unwrap().transpose();
        for pair in 0..mdp.n_pairs() {
            let start = mdp.pair_from_index(pair);
            let d = discounted_visitation(&mdp, &policy, start).unwrap();
            assert!(d.weights.iter().all(|&w| w >= -1e-14));
            assert!((d.total() - 1.0).abs() < 1e-10);
            // (1-gamma) delta + gamma P^T d - d = 0
            let pd = p_t.mat_vec(&d.weights);
            let mut residual = 0.0;
            for i in 0..mdp.n_pairs() {
                let delta = if i == pair { 0.08 } else { 0.0 };
                residual += (delta + 0.92 * pd[i] - d.weights[i]).abs();
            }
            assert!(residual < 1e-10, "balance residual {residual}");
        }
    }

    #[test]
    fn visitation_rejects_bad_start() {
        let mdp = TabularMdp::<f64>::random(3, 2, 0.9, 2);
        assert!(discounted_visitation(&mdp, &Policy::uniform(3, 2), (3, 0)).is_err());
    }

    #[test]
    fn visitation_matrix_rows_match_single_starts() {
        let mdp = TabularMdp::<f64>::random(4, 2, 0.9, 31);
        let policy = Policy::random(4, 2, 32);
        let m = visitation_matrix(&mdp, &policy).unwrap();
        for pair in 0..8 {
            let d = discounted_visitation(&mdp, &policy, mdp.pair_from_index(pair)).unwrap();
            for c in 0..8 {
                assert!((m[(pair, c)] - d.weights[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trajectory_deterministic_chain_visits_in_order() {
        // 4-state left-to-right chain ending in a terminal.
        let n = 4;
        let mut transition = vec![0.0; n * n];
        for x in 0..n - 1 {
            transition[x * n + x + 1] = 1.0;
        }
        transition[(n - 1) * n + n - 1] = 1.0;
        let mdp = TabularMdp::new(n, 1, transition, vec![0.0; n], vec![0.0; n], 0.9, &[n - 1]).unwrap();
        let policy = Policy::uniform(n, 1);
        let traj = sample_trajectory(&mdp, &policy, (0, 0), 50, 123).unwrap();
        let visited: Vec<usize> = traj.steps.iter().map(|s| s.state).collect();
        assert_eq!(visited, vec![0, 1, 2]);
        assert!(traj.terminated);
        assert_eq!(traj.final_state, 3);
    }

    #[test]
    fn trajectory_rewards_exact_when_noise_free() {
        let mdp = TabularMdp::<f64>::random(4, 2, 0.9, 77);
        let policy = Policy::uniform(4, 2);
        let traj = sample_trajectory(&mdp, &policy, (1, 0), 20, 9).unwrap();
        for s in &traj.steps {
            assert_eq!(s.reward, mdp.mean_reward(s.state, s.action));
        }
    }

    #[test]
    fn trajectory_same_seed_is_identical() {
        let mdp = TabularMdp::<f64>::random(5, 3, 0.9, 99);
        let policy = Policy::random(5, 3, 100);
        let a = sample_trajectory(&mdp, &policy, (2, 1), 40, 555).unwrap();
        let b = sample_trajectory(&mdp, &policy, (2, 1), 40, 555).unwrap();
        assert_eq!(a.steps.len(), b.steps.len());
        for (x, y) in a.steps.iter().zip(&b.steps) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn single_precision_instantiation_works() {
        let mdp = TabularMdp::<f32>::random(4, 2, 0.9, 71);
        let policy = Policy::<f32>::random(4, 2, 72);
        let q = exact_q(&mdp, &policy).unwrap();
        let errs = bellman_error_vector(&mdp, &policy, &q).unwrap();
        assert!(errs.iter().all(|e| e.abs() < 1e-4));
        let d = discounted_visitation(&mdp, &policy, (0, 0)).unwrap();
        assert!((d.total() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn terminal_states_must_be_absorbing() {
        let transition = vec![0.0, 1.0, 1.0, 0.0];
        let res = TabularMdp::new(2, 1, transition, vec![0.0, 0.0], vec![0.0, 0.0], 0.9, &[1]);
        assert!(res.is_err());
    }
}
