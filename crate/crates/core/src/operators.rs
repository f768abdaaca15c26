//! Multi-step and marginalized evaluation operators.
//!
//! A multi-step operator mixes discounted Bellman errors along trajectories
//! through cumulative products of step-wise trace coefficients `c(x,a)`. Its
//! marginalized counterpart weights per-pair Bellman errors by TD weights
//! `w_{x,a}(x',a')` under the discounted visitation distribution. With
//! `trace_to_weights` the two agree exactly, and the residual of the balance
//! equation gives the operator's per-start-pair contraction rate.

use crate::error::{Error, Result};
use crate::linalg::{l1_norm, resolvent, solve_discounted, spectral_radius_estimate, Mat};
use crate::mdp::{
    joint_transition_matrix, visitation_matrix, Policy, QFunction, StateActionDist, TabularMdp,
};
use crate::scalar::Scalar;

/// Named families of Markovian step-wise trace coefficients.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceScheme<T> {
    /// Traces cut after the first step; only the immediate Bellman error
    /// survives, giving the one-step backup.
    OneStep,
    /// Full importance sampling, `c = pi/mu`.
    ImportanceSampling,
    /// `c = lambda * min(clip, pi/mu)`.
    Retrace { lambda: T, clip: T },
    /// `c = pi(a|x)`.
    TreeBackup,
    /// Constant `c = lambda`.
    QLambda(T),
    /// Arbitrary non-negative coefficients per pair. Contraction safety is
    /// the caller's concern; `apply_multistep` still checks convergence.
    Custom(Vec<T>),
}

impl<T: Scalar> TraceScheme<T> {
    pub fn validate(&self) -> Result<()> {
        match self {
            TraceScheme::Retrace { lambda, clip } => {
                if *lambda < T::zero() || *lambda > T::one() {
                    return Err(Error::InvalidArgument("retrace lambda must lie in [0, 1]".into()));
                }
                if *clip < T::zero() {
                    return Err(Error::InvalidArgument("retrace clip must be non-negative".into()));
                }
                Ok(())
            }
            TraceScheme::QLambda(lambda) => {
                if *lambda < T::zero() || *lambda > T::one() {
                    return Err(Error::InvalidArgument("q-lambda must lie in [0, 1]".into()));
                }
                Ok(())
            }
            TraceScheme::Custom(c) => match c.iter().position(|v| *v < T::zero()) {
                Some(i) => Err(Error::NegativeTrace(i)),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }
}

/// Materialize a scheme into per-pair coefficients `c(x,a)`.
///
/// Requires coverage: the behavior policy must support every action the
/// target policy can take. The importance ratio is read as zero wherever the
/// target probability is zero.
pub fn materialize_traces<T: Scalar>(
    scheme: &TraceScheme<T>,
    target: &Policy<T>,
    behavior: &Policy<T>,
) -> Result<Vec<T>> {
    scheme.validate()?;
    if target.n_states() != behavior.n_states() || target.n_actions() != behavior.n_actions() {
        return Err(Error::DimensionMismatch("target and behavior policies differ in shape".into()));
    }
    let (ns, na) = (target.n_states(), target.n_actions());
    if let TraceScheme::Custom(c) = scheme {
        if c.len() != ns * na {
            return Err(Error::DimensionMismatch(format!(
                "custom trace has {} entries, expected {}",
                c.len(),
                ns * na
            )));
        }
        return Ok(c.clone());
    }
    for x in 0..ns {
        for a in 0..na {
            if target.prob(x, a) > T::zero() && behavior.prob(x, a) == T::zero() {
                return Err(Error::CoverageViolation { state: x, action: a });
            }
        }
    }
    let ratio = |x: usize, a: usize| {
        let p = target.prob(x, a);
        if p == T::zero() {
            T::zero()
        } else {
            p / behavior.prob(x, a)
        }
    };
    let mut c = vec![T::zero(); ns * na];
    for x in 0..ns {
        for a in 0..na {
            let i = x * na + a;
            c[i] = match scheme {
                TraceScheme::OneStep => T::zero(),
                TraceScheme::ImportanceSampling => ratio(x, a),
                TraceScheme::Retrace { lambda, clip } => *lambda * clip.min(ratio(x, a)),
                TraceScheme::TreeBackup => target.prob(x, a),
                TraceScheme::QLambda(lambda) => *lambda,
                TraceScheme::Custom(_) => unreachable!(),
            };
        }
    }
    Ok(c)
}

/// Pairs where `c` exceeds the importance ratio, which voids the standard
/// contraction guarantee. Reported, not enforced.
pub fn trace_safety_violations<T: Scalar>(
    c: &[T],
    target: &Policy<T>,
    behavior: &Policy<T>,
) -> Vec<(usize, usize)> {
    let (ns, na) = (target.n_states(), target.n_actions());
    let tol = T::from_f64(1e-12);
    let mut out = Vec::new();
    for x in 0..ns {
        for a in 0..na {
            let mu = behavior.prob(x, a);
            if mu > T::zero() && c[x * na + a] > target.prob(x, a) / mu + tol {
                out.push((x, a));
            }
        }
    }
    out
}

/// TD weight matrix over state-action pairs; row `(x,a)` holds
/// `w_{x,a}(x',a')`, zero wherever the behavior visitation is zero.
#[derive(Debug, Clone)]
pub struct TdWeights<T> {
    pub matrix: Mat<T>,
}

impl<T: Scalar> TdWeights<T> {
    pub fn from_matrix(matrix: Mat<T>) -> Self {
        TdWeights { matrix }
    }

    pub fn row(&self, pair: usize) -> &[T] {
        self.matrix.row(pair)
    }
}

/// State-level TD weights used by the V-trace extension.
#[derive(Debug, Clone)]
pub struct StateTdWeights<T> {
    pub matrix: Mat<T>,
}

/// Residual of the balance equation for one start pair, and the local
/// contraction rate it induces.
#[derive(Debug, Clone)]
pub struct ResidualReport<T> {
    pub start: (usize, usize),
    /// `E = (1-gamma) delta + gamma (P^pi)^T d^w - d^w` with `d^w = w . d^mu`.
    pub residual: StateActionDist<T>,
    /// `|E|_1 / (1-gamma)`: the Lipschitz constant of the marginalized
    /// operator at this start pair in sup norm.
    pub local_rate: T,
    pub contractive: bool,
}

const POWER_ITERATIONS: usize = 200;

fn convergence_check<T: Scalar>(gamma: T, sub_matrix: &Mat<T>, what: &str) -> Result<()> {
    let n = sub_matrix.n_rows();
    let mut scaled = Mat::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            scaled[(r, c)] = gamma * sub_matrix[(r, c)];
        }
    }
    let rho = spectral_radius_estimate(&scaled, POWER_ITERATIONS);
    if rho >= T::one() - T::from_f64(1e-9) {
        return Err(Error::NonConvergent(format!(
            "spectral radius estimate {rho} of the discounted {what} matrix is not below 1"
        )));
    }
    Ok(())
}

/// Apply the multi-step operator in closed form:
/// `R^c Q = Q + (I - gamma P^{c mu})^{-1} (r + gamma P^pi Q - Q)`.
pub fn apply_multistep<T: Scalar>(
    mdp: &TabularMdp<T>,
    target: &Policy<T>,
    behavior: &Policy<T>,
    c: &[T],
    q: &QFunction<T>,
) -> Result<QFunction<T>> {
    let p_cmu = joint_transition_matrix(mdp, behavior, Some(c))?;
    convergence_check(mdp.discount(), &p_cmu, "trace-weighted behavior")?;
    let errors = crate::mdp::bellman_error_vector(mdp, target, q)?;
    let correction = solve_discounted(mdp.discount(), &p_cmu, &errors)?;
    let values = q.values.iter().zip(&correction).map(|(&v, &d)| v + d).collect();
    Ok(QFunction { values })
}

/// Apply the marginalized operator: per component,
/// `Q(x,a) + (1-gamma)^{-1} sum_{x',a'} d_{x,a}(x',a') w_{x,a}(x',a') Delta(x',a')`.
pub fn apply_marginalized<T: Scalar>(
    mdp: &TabularMdp<T>,
    target: &Policy<T>,
    behavior: &Policy<T>,
    weights: &TdWeights<T>,
    q: &QFunction<T>,
) -> Result<QFunction<T>> {
    let n = mdp.n_pairs();
    if weights.matrix.n_rows() != n || weights.matrix.n_cols() != n {
        return Err(Error::DimensionMismatch(format!(
            "weight matrix is {}x{}, expected {n}x{n}",
            weights.matrix.n_rows(),
            weights.matrix.n_cols()
        )));
    }
    let errors = crate::mdp::bellman_error_vector(mdp, target, q)?;
    let d_mu = visitation_matrix(mdp, behavior)?;
    let inv_scale = T::one() / (T::one() - mdp.discount());
    let mut values = q.values.clone();
    for pair in 0..n {
        values[pair] += inv_scale * weighted_error(d_mu.row(pair), weights.row(pair), &errors);
    }
    Ok(QFunction { values })
}

/// One component of the marginalized backup for a single weight row.
pub fn marginalized_backup_at<T: Scalar>(
    mdp: &TabularMdp<T>,
    target: &Policy<T>,
    behavior: &Policy<T>,
    w_row: &[T],
    q: &QFunction<T>,
    start: (usize, usize),
) -> Result<T> {
    mdp.check_start(start)?;
    let errors = crate::mdp::bellman_error_vector(mdp, target, q)?;
    let d = crate::mdp::discounted_visitation(mdp, behavior, start)?;
    let pair = mdp.pair_index(start.0, start.1);
    Ok(q.values[pair] + weighted_error(&d.weights, w_row, &errors) / (T::one() - mdp.discount()))
}

fn weighted_error<T: Scalar>(d_row: &[T], w_row: &[T], errors: &[T]) -> T {
    let mut acc = T::zero();
    for i in 0..d_row.len() {
        acc += d_row[i] * w_row[i] * errors[i];
    }
    acc
}

/// Convert step-wise traces into the TD weights of the equivalent
/// marginalized operator, element-wise
/// `W = (I - gamma P^{c mu})^{-1} / (I - gamma P^mu)^{-1}`,
/// with entries pinned to zero where the behavior visitation vanishes.
pub fn trace_to_weights<T: Scalar>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    c: &[T],
) -> Result<TdWeights<T>> {
    let p_cmu = joint_transition_matrix(mdp, behavior, Some(c))?;
    convergence_check(mdp.discount(), &p_cmu, "trace-weighted behavior")?;
    let num = resolvent(mdp.discount(), &p_cmu)?;
    let p_mu = joint_transition_matrix(mdp, behavior, None)?;
    let den = resolvent(mdp.discount(), &p_mu)?;
    let n = mdp.n_pairs();
    let scale = T::one() - mdp.discount();
    let mut w = Mat::zeros(n, n);
    for r in 0..n {
        for col in 0..n {
            // the denominator entry times (1-gamma) is the visitation mass
            if scale * den[(r, col)] < T::VISITATION_TOL {
                w[(r, col)] = T::zero();
            } else {
                w[(r, col)] = num[(r, col)] / den[(r, col)];
            }
        }
    }
    Ok(TdWeights { matrix: w })
}

/// Residual and local contraction rate of the marginalized operator with
/// weights `w` at one start pair.
pub fn residual_report<T: Scalar>(
    mdp: &TabularMdp<T>,
    target: &Policy<T>,
    behavior: &Policy<T>,
    weights: &TdWeights<T>,
    start: (usize, usize),
) -> Result<ResidualReport<T>> {
    mdp.check_start(start)?;
    let pair = mdp.pair_index(start.0, start.1);
    residual_report_row(mdp, target, behavior, weights.row(pair), start)
}

/// Same as [`residual_report`] for a single weight row.
pub fn residual_report_row<T: Scalar>(
    mdp: &TabularMdp<T>,
    target: &Policy<T>,
    behavior: &Policy<T>,
    w_row: &[T],
    start: (usize, usize),
) -> Result<ResidualReport<T>> {
    mdp.check_start(start)?;
    let d_mu = crate::mdp::discounted_visitation(mdp, behavior, start)?;
    let p_pi = joint_transition_matrix(mdp, target, None)?;
    let report = residual_from_parts(mdp, &p_pi, &d_mu.weights, w_row, start);
    Ok(report)
}

fn residual_from_parts<T: Scalar>(
    mdp: &TabularMdp<T>,
    p_pi: &Mat<T>,
    d_mu_row: &[T],
    w_row: &[T],
    start: (usize, usize),
) -> ResidualReport<T> {
    let n = mdp.n_pairs();
    let gamma = mdp.discount();
    let d_w: Vec<T> = (0..n).map(|i| w_row[i] * d_mu_row[i]).collect();
    let pushforward = p_pi.transpose_vec(&d_w);
    let pair = mdp.pair_index(start.0, start.1);
    let mut residual = vec![T::zero(); n];
    for i in 0..n {
        let delta = if i == pair { T::one() - gamma } else { T::zero() };
        residual[i] = delta + gamma * pushforward[i] - d_w[i];
    }
    let local_rate = l1_norm(&residual) / (T::one() - gamma);
    ResidualReport {
        start,
        residual: StateActionDist { weights: residual },
        local_rate,
        contractive: local_rate < T::one(),
    }
}

/// Max local contraction rate over all start pairs.
pub fn global_contraction_rate<T: Scalar>(
    mdp: &TabularMdp<T>,
    target: &Policy<T>,
    behavior: &Policy<T>,
    weights: &TdWeights<T>,
) -> Result<T> {
    let d_mu = visitation_matrix(mdp, behavior)?;
    let p_pi = joint_transition_matrix(mdp, target, None)?;
    let mut max_rate = T::zero();
    for pair in 0..mdp.n_pairs() {
        let start = mdp.pair_from_index(pair);
        let report = residual_from_parts(mdp, &p_pi, d_mu.row(pair), weights.row(pair), start);
        max_rate = max_rate.max(report.local_rate);
    }
    Ok(max_rate)
}

/// Which policy the trace coefficients multiply when forming the
/// sub-stochastic kernel `P^{c *}` of the residual series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceComposition {
    /// `c(x,a) * mu(a|x)`; matches the balance equation of the converted
    /// weights, so the closed form reproduces `residual_report` exactly.
    WithBehavior,
    /// `c(x,a) * pi(a|x)`.
    WithTarget,
}

/// Closed-form residual vector for the marginalized equivalent of a
/// trace-based operator:
/// `E = (1-gamma) gamma ((P^pi)^T - (P^ct)^T) (I - gamma (P^ct)^T)^{-1} delta`,
/// where `P^ct` composes the traces with the policy chosen by `composition`.
///
/// For Retrace-class traces (`0 <= c <= min(1, pi/mu)` scaled into the
/// target's support) every entry is non-negative.
pub fn retrace_residual_closed_form<T: Scalar>(
    mdp: &TabularMdp<T>,
    target: &Policy<T>,
    behavior: &Policy<T>,
    c: &[T],
    start: (usize, usize),
    composition: TraceComposition,
) -> Result<Vec<T>> {
    mdp.check_start(start)?;
    let tilde = match composition {
        TraceComposition::WithBehavior => joint_transition_matrix(mdp, behavior, Some(c))?,
        TraceComposition::WithTarget => joint_transition_matrix(mdp, target, Some(c))?,
    };
    convergence_check(mdp.discount(), &tilde, "trace-composed")?;
    let n = mdp.n_pairs();
    let gamma = mdp.discount();
    let mut delta = vec![T::zero(); n];
    delta[mdp.pair_index(start.0, start.1)] = T::one();
    // s = (I - gamma (P^ct)^T)^{-1} delta
    let s = solve_discounted(gamma, &tilde.transpose(), &delta)?;
    let p_pi = joint_transition_matrix(mdp, target, None)?;
    let push_pi = p_pi.transpose_vec(&s);
    let push_tilde = tilde.transpose_vec(&s);
    let scale = (T::one() - gamma) * gamma;
    Ok((0..n).map(|i| scale * (push_pi[i] - push_tilde[i])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::bellman_error_vector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_q(n: usize, seed: u64) -> QFunction<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        QFunction { values: (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect() }
    }

    #[test]
    fn one_step_traces_are_zero_and_is_traces_are_ratios() {
        let target = Policy::<f64>::random(3, 2, 1);
        let behavior = Policy::<f64>::random(3, 2, 2);
        let c0 = materialize_traces(&TraceScheme::OneStep, &target, &behavior).unwrap();
        assert!(c0.iter().all(|&v| v == 0.0));
        let cis = materialize_traces(&TraceScheme::ImportanceSampling, &target, &behavior).unwrap();
        for x in 0..3 {
            for a in 0..2 {
                assert!((cis[x * 2 + a] - target.prob(x, a) / behavior.prob(x, a)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn on_policy_retrace_traces_are_one() {
        let pi = Policy::<f64>::random(4, 3, 5);
        let c = materialize_traces(&TraceScheme::Retrace { lambda: 1.0, clip: 1.0 }, &pi, &pi).unwrap();
        assert!(c.iter().all(|&v| (v - 1.0).abs() < 1e-13));
    }

    #[test]
    fn q_lambda_traces_are_constant() {
        let pi = Policy::<f64>::uniform(3, 2);
        let c = materialize_traces(&TraceScheme::QLambda(0.7), &pi, &pi).unwrap();
        assert!(c.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn tree_backup_traces_equal_target_probs() {
        let target = Policy::<f64>::random(3, 3, 8);
        let behavior = Policy::<f64>::uniform(3, 3);
        let c = materialize_traces(&TraceScheme::TreeBackup, &target, &behavior).unwrap();
        for x in 0..3 {
            for a in 0..3 {
                assert_eq!(c[x * 3 + a], target.prob(x, a));
            }
        }
    }

    #[test]
    fn chain_default_retrace_traces() {
        // deterministic target on action 0, uniform behavior over 5 actions
        let target = Policy::<f64>::deterministic(2, 5, 0);
        let behavior = Policy::<f64>::uniform(2, 5);
        let c = materialize_traces(&TraceScheme::Retrace { lambda: 1.0, clip: 1.0 }, &target, &behavior)
            .unwrap();
        for x in 0..2 {
            assert!((c[x * 5] - 1.0).abs() < 1e-14);
            for a in 1..5 {
                assert_eq!(c[x * 5 + a], 0.0);
            }
        }
    }

    #[test]
    fn coverage_violation_names_offending_pair() {
        let target = Policy::<f64>::deterministic(2, 2, 1);
        let behavior = Policy::<f64>::deterministic(2, 2, 0);
        let err = materialize_traces(&TraceScheme::ImportanceSampling, &target, &behavior).unwrap_err();
        match err {
            Error::CoverageViolation { state: 0, action: 1 } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn multistep_with_zero_traces_is_one_step_backup() {
        let mdp = TabularMdp::<f64>::random(4, 2, 0.9, 10);
        let target = Policy::random(4, 2, 11);
        let behavior = Policy::random(4, 2, 12);
        let q = random_q(8, 13);
        let out = apply_multistep(&mdp, &target, &behavior, &vec![0.0; 8], &q).unwrap();
        let errors = bellman_error_vector(&mdp, &target, &q).unwrap();
        for i in 0..8 {
            assert!((out.values[i] - (q.values[i] + errors[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn multistep_fixed_point_is_exact_q() {
        let mdp = TabularMdp::<f64>::random(5, 2, 0.9, 20);
        let target = Policy::random(5, 2, 21);
        let behavior = Policy::random(5, 2, 22);
        let q_pi = crate::mdp::exact_q(&mdp, &target).unwrap();
        let c = materialize_traces(&TraceScheme::Retrace { lambda: 0.9, clip: 1.0 }, &target, &behavior)
            .unwrap();
        let out = apply_multistep(&mdp, &target, &behavior, &c, &q_pi).unwrap();
        for i in 0..10 {
            assert!((out.values[i] - q_pi.values[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn multistep_matches_truncated_series_oracle() {
        let mdp = TabularMdp::<f64>::random(6, 2, 0.85, 30);
        let target = Policy::random(6, 2, 31);
        let behavior = Policy::random(6, 2, 32);
        let c = materialize_traces(&TraceScheme::Retrace { lambda: 1.0, clip: 1.0 }, &target, &behavior)
            .unwrap();
        let q = random_q(12, 33);
        let out = apply_multistep(&mdp, &target, &behavior, &c, &q).unwrap();

        // truncated-series oracle: Q + sum_{t<=200} (gamma P^{c mu})^t Delta
        let p_cmu = joint_transition_matrix(&mdp, &behavior, Some(&c)).unwrap();
        let errors = bellman_error_vector(&mdp, &target, &q).unwrap();
        let mut total = errors.clone();
        let mut term = errors;
        for _ in 0..200 {
            let next = p_cmu.mat_vec(&term);
            for (dst, src) in term.iter_mut().zip(&next) {
                *dst = 0.85 * *src;
            }
            for (acc, t) in total.iter_mut().zip(&term) {
                *acc += *t;
            }
        }
        for i in 0..12 {
            assert!((out.values[i] - (q.values[i] + total[i])).abs() < 1e-8);
        }
    }

    #[test]
    fn non_convergent_traces_are_rejected() {
        let mdp = TabularMdp::<f64>::random(3, 2, 0.9, 40);
        let behavior = Policy::uniform(3, 2);
        let target = Policy::uniform(3, 2);
        // c = 1/gamma * 1.5 makes gamma * P^{c mu} expand
        let c = vec![1.7; 6];
        let q = QFunction::zeros(6);
        assert!(matches!(
            apply_multistep(&mdp, &target, &behavior, &c, &q),
            Err(Error::NonConvergent(_))
        ));
    }

    #[test]
    fn marginalized_with_zero_weights_is_identity() {
        let mdp = TabularMdp::<f64>::random(4, 2, 0.9, 50);
        let target = Policy::random(4, 2, 51);
        let behavior = Policy::random(4, 2, 52);
        let q = random_q(8, 53);
        let w = TdWeights::from_matrix(Mat::zeros(8, 8));
        let out = apply_marginalized(&mdp, &target, &behavior, &w, &q).unwrap();
        assert_eq!(out.values, q.values);
    }

    #[test]
    fn marginalized_is_weights_give_instant_contraction() {
        let mdp = TabularMdp::<f64>::random(5, 2, 0.9, 60);
        let target = Policy::random(5, 2, 61);
        let behavior = Policy::random(5, 2, 62);
        let c = materialize_traces(&TraceScheme::ImportanceSampling, &target, &behavior).unwrap();
        let w = trace_to_weights(&mdp, &behavior, &c).unwrap();
        let q_pi = crate::mdp::exact_q(&mdp, &target).unwrap();
        for seed in 0..3 {
            let q = random_q(10, 70 + seed);
            let out = apply_marginalized(&mdp, &target, &behavior, &w, &q).unwrap();
            for i in 0..10 {
                assert!((out.values[i] - q_pi.values[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn q_pi_is_fixed_point_for_arbitrary_weights() {
        let mdp = TabularMdp::<f64>::random(4, 3, 0.88, 80);
        let target = Policy::random(4, 3, 81);
        let behavior = Policy::random(4, 3, 82);
        let q_pi = crate::mdp::exact_q(&mdp, &target).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let mut w = Mat::zeros(12, 12);
        for r in 0..12 {
            for c in 0..12 {
                w[(r, c)] = rng.gen::<f64>() * 3.0 - 0.5;
            }
        }
        let out =
            apply_marginalized(&mdp, &target, &behavior, &TdWeights::from_matrix(w), &q_pi).unwrap();
        for i in 0..12 {
            assert!((out.values[i] - q_pi.values[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn converted_weights_make_operators_agree() {
        let mdp = TabularMdp::<f64>::random(5, 2, 0.9, 90);
        let target = Policy::random(5, 2, 91);
        let behavior = Policy::random(5, 2, 92);
        let q = random_q(10, 93);
        for scheme in [
            TraceScheme::OneStep,
            TraceScheme::ImportanceSampling,
            TraceScheme::Retrace { lambda: 1.0, clip: 1.0 },
            TraceScheme::TreeBackup,
            TraceScheme::QLambda(0.6),
        ] {
            let c = materialize_traces(&scheme, &target, &behavior).unwrap();
            let multi = apply_multistep(&mdp, &target, &behavior, &c, &q).unwrap();
            let w = trace_to_weights(&mdp, &behavior, &c).unwrap();
            let marg = apply_marginalized(&mdp, &target, &behavior, &w, &q).unwrap();
            for i in 0..10 {
                assert!((multi.values[i] - marg.values[i]).abs() < 1e-8, "{scheme:?} disagrees at {i}");
            }
        }
    }

    #[test]
    fn is_traces_convert_to_visitation_ratios() {
        let mdp = TabularMdp::<f64>::random(4, 2, 0.9, 100);
        let target = Policy::random(4, 2, 101);
        let behavior = Policy::random(4, 2, 102);
        let c = materialize_traces(&TraceScheme::ImportanceSampling, &target, &behavior).unwrap();
        let w = trace_to_weights(&mdp, &behavior, &c).unwrap();
        let d_pi = visitation_matrix(&mdp, &target).unwrap();
        let d_mu = visitation_matrix(&mdp, &behavior).unwrap();
        for r in 0..8 {
            for col in 0..8 {
                if d_mu[(r, col)] > 1e-14 {
                    assert!((w.matrix[(r, col)] - d_pi[(r, col)] / d_mu[(r, col)]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn zero_traces_convert_to_one_step_weights() {
        // single-action deterministic chain: no pair is revisited
        let n = 4;
        let mut transition = vec![0.0; n * n];
        for x in 0..n - 1 {
            transition[x * n + x + 1] = 1.0;
        }
        transition[(n - 1) * n + n - 1] = 1.0;
        let mdp =
            TabularMdp::<f64>::new(n, 1, transition, vec![0.0; n], vec![0.0; n], 0.9, &[]).unwrap();
        let policy = Policy::uniform(n, 1);
        let w = trace_to_weights(&mdp, &policy, &vec![0.0; n]).unwrap();
        let d_mu = visitation_matrix(&mdp, &policy).unwrap();
        for r in 0..n {
            for c in 0..n {
                if r == c {
                    // single nonzero entry (1-gamma)/d at the start pair
                    assert!((w.matrix[(r, c)] - 0.1 / d_mu[(r, r)]).abs() < 1e-12);
                    if r < n - 1 {
                        // never revisited, so the visitation mass is 1-gamma
                        assert!((w.matrix[(r, c)] - 1.0).abs() < 1e-12);
                    }
                } else {
                    assert_eq!(w.matrix[(r, c)], 0.0);
                }
            }
        }
    }

    #[test]
    fn residual_of_exact_is_weights_vanishes() {
        let mdp = TabularMdp::<f64>::random(4, 2, 0.9, 110);
        let target = Policy::random(4, 2, 111);
        let behavior = Policy::random(4, 2, 112);
        let c = materialize_traces(&TraceScheme::ImportanceSampling, &target, &behavior).unwrap();
        let w = trace_to_weights(&mdp, &behavior, &c).unwrap();
        for pair in 0..8 {
            let report =
                residual_report(&mdp, &target, &behavior, &w, mdp.pair_from_index(pair)).unwrap();
            assert!(report.local_rate < 1e-10);
            assert!(report.contractive);
        }
    }

    #[test]
    fn residual_rate_bounds_operator_differences() {
        let mdp = TabularMdp::<f64>::random(4, 2, 0.9, 120);
        let target = Policy::random(4, 2, 121);
        let behavior = Policy::random(4, 2, 122);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut wm = Mat::zeros(8, 8);
        for r in 0..8 {
            for c in 0..8 {
                wm[(r, c)] = rng.gen::<f64>() * 2.0;
            }
        }
        let w = TdWeights::from_matrix(wm);
        for trial in 0..100 {
            let q1 = random_q(8, 200 + trial);
            let q2 = random_q(8, 300 + trial);
            let m1 = apply_marginalized(&mdp, &target, &behavior, &w, &q1).unwrap();
            let m2 = apply_marginalized(&mdp, &target, &behavior, &w, &q2).unwrap();
            let gap = q1.values.iter().zip(&q2.values).fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs()));
            for pair in 0..8 {
                let rate = residual_report(&mdp, &target, &behavior, &w, mdp.pair_from_index(pair))
                    .unwrap()
                    .local_rate;
                let diff = (m1.values[pair] - m2.values[pair]).abs();
                assert!(diff <= rate * gap + 1e-9, "pair {pair}: {diff} > {rate} * {gap}");
            }
        }
    }

    #[test]
    fn one_step_weights_contract_at_discount_rate() {
        let mdp = TabularMdp::<f64>::random(5, 2, 0.9, 130);
        let target = Policy::random(5, 2, 131);
        let behavior = Policy::random(5, 2, 132);
        let w = trace_to_weights(&mdp, &behavior, &vec![0.0; 10]).unwrap();
        let rate = global_contraction_rate(&mdp, &target, &behavior, &w).unwrap();
        assert!((rate - 0.9).abs() < 1e-10, "one-step rate {rate}");
    }

    #[test]
    fn retrace_weights_contract_on_random_mdps() {
        for seed in 0..100 {
            let mdp = TabularMdp::<f64>::random(4, 2, 0.9, 1000 + seed);
            let target = Policy::random(4, 2, 2000 + seed);
            let behavior = Policy::random(4, 2, 3000 + seed);
            let c =
                materialize_traces(&TraceScheme::Retrace { lambda: 1.0, clip: 1.0 }, &target, &behavior)
                    .unwrap();
            let w = trace_to_weights(&mdp, &behavior, &c).unwrap();
            let rate = global_contraction_rate(&mdp, &target, &behavior, &w).unwrap();
            assert!(rate < 1.0, "seed {seed} rate {rate}");
        }
    }

    #[test]
    fn closed_form_residual_matches_residual_report() {
        let mdp = TabularMdp::<f64>::random(4, 2, 0.9, 140);
        let target = Policy::random(4, 2, 141);
        let behavior = Policy::random(4, 2, 142);
        let c = materialize_traces(&TraceScheme::Retrace { lambda: 1.0, clip: 1.0 }, &target, &behavior)
            .unwrap();
        let w = trace_to_weights(&mdp, &behavior, &c).unwrap();
        for pair in 0..8 {
            let start = mdp.pair_from_index(pair);
            let closed = retrace_residual_closed_form(
                &mdp,
                &target,
                &behavior,
                &c,
                start,
                TraceComposition::WithBehavior,
            )
            .unwrap();
            let report = residual_report(&mdp, &target, &behavior, &w, start).unwrap();
            for i in 0..8 {
                assert!((closed[i] - report.residual.weights[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn closed_form_residual_of_is_traces_telescopes_to_zero() {
        let mdp = TabularMdp::<f64>::random(4, 2, 0.9, 150);
        let target = Policy::random(4, 2, 151);
        let behavior = Policy::random(4, 2, 152);
        let c = materialize_traces(&TraceScheme::ImportanceSampling, &target, &behavior).unwrap();
        let e = retrace_residual_closed_form(
            &mdp,
            &target,
            &behavior,
            &c,
            (1, 1),
            TraceComposition::WithBehavior,
        )
        .unwrap();
        assert!(e.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn zero_trace_residual_is_discounted_target_row() {
        let mdp = TabularMdp::<f64>::random(4, 2, 0.9, 160);
        let target = Policy::random(4, 2, 161);
        let behavior = Policy::random(4, 2, 162);
        let c = vec![0.0; 8];
        let start = (2, 0);
        let e = retrace_residual_closed_form(
            &mdp,
            &target,
            &behavior,
            &c,
            start,
            TraceComposition::WithBehavior,
        )
        .unwrap();
        let w = trace_to_weights(&mdp, &behavior, &c).unwrap();
        let report = residual_report(&mdp, &target, &behavior, &w, start).unwrap();
        for i in 0..8 {
            assert!((e[i] - report.residual.weights[i]).abs() < 1e-10);
        }
        // and explicitly: (1-gamma) gamma (P^pi)^T delta
        let p_pi = joint_transition_matrix(&mdp, &target, None).unwrap();
        let pair = mdp.pair_index(start.0, start.1);
        for i in 0..8 {
            let want = 0.1 * 0.9 * p_pi[(pair, i)];
            assert!((e[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn retrace_residual_is_nonnegative() {
        for seed in 0..20 {
            let mdp = TabularMdp::<f64>::random(4, 2, 0.9, 5000 + seed);
            let target = Policy::random(4, 2, 6000 + seed);
            let behavior = Policy::random(4, 2, 7000 + seed);
            let c =
                materialize_traces(&TraceScheme::Retrace { lambda: 1.0, clip: 1.0 }, &target, &behavior)
                    .unwrap();
            for pair in 0..8 {
                let e = retrace_residual_closed_form(
                    &mdp,
                    &target,
                    &behavior,
                    &c,
                    mdp.pair_from_index(pair),
                    TraceComposition::WithBehavior,
                )
                .unwrap();
                assert!(e.iter().all(|&v| v >= -1e-10), "seed {seed} pair {pair}");
            }
        }
    }

    #[test]
    fn safety_report_flags_oversized_traces() {
        let target = Policy::<f64>::uniform(2, 2);
        let behavior = Policy::<f64>::uniform(2, 2);
        let c = vec![1.0, 1.2, 0.9, 1.0];
        let viol = trace_safety_violations(&c, &target, &behavior);
        assert_eq!(viol, vec![(0, 1)]);
    }
}
