//! Saddle-point machinery for TD-weight estimation: the bilinear critic
//! loss whose minimax solution recovers the converted weights, a closed-form
//! box-critic bound on the local contraction rate, probe scoring functions
//! that pin single weight entries, gradient descent-ascent solvers, and the
//! Fenchel-dual objective.

use crate::error::{Error, Result};
use crate::linalg::{l1_norm, solve_discounted, Mat};
use crate::mdp::{discounted_visitation, joint_transition_matrix, Policy, TabularMdp};
use crate::scalar::Scalar;

/// Critic (scoring function) over state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringFunction<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> ScoringFunction<T> {
    pub fn zeros(n: usize) -> Self {
        ScoringFunction { values: vec![T::zero(); n] }
    }

    /// Project onto the box `[-1, 1]` used by the contraction-rate critic
    /// class.
    pub fn clamp_to_box(&mut self) {
        for v in &mut self.values {
            *v = v.min(T::one()).max(-T::one());
        }
    }
}

/// State of the weight/critic saddle-point iteration for one start pair.
#[derive(Debug, Clone)]
pub struct SaddleState<T> {
    pub w: Vec<T>,
    pub q: ScoringFunction<T>,
    pub step: usize,
    /// Loss at the current critic.
    pub loss: T,
    /// Loss maximized over the box critic class, scaled to a contraction
    /// rate; this is the convergence figure of merit.
    pub qb_bound: T,
}

/// The kernel `p(x'|x,a) * mu(a'|x') * c(x',a')` together with the start
/// visitation; shared by every routine in this module.
struct LossParts<T> {
    /// Sub-stochastic pair kernel under the trace-composed behavior policy.
    kernel: Mat<T>,
    /// `d^mu` row of the start pair.
    d_mu: Vec<T>,
    start_pair: usize,
}

fn loss_parts<T: Scalar>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    c: &[T],
    start: (usize, usize),
) -> Result<LossParts<T>> {
    mdp.check_start(start)?;
    if c.len() != mdp.n_pairs() {
        return Err(Error::DimensionMismatch("trace vector length".into()));
    }
    let kernel = joint_transition_matrix(mdp, behavior, Some(c))?;
    let d_mu = discounted_visitation(mdp, behavior, start)?.weights;
    Ok(LossParts { kernel, d_mu, start_pair: mdp.pair_index(start.0, start.1) })
}

/// Residual of the trace-composed balance equation for a candidate weight
/// row: `(1-gamma) delta + gamma (P^{c mu})^T (w . d^mu) - (w . d^mu)`.
fn balance_residual<T: Scalar>(parts: &LossParts<T>, gamma: T, w_row: &[T]) -> Vec<T> {
    let n = parts.d_mu.len();
    let d_psi: Vec<T> = (0..n).map(|i| w_row[i] * parts.d_mu[i]).collect();
    residual_of_mass(parts, gamma, &d_psi)
}

/// The critic loss `L(q, w) = q^T [(1-gamma) delta + gamma (P^{c mu})^T d_psi - d_psi]`
/// with `d_psi = w . d^mu`. It vanishes for every critic exactly when `w` is
/// the converted weight row of the traces.
pub fn saddle_loss<T: Scalar>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    c: &[T],
    w_row: &[T],
    q: &ScoringFunction<T>,
    start: (usize, usize),
) -> Result<T> {
    let parts = loss_parts(mdp, behavior, c, start)?;
    if w_row.len() != parts.d_mu.len() || q.values.len() != parts.d_mu.len() {
        return Err(Error::DimensionMismatch("weight row or critic length".into()));
    }
    let residual = balance_residual(&parts, mdp.discount(), w_row);
    Ok(q.values.iter().zip(&residual).map(|(&qi, &ri)| qi * ri).sum())
}

/// Loss maximized in closed form over the box critic class `[-1,1]^n`
/// (attained at the sign of the residual), scaled by `(1-gamma)^{-1}`.
///
/// The traces are fixed to the importance ratios `pi/mu`, for which this
/// equals the local contraction rate of the marginalized operator exactly.
pub fn contraction_bound_via_qb<T: Scalar>(
    mdp: &TabularMdp<T>,
    target: &Policy<T>,
    behavior: &Policy<T>,
    w_row: &[T],
    start: (usize, usize),
) -> Result<T> {
    let c = crate::operators::materialize_traces(
        &crate::operators::TraceScheme::ImportanceSampling,
        target,
        behavior,
    )?;
    qb_maximized_rate(mdp, behavior, &c, w_row, start)
}

/// As [`contraction_bound_via_qb`] for arbitrary trace coefficients: the
/// L1 residual of the trace-composed balance equation over `1 - gamma`.
pub fn qb_maximized_rate<T: Scalar>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    c: &[T],
    w_row: &[T],
    start: (usize, usize),
) -> Result<T> {
    let parts = loss_parts(mdp, behavior, c, start)?;
    let residual = balance_residual(&parts, mdp.discount(), w_row);
    Ok(l1_norm(&residual) / (T::one() - mdp.discount()))
}

/// The box critic maximizing the loss: the element-wise sign of the
/// balance residual.
pub fn qb_maximizer<T: Scalar>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    c: &[T],
    w_row: &[T],
    start: (usize, usize),
) -> Result<ScoringFunction<T>> {
    let parts = loss_parts(mdp, behavior, c, start)?;
    let residual = balance_residual(&parts, mdp.discount(), w_row);
    let values = residual
        .iter()
        .map(|&r| {
            if r > T::zero() {
                T::one()
            } else if r < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(ScoringFunction { values })
}

/// Probe scoring function for one target pair: the corresponding column of
/// `(I - gamma P^{c mu})^{-1}`. Plugging `+-q` into the loss isolates the
/// weight error at exactly that pair, scaled by its visitation mass.
pub fn probe_scoring<T: Scalar>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    c: &[T],
    probe: (usize, usize),
) -> Result<ScoringFunction<T>> {
    mdp.check_start(probe)?;
    if c.len() != mdp.n_pairs() {
        return Err(Error::DimensionMismatch("trace vector length".into()));
    }
    let kernel = joint_transition_matrix(mdp, behavior, Some(c))?;
    let mut rhs = vec![T::zero(); mdp.n_pairs()];
    rhs[mdp.pair_index(probe.0, probe.1)] = T::one();
    let values = solve_discounted(mdp.discount(), &kernel, &rhs)?;
    Ok(ScoringFunction { values })
}

const DIVERGENCE_GUARD: f64 = 1e3;

/// Estimate one TD-weight row by alternating exact-gradient descent on the
/// weights and projected ascent on a box-constrained critic.
///
/// The weight row is parameterized through its visitation-weighted form
/// `d = w . d^mu` (projected onto the visitation support), which conditions
/// the descent uniformly across pairs. The loss is bilinear, so a saturated
/// critic turns the weight step into a subgradient step on the L1 balance
/// residual; because subgradient descent is not monotone, the iterate with
/// the smallest box-critic bound is the one returned.
pub fn gda_estimate_weights<T: Scalar>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    c: &[T],
    start: (usize, usize),
    initial_w: Option<&[T]>,
    lr_w: T,
    lr_q: T,
    n_steps: usize,
) -> Result<SaddleState<T>> {
    if lr_w <= T::zero() || lr_q <= T::zero() {
        return Err(Error::InvalidArgument("learning rates must be positive".into()));
    }
    let parts = loss_parts(mdp, behavior, c, start)?;
    let gamma = mdp.discount();
    let one_minus = T::one() - gamma;
    let n = parts.d_mu.len();
    let on_support: Vec<bool> = parts.d_mu.iter().map(|&m| m > T::VISITATION_TOL).collect();
    let mut d = match initial_w {
        Some(init) => {
            if init.len() != n {
                return Err(Error::DimensionMismatch("initial weight row length".into()));
            }
            (0..n).map(|i| init[i] * parts.d_mu[i]).collect()
        }
        None => vec![T::zero(); n],
    };
    let mut q = ScoringFunction::zeros(n);

    let mut best_d = d.clone();
    let mut best_q = q.clone();
    let mut best_bound = T::infinity();
    for step in 0..n_steps {
        // dL/dq is the balance residual itself
        let residual = residual_of_mass(&parts, gamma, &d);
        let bound = l1_norm(&residual) / one_minus;
        if bound < best_bound {
            best_bound = bound;
            best_d.copy_from_slice(&d);
            best_q = q.clone();
        }
        if !bound.is_finite() || bound > T::from_f64(DIVERGENCE_GUARD) {
            return Err(Error::Diverged(format!("contraction bound reached {bound}")));
        }
        for i in 0..n {
            q.values[i] += lr_q * residual[i];
        }
        q.clamp_to_box();
        // dL/dd = gamma P^{c mu} q - q; a slowly decaying step keeps the
        // subgradient iteration from orbiting the saddle
        let decay = T::from_f64(1.0 + step as f64 / 50.0).sqrt();
        let pq = parts.kernel.mat_vec(&q.values);
        for i in 0..n {
            if on_support[i] {
                d[i] -= lr_w / decay * (gamma * pq[i] - q.values[i]);
            }
        }
    }
    let residual = residual_of_mass(&parts, gamma, &d);
    let bound = l1_norm(&residual) / one_minus;
    if bound < best_bound {
        best_bound = bound;
        best_d = d;
        best_q = q;
    }
    let best_residual = residual_of_mass(&parts, gamma, &best_d);
    let loss: T = best_q.values.iter().zip(&best_residual).map(|(&qi, &ri)| qi * ri).sum();
    let w = (0..n).map(|i| if on_support[i] { best_d[i] / parts.d_mu[i] } else { T::zero() }).collect();
    Ok(SaddleState { w, q: best_q, step: n_steps, loss, qb_bound: best_bound })
}

/// Balance residual as a function of the visitation-weighted row directly.
fn residual_of_mass<T: Scalar>(parts: &LossParts<T>, gamma: T, d: &[T]) -> Vec<T> {
    let push = parts.kernel.transpose_vec(d);
    (0..d.len())
        .map(|i| {
            let delta = if i == parts.start_pair { T::one() - gamma } else { T::zero() };
            delta + gamma * push[i] - d[i]
        })
        .collect()
}

/// The Fenchel-dual objective whose saddle point recovers one TD-weight
/// row: for the trace-composed kernel `P` and start visitation `d^mu`,
/// `sum d^mu . [psi . ((I - gamma P) v) - psi^2 / 2] - (1-gamma) v(start)`.
///
/// `v` is minimized, `psi` maximized; at the saddle `psi` equals the
/// converted weight row on the visitation support.
pub fn fenchel_dual_objective<T: Scalar>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    c: &[T],
    start: (usize, usize),
    v: &[T],
    psi: &[T],
) -> Result<T> {
    let parts = fenchel_parts(mdp, behavior, c, start)?;
    if v.len() != parts.d_mu.len() || psi.len() != parts.d_mu.len() {
        return Err(Error::DimensionMismatch("v or psi length".into()));
    }
    let gamma = mdp.discount();
    let pv = parts.kernel.mat_vec(v);
    let half = T::from_f64(0.5);
    let mut acc = T::zero();
    for i in 0..parts.d_mu.len() {
        let advantage = v[i] - gamma * pv[i];
        acc += parts.d_mu[i] * (psi[i] * advantage - half * psi[i] * psi[i]);
    }
    Ok(acc - (T::one() - gamma) * v[parts.start_pair])
}

fn fenchel_parts<T: Scalar>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    c: &[T],
    start: (usize, usize),
) -> Result<LossParts<T>> {
    // the composed kernel must stay sub-stochastic for the recursion
    // defining v to have a fixed point
    let na = mdp.n_actions();
    for x in 0..mdp.n_states() {
        let mut mass = T::zero();
        for a in 0..na {
            mass += behavior.prob(x, a) * c[x * na + a];
        }
        if mass > T::one() + T::STOCHASTIC_TOL {
            return Err(Error::InvalidDistribution(format!(
                "behavior-weighted trace mass {mass} at state {x} exceeds 1"
            )));
        }
    }
    loss_parts(mdp, behavior, c, start)
}

/// Exact-gradient descent-ascent on the Fenchel-dual objective.
/// Returns the final `(v, psi)` iterates.
pub fn fenchel_estimate_weights<T: Scalar>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    c: &[T],
    start: (usize, usize),
    lr_v: T,
    lr_psi: T,
    n_steps: usize,
) -> Result<(Vec<T>, Vec<T>)> {
    if lr_v <= T::zero() || lr_psi <= T::zero() {
        return Err(Error::InvalidArgument("learning rates must be positive".into()));
    }
    let parts = fenchel_parts(mdp, behavior, c, start)?;
    let gamma = mdp.discount();
    let n = parts.d_mu.len();
    let mut v = vec![T::zero(); n];
    let mut psi = vec![T::zero(); n];
    for step in 0..n_steps {
        let pv = parts.kernel.mat_vec(&v);
        // ascent in psi: dJ/dpsi = d^mu . ((I - gamma P) v - psi)
        for i in 0..n {
            let advantage = v[i] - gamma * pv[i];
            let delta = lr_psi * parts.d_mu[i] * (advantage - psi[i]);
            psi[i] += delta;
        }
        // descent in v: dJ/dv = (I - gamma P)^T (d^mu . psi) - (1-gamma) delta
        let weighted: Vec<T> = (0..n).map(|i| parts.d_mu[i] * psi[i]).collect();
        let push = parts.kernel.transpose_vec(&weighted);
        for i in 0..n {
            let mut grad = weighted[i] - gamma * push[i];
            if i == parts.start_pair {
                grad -= T::one() - gamma;
            }
            v[i] -= lr_v * grad;
        }
        if step % 256 == 0 {
            let scale = l1_norm(&v) + l1_norm(&psi);
            if !scale.is_finite() || scale > T::from_f64(1e6) {
                return Err(Error::Diverged(format!("iterate norm reached {scale}")));
            }
        }
    }
    Ok((v, psi))
}
