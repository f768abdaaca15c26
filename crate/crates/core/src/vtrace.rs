//! V-trace: off-policy evaluation of state-value functions with separate
//! trace-cutting coefficients `c(x,a)` and fixed-point coefficients
//! `rho(x,a)`. The trace product lags the TD error by one step, so state
//! transition kernels drive the closed forms.

use crate::error::{Error, Result};
use crate::linalg::{l1_norm, resolvent, solve_discounted, Mat};
use crate::mdp::{Policy, TabularMdp, ValueFunction};
use crate::operators::StateTdWeights;
use crate::scalar::Scalar;

/// Step-wise V-trace coefficients over state-action pairs.
#[derive(Debug, Clone)]
pub struct VTraceScheme<T> {
    /// Trace-cutting coefficients, applied to steps before the TD error.
    pub c: Vec<T>,
    /// Fixed-point coefficients, applied at the TD error itself.
    pub rho: Vec<T>,
}

impl<T: Scalar> VTraceScheme<T> {
    pub fn new(c: Vec<T>, rho: Vec<T>) -> Result<Self> {
        if c.len() != rho.len() {
            return Err(Error::DimensionMismatch("c and rho lengths differ".into()));
        }
        if let Some(i) = c.iter().chain(rho.iter()).position(|v| *v < T::zero()) {
            return Err(Error::NegativeTrace(i % c.len()));
        }
        Ok(VTraceScheme { c, rho })
    }

    /// Standard clipped coefficients `min(clip, pi/mu)` for both vectors.
    pub fn clipped(target: &Policy<T>, behavior: &Policy<T>, c_clip: T, rho_clip: T) -> Result<Self> {
        let (ns, na) = (target.n_states(), target.n_actions());
        let mut c = vec![T::zero(); ns * na];
        let mut rho = vec![T::zero(); ns * na];
        for x in 0..ns {
            for a in 0..na {
                let p = target.prob(x, a);
                let mu = behavior.prob(x, a);
                if p > T::zero() && mu == T::zero() {
                    return Err(Error::CoverageViolation { state: x, action: a });
                }
                let ratio = if p == T::zero() { T::zero() } else { p / mu };
                c[x * na + a] = c_clip.min(ratio);
                rho[x * na + a] = rho_clip.min(ratio);
            }
        }
        VTraceScheme::new(c, rho)
    }

    /// The kernel `mu(a|x) c(x,a)` must stay sub-stochastic per state.
    fn check_substochastic(&self, mdp: &TabularMdp<T>, behavior: &Policy<T>) -> Result<()> {
        let na = mdp.n_actions();
        for x in 0..mdp.n_states() {
            let mut mass = T::zero();
            for a in 0..na {
                mass += behavior.prob(x, a) * self.c[x * na + a];
            }
            if mass > T::one() + T::STOCHASTIC_TOL {
                return Err(Error::InvalidDistribution(format!(
                    "behavior-weighted trace mass {mass} at state {x} exceeds 1"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VTraceMode {
    Multistep,
    Marginalized,
}

/// State-level kernel `P(x,x') = sum_a mu(a|x) c(x,a) p(x'|x,a)`.
fn state_kernel<T: Scalar>(mdp: &TabularMdp<T>, behavior: &Policy<T>, c: Option<&[T]>) -> Mat<T> {
    let ns = mdp.n_states();
    let na = mdp.n_actions();
    let mut m = Mat::zeros(ns, ns);
    for x in 0..ns {
        for a in 0..na {
            let scale = behavior.prob(x, a) * c.map_or(T::one(), |c| c[x * na + a]);
            if scale == T::zero() {
                continue;
            }
            for x2 in 0..ns {
                m[(x, x2)] += scale * mdp.prob(x, a, x2);
            }
        }
    }
    m
}

/// Per-pair TD errors `r(x,a) + gamma E_{x'}[V(x')] - V(x)`.
fn td_errors<T: Scalar>(mdp: &TabularMdp<T>, v: &ValueFunction<T>) -> Vec<T> {
    let ns = mdp.n_states();
    let na = mdp.n_actions();
    let gamma = mdp.discount();
    let mut out = vec![T::zero(); ns * na];
    for x in 0..ns {
        for a in 0..na {
            let mut next = T::zero();
            for x2 in 0..ns {
                next += mdp.prob(x, a, x2) * v.values[x2];
            }
            out[x * na + a] = mdp.mean_reward(x, a) + gamma * next - v.values[x];
        }
    }
    out
}

/// Behavior-averaged, rho-corrected TD error per state:
/// `g(x) = sum_a mu(a|x) rho(x,a) Delta(x,a)`.
fn corrected_error<T: Scalar>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    rho: &[T],
    v: &ValueFunction<T>,
) -> Vec<T> {
    let errors = td_errors(mdp, v);
    let ns = mdp.n_states();
    let na = mdp.n_actions();
    (0..ns)
        .map(|x| {
            let mut acc = T::zero();
            for a in 0..na {
                acc += behavior.prob(x, a) * rho[x * na + a] * errors[x * na + a];
            }
            acc
        })
        .collect()
}

/// Apply the V-trace operator, either through its multi-step closed form or
/// through state-level TD weights. Both agree when the weights come from
/// [`vtrace_trace_to_weights`].
pub fn vtrace_apply<T: Scalar>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    scheme: &VTraceScheme<T>,
    v: &ValueFunction<T>,
    mode: VTraceMode,
    state_weights: Option<&StateTdWeights<T>>,
) -> Result<ValueFunction<T>> {
    let n = mdp.n_pairs();
    if scheme.c.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "scheme has {} coefficients, expected {n}",
            scheme.c.len()
        )));
    }
    if v.values.len() != mdp.n_states() {
        return Err(Error::DimensionMismatch("value function length".into()));
    }
    scheme.check_substochastic(mdp, behavior)?;
    let g = corrected_error(mdp, behavior, &scheme.rho, v);
    match mode {
        VTraceMode::Multistep => {
            let kernel = state_kernel(mdp, behavior, Some(&scheme.c));
            let correction = solve_discounted(mdp.discount(), &kernel, &g)?;
            let values = v.values.iter().zip(&correction).map(|(&a, &b)| a + b).collect();
            Ok(ValueFunction { values })
        }
        VTraceMode::Marginalized => {
            let sw = state_weights.ok_or_else(|| {
                Error::InvalidArgument("marginalized V-trace requires state TD weights".into())
            })?;
            let d_mu = state_visitation_matrix(mdp, behavior)?;
            let inv_scale = T::one() / (T::one() - mdp.discount());
            let ns = mdp.n_states();
            let mut values = v.values.clone();
            for x in 0..ns {
                let mut acc = T::zero();
                for x2 in 0..ns {
                    acc += d_mu[(x, x2)] * sw.matrix[(x, x2)] * g[x2];
                }
                values[x] += inv_scale * acc;
            }
            Ok(ValueFunction { values })
        }
    }
}

/// State visitation matrix under the behavior policy: row `x` holds
/// `d_x(x') = (1-gamma) sum_t gamma^t P(x_t = x')`.
pub fn state_visitation_matrix<T: Scalar>(mdp: &TabularMdp<T>, behavior: &Policy<T>) -> Result<Mat<T>> {
    let kernel = state_kernel(mdp, behavior, None);
    let res = resolvent(mdp.discount(), &kernel)?;
    let ns = mdp.n_states();
    let scale = T::one() - mdp.discount();
    let mut out = Mat::zeros(ns, ns);
    for r in 0..ns {
        for c in 0..ns {
            out[(r, c)] = scale * res[(r, c)];
        }
    }
    Ok(out)
}

/// State-level TD weights equivalent to the trace-cutting coefficients:
/// the lag-one conditional expectation of the trace product given arrival,
/// computed in closed form as an element-wise resolvent ratio.
pub fn vtrace_trace_to_weights<T: Scalar>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    c: &[T],
) -> Result<StateTdWeights<T>> {
    if c.len() != mdp.n_pairs() {
        return Err(Error::DimensionMismatch(format!(
            "trace vector has {} entries, expected {}",
            c.len(),
            mdp.n_pairs()
        )));
    }
    let scheme_check = VTraceScheme { c: c.to_vec(), rho: vec![T::zero(); c.len()] };
    scheme_check.check_substochastic(mdp, behavior)?;
    let kernel = state_kernel(mdp, behavior, Some(c));
    let num = resolvent(mdp.discount(), &kernel)?;
    let den = resolvent(mdp.discount(), &state_kernel(mdp, behavior, None))?;
    let ns = mdp.n_states();
    let scale = T::one() - mdp.discount();
    let mut w = Mat::zeros(ns, ns);
    for r in 0..ns {
        for col in 0..ns {
            if scale * den[(r, col)] < T::VISITATION_TOL {
                w[(r, col)] = T::zero();
            } else {
                w[(r, col)] = num[(r, col)] / den[(r, col)];
            }
        }
    }
    Ok(StateTdWeights { matrix: w })
}

/// L1 residual of the state balance equation
/// `d = (1-gamma) delta_x + gamma (P^{c mu})^T d` for `d = w . d^mu`.
pub fn vtrace_balance_residual<T: Scalar>(
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    c: &[T],
    weights: &StateTdWeights<T>,
    start_state: usize,
) -> Result<T> {
    if start_state >= mdp.n_states() {
        return Err(Error::InvalidArgument(format!("state {start_state} out of range")));
    }
    let ns = mdp.n_states();
    let d_mu = state_visitation_matrix(mdp, behavior)?;
    let kernel = state_kernel(mdp, behavior, Some(c));
    let gamma = mdp.discount();
    let d_w: Vec<T> =
        (0..ns).map(|x| weights.matrix[(start_state, x)] * d_mu[(start_state, x)]).collect();
    let push = kernel.transpose_vec(&d_w);
    let residual: Vec<T> = (0..ns)
        .map(|x| {
            let delta = if x == start_state { T::one() - gamma } else { T::zero() };
            delta + gamma * push[x] - d_w[x]
        })
        .collect();
    Ok(l1_norm(&residual))
}
