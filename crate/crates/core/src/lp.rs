//! Policy evaluation through linear programs.
//!
//! The dual LP pins the discounted visitation distribution through the
//! balance equations and reads the value off the objective. Relaxing the
//! balance constraints into a box of width `eta` turns repeated LP solves
//! into applications of a contractive operator with rate `eta`, and the
//! optimal dual variables convert directly into TD-weight rows.

pub mod simplex;

pub use simplex::{simplex_solve, LpProblem, LpSolution, LpStatus, VarBound};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::mdp::{discounted_visitation, joint_transition_matrix, Policy, QFunction, TabularMdp};
use crate::scalar::Scalar;

/// The dual LP for evaluating one start pair:
/// minimize `(1-gamma)^{-1} d^T r` subject to the balance equations
/// `(1-gamma) delta + gamma (P^pi)^T d - d = 0` with `d` free.
///
/// The balance equations have the visitation distribution of the target
/// policy as their only solution, so the optimum equals `Q^pi(start)`.
pub fn build_dual_lp<T: Scalar>(
    mdp: &TabularMdp<T>,
    target: &Policy<T>,
    start: (usize, usize),
) -> Result<LpProblem<T>> {
    mdp.check_start(start)?;
    let n = mdp.n_pairs();
    let p_t = joint_transition_matrix(mdp, target, None)?.transpose();
    let gamma = mdp.discount();
    let inv_scale = T::one() / (T::one() - gamma);

    let objective: Vec<T> = mdp.reward_vector().iter().map(|&r| inv_scale * r).collect();
    // (gamma (P^pi)^T - I) d = -(1-gamma) delta
    let mut eq_lhs = Mat::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            eq_lhs[(r, c)] = gamma * p_t[(r, c)];
        }
        eq_lhs[(r, r)] -= T::one();
    }
    let mut eq_rhs = vec![T::zero(); n];
    eq_rhs[mdp.pair_index(start.0, start.1)] = -(T::one() - gamma);

    Ok(LpProblem {
        objective,
        objective_constant: T::zero(),
        eq_lhs,
        eq_rhs,
        ineq_lhs: Mat::zeros(0, n),
        ineq_rhs: vec![],
        bounds: vec![VarBound::free(); n],
    })
}

/// The relaxed LP for one start pair at relaxation level `eta`:
/// the objective is augmented with the Bellman errors of the current
/// estimate `q_t`, and balance-equation violations are allowed up to a
/// non-negative slack budget `u` with `sum(u) <= eta`.
///
/// Variables are ordered `[d (free, n entries), u (non-negative, n entries)]`.
pub fn build_relaxed_lp<T: Scalar>(
    mdp: &TabularMdp<T>,
    target: &Policy<T>,
    q_t: &QFunction<T>,
    start: (usize, usize),
    eta: T,
) -> Result<LpProblem<T>> {
    mdp.check_start(start)?;
    if eta < T::zero() || eta >= T::one() {
        return Err(Error::InvalidArgument("eta must lie in [0, 1)".into()));
    }
    let n = mdp.n_pairs();
    if q_t.values.len() != n {
        return Err(Error::DimensionMismatch("q_t length".into()));
    }
    let gamma = mdp.discount();
    let one_minus = T::one() - gamma;
    let inv_scale = T::one() / one_minus;
    let p_pi = joint_transition_matrix(mdp, target, None)?;
    let p_t = p_pi.transpose();
    let errors = crate::mdp::bellman_error_vector(mdp, target, q_t)?;

    // objective: q_t(start) + (1-gamma)^{-1} d^T (r + gamma P^pi q_t - q_t)
    let mut objective = vec![T::zero(); 2 * n];
    for i in 0..n {
        objective[i] = inv_scale * errors[i];
    }
    let start_pair = mdp.pair_index(start.0, start.1);
    let objective_constant = q_t.values[start_pair];

    // |(1-gamma) delta + gamma (P^pi)^T d - d| <= (1-gamma) u, per component
    let mut ineq_lhs = Mat::zeros(2 * n + 1, 2 * n);
    let mut ineq_rhs = vec![T::zero(); 2 * n + 1];
    for r in 0..n {
        for c in 0..n {
            let coeff = gamma * p_t[(r, c)] - if r == c { T::one() } else { T::zero() };
            ineq_lhs[(r, c)] = coeff;
            ineq_lhs[(n + r, c)] = -coeff;
        }
        ineq_lhs[(r, n + r)] = -one_minus;
        ineq_lhs[(n + r, n + r)] = -one_minus;
        let delta = if r == start_pair { one_minus } else { T::zero() };
        ineq_rhs[r] = -delta;
        ineq_rhs[n + r] = delta;
    }
    // sum(u) <= eta
    for c in 0..n {
        ineq_lhs[(2 * n, n + c)] = T::one();
    }
    ineq_rhs[2 * n] = eta;

    let mut bounds = vec![VarBound::free(); n];
    bounds.extend(std::iter::repeat_n(VarBound::non_negative(), n));

    Ok(LpProblem {
        objective,
        objective_constant,
        eq_lhs: Mat::zeros(0, 2 * n),
        eq_rhs: vec![],
        ineq_lhs,
        ineq_rhs,
        bounds,
    })
}

/// Repeatedly solve the relaxed LPs for every pair, feeding each round of
/// objective values back in as the next estimate. Returns the sequence of
/// iterates starting with `q0`; consecutive errors to `Q^pi` contract at
/// rate `eta`.
pub fn lp_iterate<T: Scalar>(
    mdp: &TabularMdp<T>,
    target: &Policy<T>,
    q0: &QFunction<T>,
    eta: T,
    n_iters: usize,
) -> Result<Vec<QFunction<T>>> {
    let n = mdp.n_pairs();
    let mut sequence = vec![q0.clone()];
    for _ in 0..n_iters {
        let current = sequence.last().expect("nonempty sequence");
        let mut next = vec![T::zero(); n];
        for pair in 0..n {
            let start = mdp.pair_from_index(pair);
            let problem = build_relaxed_lp(mdp, target, current, start, eta)?;
            let solution = simplex_solve(&problem)?;
            if solution.status != LpStatus::Optimal {
                return Err(Error::Lp(format!(
                    "relaxed LP at pair ({}, {}) returned {:?}",
                    start.0, start.1, solution.status
                )));
            }
            next[pair] = solution.objective_value;
        }
        sequence.push(QFunction { values: next });
    }
    Ok(sequence)
}

/// Convert the optimal dual variables of a relaxed LP into a TD-weight row
/// `w = d / d^mu` (element-wise). Pairs the behavior policy never visits
/// must carry no mass.
pub fn extract_weights_from_lp<T: Scalar>(
    solution: &LpSolution<T>,
    mdp: &TabularMdp<T>,
    behavior: &Policy<T>,
    start: (usize, usize),
) -> Result<Vec<T>> {
    if solution.status != LpStatus::Optimal {
        return Err(Error::Lp(format!("cannot extract weights from a {:?} solution", solution.status)));
    }
    let n = mdp.n_pairs();
    if solution.values.len() < n {
        return Err(Error::DimensionMismatch("solution has fewer variables than pairs".into()));
    }
    let d_mu = discounted_visitation(mdp, behavior, start)?.weights;
    let mut w = vec![T::zero(); n];
    for i in 0..n {
        let d_star = solution.values[i];
        if d_mu[i] <= T::VISITATION_TOL {
            if d_star.abs() > T::from_f64(1e-9) {
                let (x, a) = mdp.pair_from_index(i);
                return Err(Error::SupportViolation(format!(
                    "optimal dual puts mass {d_star} on unvisited pair ({x}, {a})"
                )));
            }
        } else {
            w[i] = d_star / d_mu[i];
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::exact_q;
    use crate::operators::residual_report_row;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dual_lp_recovers_exact_q() {
        for seed in 0..10 {
            let mdp = TabularMdp::<f64>::random(4, 2, 0.9, 400 + seed);
            let target = Policy::random(4, 2, 500 + seed);
            let q_pi = exact_q(&mdp, &target).unwrap();
            for pair in [0usize, 3, 7] {
                let start = mdp.pair_from_index(pair);
                let problem = build_dual_lp(&mdp, &target, start).unwrap();
                let solution = simplex_solve(&problem).unwrap();
                assert_eq!(solution.status, LpStatus::Optimal);
                assert!(
                    (solution.objective_value - q_pi.values[pair]).abs() < 1e-8,
                    "seed {seed} pair {pair}: {} vs {}",
                    solution.objective_value,
                    q_pi.values[pair]
                );
            }
        }
    }

    #[test]
    fn dual_lp_solution_is_the_target_visitation() {
        let mdp = TabularMdp::<f64>::random(4, 2, 0.9, 401);
        let target = Policy::random(4, 2, 402);
        let start = (2, 1);
        let problem = build_dual_lp(&mdp, &target, start).unwrap();
        let solution = simplex_solve(&problem).unwrap();
        let d_pi = discounted_visitation(&mdp, &target, start).unwrap();
        for i in 0..8 {
            assert!(
                (solution.values[i] - d_pi.weights[i]).abs() < 1e-8,
                "entry {i}: {} vs {}",
                solution.values[i],
                d_pi.weights[i]
            );
        }
    }

    #[test]
    fn dual_lp_on_absorbing_reward_state() {
        let mdp = TabularMdp::<f64>::new(1, 1, vec![1.0], vec![1.0], vec![0.0], 0.9, &[]).unwrap();
        let target = Policy::uniform(1, 1);
        let problem = build_dual_lp(&mdp, &target, (0, 0)).unwrap();
        let solution = simplex_solve(&problem).unwrap();
        assert!((solution.objective_value - 10.0).abs() < 1e-8);
    }

    #[test]
    fn dual_lp_with_zero_rewards() {
        let mdp = TabularMdp::<f64>::random(3, 2, 0.9, 3);
        let zeroed = TabularMdp::<f64>::new(
            3,
            2,
            (0..3 * 2 * 3).map(|i| mdp.prob(i / 6, (i / 3) % 2, i % 3)).collect(),
            vec![0.0; 6],
            vec![0.0; 6],
            0.9,
            &[],
        )
        .unwrap();
        let target = Policy::random(3, 2, 4);
        let problem = build_dual_lp(&zeroed, &target, (1, 1)).unwrap();
        let solution = simplex_solve(&problem).unwrap();
        assert!(solution.objective_value.abs() < 1e-8);
    }

    #[test]
    fn relaxed_lp_with_zero_eta_keeps_dual_optimum() {
        let mdp = TabularMdp::<f64>::random(4, 2, 0.88, 13);
        let target = Policy::random(4, 2, 14);
        let q_pi = exact_q(&mdp, &target).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let q_t =
            QFunction::from_values((0..8).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()).unwrap();
        for pair in 0..8 {
            let start = mdp.pair_from_index(pair);
            let problem = build_relaxed_lp(&mdp, &target, &q_t, start, 0.0).unwrap();
            let solution = simplex_solve(&problem).unwrap();
            assert_eq!(solution.status, LpStatus::Optimal);
            assert!(
                (solution.objective_value - q_pi.values[pair]).abs() < 1e-8,
                "pair {pair}: {} vs {}",
                solution.objective_value,
                q_pi.values[pair]
            );
        }
    }

    #[test]
    fn relaxed_lp_at_exact_q_returns_exact_q() {
        let mdp = TabularMdp::<f64>::random(4, 2, 0.9, 23);
        let target = Policy::random(4, 2, 24);
        let q_pi = exact_q(&mdp, &target).unwrap();
        for eta in [0.1, 0.5, 0.9] {
            let problem = build_relaxed_lp(&mdp, &target, &q_pi, (0, 0), eta).unwrap();
            let solution = simplex_solve(&problem).unwrap();
            assert!(
                (solution.objective_value - q_pi.values[0]).abs() < 1e-8,
                "eta {eta}: {} vs {}",
                solution.objective_value,
                q_pi.values[0]
            );
        }
    }

    #[test]
    fn relaxed_lp_error_is_bounded_by_eta() {
        let mdp = TabularMdp::<f64>::random(4, 2, 0.9, 33);
        let target = Policy::random(4, 2, 34);
        let q_pi = exact_q(&mdp, &target).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let q_t =
            QFunction::from_values((0..8).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect()).unwrap();
        let gap = q_t.values.iter().zip(&q_pi.values).fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs()));
        let eta = 0.5;
        for pair in 0..8 {
            let start = mdp.pair_from_index(pair);
            let problem = build_relaxed_lp(&mdp, &target, &q_t, start, eta).unwrap();
            let solution = simplex_solve(&problem).unwrap();
            let err = (solution.objective_value - q_pi.values[pair]).abs();
            assert!(err <= eta * gap + 1e-7, "pair {pair}: err {err}, bound {}", eta * gap);
        }
    }

    #[test]
    fn lp_iteration_contracts_geometrically() {
        let mdp = TabularMdp::<f64>::random(4, 2, 0.9, 43);
        let target = Policy::random(4, 2, 44);
        let q_pi = exact_q(&mdp, &target).unwrap();
        let q0 = QFunction::zeros(8);
        let eta = 0.5;
        let seq = lp_iterate(&mdp, &target, &q0, eta, 10).unwrap();
        let sup = |q: &QFunction<f64>| {
            q.values.iter().zip(&q_pi.values).fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs()))
        };
        for t in 0..10 {
            let before = sup(&seq[t]);
            let after = sup(&seq[t + 1]);
            assert!(after <= eta * before + 1e-7, "step {t}: {after} vs {}", eta * before);
        }
    }

    #[test]
    fn exact_lp_iteration_converges_in_one_step() {
        let mdp = TabularMdp::<f64>::random(3, 2, 0.9, 49);
        let target = Policy::random(3, 2, 50);
        let q_pi = exact_q(&mdp, &target).unwrap();
        let seq = lp_iterate(&mdp, &target, &QFunction::zeros(6), 0.0, 1).unwrap();
        for i in 0..6 {
            assert!((seq[1].values[i] - q_pi.values[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn lp_iteration_from_exact_q_stays_fixed() {
        let mdp = TabularMdp::<f64>::random(3, 2, 0.9, 53);
        let target = Policy::random(3, 2, 54);
        let q_pi = exact_q(&mdp, &target).unwrap();
        let seq = lp_iterate(&mdp, &target, &q_pi, 0.3, 3).unwrap();
        for q in &seq {
            for i in 0..6 {
                assert!((q.values[i] - q_pi.values[i]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn extracted_weights_reproduce_lp_values_and_respect_eta() {
        let mdp = TabularMdp::<f64>::random(4, 2, 0.9, 63);
        let target = Policy::random(4, 2, 64);
        let behavior = Policy::random(4, 2, 65);
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let q_t = QFunction::from_values((0..8).map(|_| rng.gen::<f64>() * 2.0).collect()).unwrap();
        let eta = 0.5;
        for pair in 0..8 {
            let start = mdp.pair_from_index(pair);
            let problem = build_relaxed_lp(&mdp, &target, &q_t, start, eta).unwrap();
            let solution = simplex_solve(&problem).unwrap();
            let w_row = extract_weights_from_lp(&solution, &mdp, &behavior, start).unwrap();
            let backup =
                crate::operators::marginalized_backup_at(&mdp, &target, &behavior, &w_row, &q_t, start)
                    .unwrap();
            assert!(
                (backup - solution.objective_value).abs() < 1e-8,
                "pair {pair}: {backup} vs {}",
                solution.objective_value
            );
            let report = residual_report_row(&mdp, &target, &behavior, &w_row, start).unwrap();
            assert!(report.local_rate <= eta + 1e-8, "pair {pair}: rate {}", report.local_rate);
        }
    }

    #[test]
    fn zero_eta_extraction_recovers_is_weights() {
        let mdp = TabularMdp::<f64>::random(4, 2, 0.9, 73);
        let target = Policy::random(4, 2, 74);
        let behavior = Policy::random(4, 2, 75);
        let q_t = QFunction::zeros(8);
        let c = crate::operators::materialize_traces(
            &crate::operators::TraceScheme::ImportanceSampling,
            &target,
            &behavior,
        )
        .unwrap();
        let w_exact = crate::operators::trace_to_weights(&mdp, &behavior, &c).unwrap();
        let start = (2, 0);
        let pair = mdp.pair_index(2, 0);
        let problem = build_relaxed_lp(&mdp, &target, &q_t, start, 0.0).unwrap();
        let solution = simplex_solve(&problem).unwrap();
        let w_row = extract_weights_from_lp(&solution, &mdp, &behavior, start).unwrap();
        for i in 0..8 {
            assert!(
                (w_row[i] - w_exact.matrix[(pair, i)]).abs() < 1e-7,
                "entry {i}: {} vs {}",
                w_row[i],
                w_exact.matrix[(pair, i)]
            );
        }
    }
}
