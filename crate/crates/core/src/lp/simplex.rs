//! Two-phase dense simplex with Bland's rule.
//!
//! Free variables are split into positive and negative parts, inequalities
//! get slack variables, and Phase 1 drives an artificial basis to zero.
//! Bland's pivoting rule (smallest eligible index, ties by smallest basic
//! variable) guarantees termination on degenerate problems; a pivot-count
//! guard backs that up.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Scalar;

/// Per-variable bounds; `None` means unbounded on that side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarBound<T> {
    pub lower: Option<T>,
    pub upper: Option<T>,
}

impl<T: Scalar> VarBound<T> {
    pub fn free() -> Self {
        VarBound { lower: None, upper: None }
    }

    pub fn non_negative() -> Self {
        VarBound { lower: Some(T::zero()), upper: None }
    }

    pub fn range(lower: T, upper: T) -> Self {
        VarBound { lower: Some(lower), upper: Some(upper) }
    }
}

/// Minimize `objective . x + objective_constant` subject to
/// `eq_lhs x = eq_rhs`, `ineq_lhs x <= ineq_rhs`, and per-variable bounds.
#[derive(Debug, Clone)]
pub struct LpProblem<T> {
    pub objective: Vec<T>,
    pub objective_constant: T,
    pub eq_lhs: Mat<T>,
    pub eq_rhs: Vec<T>,
    pub ineq_lhs: Mat<T>,
    pub ineq_rhs: Vec<T>,
    pub bounds: Vec<VarBound<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct LpSolution<T> {
    pub status: LpStatus,
    /// Assignment for the original variables; zeros unless optimal.
    pub values: Vec<T>,
    pub objective_value: T,
}

const PIVOT_TOL: f64 = 1e-10;
const FEASIBILITY_TOL: f64 = 1e-9;
const MAX_PIVOTS: usize = 50_000;

enum VarMap<T> {
    Shifted { col: usize, offset: T },
    Split { pos: usize, neg: usize },
}

/// Standard-form system `A z = b, z >= 0` plus the mapping back to the
/// original variables.
struct StandardForm<T> {
    a: Vec<Vec<T>>,
    b: Vec<T>,
    cost: Vec<T>,
    maps: Vec<VarMap<T>>,
    n_cols: usize,
}

fn standardize<T: Scalar>(problem: &LpProblem<T>) -> Result<StandardForm<T>> {
    let n_vars = problem.objective.len();
    if problem.bounds.len() != n_vars {
        return Err(Error::DimensionMismatch("bounds length must match objective length".into()));
    }
    if problem.eq_lhs.n_rows() != problem.eq_rhs.len()
        || problem.ineq_lhs.n_rows() != problem.ineq_rhs.len()
    {
        return Err(Error::DimensionMismatch("constraint matrix and rhs row counts differ".into()));
    }
    if (problem.eq_lhs.n_rows() > 0 && problem.eq_lhs.n_cols() != n_vars)
        || (problem.ineq_lhs.n_rows() > 0 && problem.ineq_lhs.n_cols() != n_vars)
    {
        return Err(Error::DimensionMismatch(
            "constraint matrices must have one column per variable".into(),
        ));
    }

    let mut maps = Vec::with_capacity(n_vars);
    let mut n_cols = 0usize;
    // upper bounds become extra inequality rows in original-variable space
    let mut upper_rows: Vec<(usize, T)> = Vec::new();
    for (i, bound) in problem.bounds.iter().enumerate() {
        if let (Some(l), Some(u)) = (bound.lower, bound.upper) {
            if u < l {
                return Err(Error::InvalidArgument(format!(
                    "variable {i} has upper bound below lower bound"
                )));
            }
        }
        match bound.lower {
            Some(_) => {
                maps.push(VarMap::Shifted { col: n_cols, offset: bound.lower.expect("lower") });
                n_cols += 1;
            }
            None => {
                maps.push(VarMap::Split { pos: n_cols, neg: n_cols + 1 });
                n_cols += 2;
            }
        }
        if let Some(u) = bound.upper {
            upper_rows.push((i, u));
        }
    }

    // transform one original-space row into z space
    let to_z = |row: &[T], rhs: T| -> (Vec<T>, T) {
        let mut out = vec![T::zero(); n_cols];
        let mut b = rhs;
        for (i, &coeff) in row.iter().enumerate() {
            if coeff == T::zero() {
                continue;
            }
            match &maps[i] {
                VarMap::Shifted { col, offset } => {
                    out[*col] += coeff;
                    b -= coeff * *offset;
                }
                VarMap::Split { pos, neg } => {
                    out[*pos] += coeff;
                    out[*neg] -= coeff;
                }
            }
        }
        (out, b)
    };

    let n_ineq_total = problem.ineq_lhs.n_rows() + upper_rows.len();
    let total_cols = n_cols + n_ineq_total;
    let mut a = Vec::new();
    let mut b = Vec::new();
    for r in 0..problem.eq_lhs.n_rows() {
        let (mut row, rhs) = to_z(problem.eq_lhs.row(r), problem.eq_rhs[r]);
        row.resize(total_cols, T::zero());
        a.push(row);
        b.push(rhs);
    }
    let mut slack = n_cols;
    for r in 0..problem.ineq_lhs.n_rows() {
        let (mut row, rhs) = to_z(problem.ineq_lhs.row(r), problem.ineq_rhs[r]);
        row.resize(total_cols, T::zero());
        row[slack] = T::one();
        slack += 1;
        a.push(row);
        b.push(rhs);
    }
    for &(var, upper) in &upper_rows {
        let mut unit = vec![T::zero(); problem.objective.len()];
        unit[var] = T::one();
        let (mut row, rhs) = to_z(&unit, upper);
        row.resize(total_cols, T::zero());
        row[slack] = T::one();
        slack += 1;
        a.push(row);
        b.push(rhs);
    }

    // non-negative right-hand sides for the artificial basis
    for (row, rhs) in a.iter_mut().zip(b.iter_mut()) {
        if *rhs < T::zero() {
            for v in row.iter_mut() {
                *v = -*v;
            }
            *rhs = -*rhs;
        }
    }

    let mut cost = vec![T::zero(); total_cols];
    for (i, &ci) in problem.objective.iter().enumerate() {
        match &maps[i] {
            VarMap::Shifted { col, .. } => cost[*col] += ci,
            VarMap::Split { pos, neg } => {
                cost[*pos] += ci;
                cost[*neg] -= ci;
            }
        }
    }

    Ok(StandardForm { a, b, cost, maps, n_cols: total_cols })
}

struct Tableau<T> {
    /// `m x (n + 1)` rows; last column is the rhs.
    rows: Vec<Vec<T>>,
    basis: Vec<usize>,
    n_cols: usize,
    pivots: usize,
}

impl<T: Scalar> Tableau<T> {
    fn rhs(&self, r: usize) -> T {
        self.rows[r][self.n_cols]
    }

    fn pivot(&mut self, row: usize, col: usize) -> Result<()> {
        self.pivots += 1;
        if self.pivots > MAX_PIVOTS {
            return Err(Error::Lp("pivot budget exhausted (cycling guard)".into()));
        }
        let pivot = self.rows[row][col];
        let inv = T::one() / pivot;
        for v in self.rows[row].iter_mut() {
            *v *= inv;
        }
        for r in 0..self.rows.len() {
            if r == row {
                continue;
            }
            let factor = self.rows[r][col];
            if factor == T::zero() {
                continue;
            }
            for c in 0..=self.n_cols {
                let delta = factor * self.rows[row][c];
                self.rows[r][c] -= delta;
            }
        }
        self.basis[row] = col;
        Ok(())
    }

    /// Minimize `cost . z` from the current basic feasible point with
    /// Bland's rule. `allowed` filters the columns that may enter.
    fn run<F: Fn(usize) -> bool>(&mut self, cost: &[T], allowed: F) -> Result<LpStatus> {
        let tol = T::from_f64(PIVOT_TOL);
        loop {
            // reduced costs from scratch; sizes here are desk scale
            let mut entering = None;
            for col in 0..self.n_cols {
                if !allowed(col) || self.basis.contains(&col) {
                    continue;
                }
                let mut reduced = cost[col];
                for (r, &basic) in self.basis.iter().enumerate() {
                    reduced -= cost[basic] * self.rows[r][col];
                }
                if reduced < -tol {
                    entering = Some(col);
                    break; // Bland: smallest eligible index
                }
            }
            let Some(col) = entering else {
                return Ok(LpStatus::Optimal);
            };
            let mut leaving: Option<(usize, T)> = None;
            for r in 0..self.rows.len() {
                let coeff = self.rows[r][col];
                if coeff > tol {
                    let ratio = self.rhs(r) / coeff;
                    let better = match leaving {
                        None => true,
                        Some((best_row, best_ratio)) => {
                            ratio < best_ratio - tol
                                || (ratio < best_ratio + tol && self.basis[r] < self.basis[best_row])
                        }
                    };
                    if better {
                        leaving = Some((r, ratio));
                    }
                }
            }
            let Some((row, _)) = leaving else {
                return Ok(LpStatus::Unbounded);
            };
            self.pivot(row, col)?;
        }
    }
}

/// Solve a linear program. Optimal solutions satisfy every constraint within
/// the solver's feasibility tolerance.
pub fn simplex_solve<T: Scalar>(problem: &LpProblem<T>) -> Result<LpSolution<T>> {
    let form = standardize(problem)?;
    let m = form.a.len();
    let n = form.n_cols;
    let n_vars = problem.objective.len();

    if m == 0 {
        // no constraints: optimum sits at the bound supporting each cost sign
        let mut values = vec![T::zero(); n_vars];
        let mut objective_value = problem.objective_constant;
        for i in 0..n_vars {
            let ci = problem.objective[i];
            let bound = problem.bounds[i];
            let v = if ci > T::zero() {
                match bound.lower {
                    Some(l) => l,
                    None => return Ok(unbounded(n_vars)),
                }
            } else if ci < T::zero() {
                match bound.upper {
                    Some(u) => u,
                    None => return Ok(unbounded(n_vars)),
                }
            } else {
                bound.lower.or(bound.upper).unwrap_or(T::zero())
            };
            values[i] = v;
            objective_value += ci * v;
        }
        return Ok(LpSolution { status: LpStatus::Optimal, values, objective_value });
    }

    // Phase 1: artificial variables form the starting basis.
    let total = n + m;
    let mut rows = Vec::with_capacity(m);
    for r in 0..m {
        let mut row = form.a[r].clone();
        row.resize(total + 1, T::zero());
        row[n + r] = T::one();
        row[total] = form.b[r];
        rows.push(row);
    }
    let basis: Vec<usize> = (n..n + m).collect();
    let mut tableau = Tableau { rows, basis, n_cols: total, pivots: 0 };

    let mut phase1_cost = vec![T::zero(); total];
    for c in n..total {
        phase1_cost[c] = T::one();
    }
    let status = tableau.run(&phase1_cost, |_| true)?;
    debug_assert_ne!(status, LpStatus::Unbounded, "phase 1 objective is bounded below by zero");
    let infeasibility: T =
        tableau.basis.iter().enumerate().filter(|(_, &b)| b >= n).map(|(r, _)| tableau.rhs(r)).sum();
    if infeasibility > T::from_f64(FEASIBILITY_TOL) {
        return Ok(LpSolution {
            status: LpStatus::Infeasible,
            values: vec![T::zero(); n_vars],
            objective_value: T::zero(),
        });
    }

    // Drive leftover artificials out of the basis where possible; rows where
    // no pivot exists are redundant and harmless at zero.
    for r in 0..m {
        if tableau.basis[r] >= n {
            let tol = T::from_f64(PIVOT_TOL);
            if let Some(col) = (0..n).find(|&c| tableau.rows[r][c].abs() > tol) {
                tableau.pivot(r, col)?;
            }
        }
    }

    // Phase 2 over the original costs; artificials may not re-enter.
    let mut phase2_cost = form.cost.clone();
    phase2_cost.resize(total, T::zero());
    let status = tableau.run(&phase2_cost, |c| c < n)?;
    if status == LpStatus::Unbounded {
        return Ok(unbounded(n_vars));
    }

    let mut z = vec![T::zero(); n];
    for (r, &b) in tableau.basis.iter().enumerate() {
        if b < n {
            z[b] = tableau.rhs(r);
        }
    }
    let mut values = vec![T::zero(); n_vars];
    let mut objective_value = problem.objective_constant;
    for (i, map) in form.maps.iter().enumerate() {
        values[i] = match map {
            VarMap::Shifted { col, offset } => z[*col] + *offset,
            VarMap::Split { pos, neg } => z[*pos] - z[*neg],
        };
        objective_value += problem.objective[i] * values[i];
    }
    Ok(LpSolution { status: LpStatus::Optimal, values, objective_value })
}

fn unbounded<T: Scalar>(n_vars: usize) -> LpSolution<T> {
    LpSolution {
        status: LpStatus::Unbounded,
        values: vec![T::zero(); n_vars],
        objective_value: T::zero(),
    }
}
