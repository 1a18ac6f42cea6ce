//! Dense strictly-convex quadratic programming for one cascade stage.
//!
//! Problems have the form
//!
//! ```text
//!     minimize    1/2 zᵀ H z + gᵀ z
//!     subject to  lo_i ≤ a_iᵀ z ≤ hi_i        i = 1..m
//! ```
//!
//! with `H ≻ 0`. The solver is a dual active-set method: it starts from the
//! unconstrained minimum and adds the most violated constraint side until all
//! rows hold, updating primal and dual variables along the way. No feasible
//! starting point is needed and an empty constraint intersection surfaces as
//! [`QpStatus::Infeasible`]. Selection is by raw violation with lowest row
//! index breaking ties, which makes the solver a pure, deterministic function
//! of its inputs.
//!
//! Bounds at or beyond [`INFINITE_BOUND`](crate::model::INFINITE_BOUND) are
//! treated as absent.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::model::is_free_bound;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("hessian is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("hessian is not positive definite even after regularization")]
    NotPositiveDefinite,
    #[error("constraint row {0} has lower bound above upper bound")]
    InvalidBounds(usize),
}

/// One bilateral constraint row `lo ≤ aᵀz ≤ hi`.
#[derive(Debug, Clone)]
pub struct ConstraintRow {
    pub coeffs: DVector<f64>,
    pub lower: f64,
    pub upper: f64,
}

/// A single stage of the cascade in standard form.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub rows: Vec<ConstraintRow>,
}

impl QpProblem {
    pub fn num_vars(&self) -> usize {
        self.gradient.len()
    }

    fn validate(&self) -> Result<(), QpError> {
        let n = self.num_vars();
        if self.hessian.nrows() != n || self.hessian.ncols() != n {
            return Err(QpError::DimensionMismatch(format!(
                "hessian is {}x{} for {} variables",
                self.hessian.nrows(),
                self.hessian.ncols(),
                n
            )));
        }
        let mut asym: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                asym = asym.max((self.hessian[(i, j)] - self.hessian[(j, i)]).abs());
            }
        }
        if asym > 1e-10 {
            return Err(QpError::NotSymmetric(asym));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.coeffs.len() != n {
                return Err(QpError::DimensionMismatch(format!(
                    "row {i} has {} coefficients for {} variables",
                    row.coeffs.len(),
                    n
                )));
            }
            if row.lower > row.upper {
                return Err(QpError::InvalidBounds(i));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

/// Which side of a bilateral row is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveConstraint {
    pub row: usize,
    pub side: Side,
}

/// Maximum KKT violations of a candidate solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub status: QpStatus,
    /// Rows whose bound is active at the solution, with their multipliers.
    pub active_set: Vec<ActiveConstraint>,
    pub multipliers: Vec<f64>,
    pub residuals: KktResiduals,
    pub iterations: usize,
}

/// Signed normal of a constraint side, as `n` in `nᵀz ≥ b`.
fn side_normal(row: &ConstraintRow, side: Side) -> (DVector<f64>, f64) {
    match side {
        Side::Lower => (row.coeffs.clone(), row.lower),
        Side::Upper => (-&row.coeffs, -row.upper),
    }
}

fn compute_residuals(
    problem: &QpProblem,
    z: &DVector<f64>,
    active: &[ActiveConstraint],
    multipliers: &[f64],
) -> KktResiduals {
    let mut grad = &problem.hessian * z + &problem.gradient;
    let mut complementarity: f64 = 0.0;
    for (c, &lam) in active.iter().zip(multipliers) {
        let (n, b) = side_normal(&problem.rows[c.row], c.side);
        grad -= &n * lam;
        complementarity = complementarity.max(lam.abs() * (n.dot(z) - b).abs());
    }
    let stationarity = if grad.is_empty() { 0.0 } else { grad.amax() };
    let mut primal: f64 = 0.0;
    for row in &problem.rows {
        let v = row.coeffs.dot(z);
        if !is_free_bound(row.lower) {
            primal = primal.max(row.lower - v);
        }
        if !is_free_bound(row.upper) {
            primal = primal.max(v - row.upper);
        }
    }
    KktResiduals {
        stationarity,
        primal: primal.max(0.0),
        complementarity,
    }
}

/// Recompute KKT residuals of a solution against its problem.
pub fn verify_kkt(problem: &QpProblem, solution: &QpSolution) -> Result<KktResiduals, QpError> {
    if solution.z.len() != problem.num_vars() {
        return Err(QpError::DimensionMismatch(format!(
            "solution has {} variables, problem {}",
            solution.z.len(),
            problem.num_vars()
        )));
    }
    if solution.active_set.len() != solution.multipliers.len() {
        return Err(QpError::DimensionMismatch(
            "active set and multiplier lengths differ".into(),
        ));
    }
    for c in &solution.active_set {
        if c.row >= problem.rows.len() {
            return Err(QpError::DimensionMismatch(format!(
                "active row {} out of range",
                c.row
            )));
        }
    }
    Ok(compute_residuals(
        problem,
        &solution.z,
        &solution.active_set,
        &solution.multipliers,
    ))
}

fn factor_hessian(h: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, QpError> {
    if let Some(chol) = h.clone().cholesky() {
        return Ok(chol);
    }
    // Small diagonal shift keeps nearly semidefinite cost matrices usable.
    let n = h.nrows();
    let shifted = h + DMatrix::identity(n, n) * 1e-8;
    shifted.cholesky().ok_or(QpError::NotPositiveDefinite)
}

/// Solve a strictly convex QP. `tolerance` bounds the final constraint
/// violation; `max_iter` caps active-set changes.
pub fn solve(problem: &QpProblem, tolerance: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    problem.validate()?;
    let chol = factor_hessian(&problem.hessian)?;

    let mut z = chol.solve(&(-&problem.gradient));
    let mut active: Vec<ActiveConstraint> = Vec::new();
    let mut lam: Vec<f64> = Vec::new();
    let mut hinv_n: Vec<DVector<f64>> = Vec::new();
    let mut iterations = 0usize;

    let finish = |z: DVector<f64>,
                  active: Vec<ActiveConstraint>,
                  lam: Vec<f64>,
                  status: QpStatus,
                  iterations: usize| {
        let residuals = compute_residuals(problem, &z, &active, &lam);
        QpSolution {
            z,
            status,
            active_set: active,
            multipliers: lam,
            residuals,
            iterations,
        }
    };

    'outer: loop {
        // Most violated constraint side; lowest (row, side) index wins ties.
        let mut worst: Option<(ActiveConstraint, f64)> = None;
        for (i, row) in problem.rows.iter().enumerate() {
            let v = row.coeffs.dot(&z);
            if !is_free_bound(row.lower) {
                let s = v - row.lower;
                if s < -tolerance && worst.is_none_or(|(_, w)| s < w) {
                    worst = Some((
                        ActiveConstraint {
                            row: i,
                            side: Side::Lower,
                        },
                        s,
                    ));
                }
            }
            if !is_free_bound(row.upper) {
                let s = row.upper - v;
                if s < -tolerance && worst.is_none_or(|(_, w)| s < w) {
                    worst = Some((
                        ActiveConstraint {
                            row: i,
                            side: Side::Upper,
                        },
                        s,
                    ));
                }
            }
        }
        let Some((cand, mut s_p)) = worst else {
            return Ok(finish(z, active, lam, QpStatus::Optimal, iterations));
        };

        let (n_p, _) = side_normal(&problem.rows[cand.row], cand.side);
        let hp = chol.solve(&n_p);
        let kappa_free = n_p.dot(&hp);
        if kappa_free <= 0.0 {
            // A violated all-zero row: nothing can fix it.
            return Ok(finish(z, active, lam, QpStatus::Infeasible, iterations));
        }
        let mut lam_p = 0.0f64;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Ok(finish(z, active, lam, QpStatus::MaxIterations, iterations));
            }

            // Dual step direction r for active multipliers and primal
            // direction d, via the Schur complement S = NᵀH⁻¹N.
            let k = active.len();
            let (r, d) = if k == 0 {
                (DVector::zeros(0), hp.clone())
            } else {
                let normals: Vec<DVector<f64>> = active
                    .iter()
                    .map(|c| side_normal(&problem.rows[c.row], c.side).0)
                    .collect();
                let mut s_mat = DMatrix::zeros(k, k);
                for i in 0..k {
                    for j in 0..=i {
                        let val = normals[i].dot(&hinv_n[j]);
                        s_mat[(i, j)] = val;
                        s_mat[(j, i)] = val;
                    }
                }
                let rhs = DVector::from_iterator(k, normals.iter().map(|ni| ni.dot(&hp)));
                let schur = s_mat
                    .clone()
                    .cholesky()
                    .or_else(|| (s_mat + DMatrix::identity(k, k) * 1e-12).cholesky())
                    .ok_or(QpError::NotPositiveDefinite)?;
                let r = schur.solve(&rhs);
                let mut d = hp.clone();
                for j in 0..k {
                    d.axpy(-r[j], &hinv_n[j], 1.0);
                }
                (r, d)
            };

            let kappa = n_p.dot(&d);
            let dependent = kappa <= 1e-12 * kappa_free;

            // Partial step: first active multiplier driven to zero.
            let mut t1 = f64::INFINITY;
            let mut drop_idx: Option<usize> = None;
            for j in 0..active.len() {
                if r[j] > 1e-14 {
                    let t = lam[j] / r[j];
                    if t < t1 {
                        t1 = t;
                        drop_idx = Some(j);
                    }
                }
            }
            // Full step: candidate constraint becomes satisfied.
            let t2 = if dependent { f64::INFINITY } else { -s_p / kappa };

            if t1.is_infinite() && t2.is_infinite() {
                return Ok(finish(z, active, lam, QpStatus::Infeasible, iterations));
            }
            let t = t1.min(t2);

            for j in 0..active.len() {
                lam[j] -= t * r[j];
            }
            lam_p += t;
            if !dependent {
                z.axpy(t, &d, 1.0);
                s_p += t * kappa;
            }

            if t2 <= t1 {
                active.push(cand);
                lam.push(lam_p);
                hinv_n.push(hp);
                continue 'outer;
            }

            let j = drop_idx.expect("finite partial step implies a drop index");
            active.remove(j);
            lam.remove(j);
            hinv_n.remove(j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn unit_problem(n: usize, rows: Vec<ConstraintRow>) -> QpProblem {
        QpProblem {
            hessian: DMatrix::identity(n, n) * 2.0,
            gradient: DVector::zeros(n),
            rows,
        }
    }

    fn row(coeffs: &[f64], lower: f64, upper: f64) -> ConstraintRow {
        ConstraintRow {
            coeffs: DVector::from_row_slice(coeffs),
            lower,
            upper,
        }
    }

    #[test]
    fn projection_onto_hyperplane() {
        // min ‖z‖² s.t. z₁ = 1 in R³ → (1, 0, 0)
        let p = unit_problem(3, vec![row(&[1.0, 0.0, 0.0], 1.0, 1.0)]);
        let sol = solve(&p, 1e-10, 100).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.z[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(sol.z[1], 0.0, epsilon = 1e-9);
        assert_relative_eq!(sol.z[2], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn nearest_point_in_box() {
        // min ‖z‖² s.t. 2 ≤ z₁ ≤ 3 → (2, 0, 0)
        let p = unit_problem(3, vec![row(&[1.0, 0.0, 0.0], 2.0, 3.0)]);
        let sol = solve(&p, 1e-10, 100).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.z[0], 2.0, epsilon = 1e-9);
        assert_relative_eq!(sol.z[1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn shifted_target_with_sum_constraint() {
        // min (z−c)ᵀ(z−c) s.t. 1ᵀz = 0 with c = (1, −3) → (2, −2) by hand KKT:
        // stationarity 2(z−c) = λ1 and feasibility give λ = 2.
        let c = DVector::from_row_slice(&[1.0, -3.0]);
        let p = QpProblem {
            hessian: DMatrix::identity(2, 2) * 2.0,
            gradient: -2.0 * &c,
            rows: vec![row(&[1.0, 1.0], 0.0, 0.0)],
        };
        let sol = solve(&p, 1e-10, 100).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.z[0], 2.0, epsilon = 1e-9);
        assert_relative_eq!(sol.z[1], -2.0, epsilon = 1e-9);
        let res = verify_kkt(&p, &sol).unwrap();
        assert!(res.stationarity < 1e-8);
        assert!(res.primal < 1e-8);
        assert!(res.complementarity < 1e-8);
    }

    #[test]
    fn kkt_detects_perturbation() {
        let p = unit_problem(3, vec![row(&[1.0, 0.0, 0.0], 1.0, 1.0)]);
        let mut sol = solve(&p, 1e-10, 100).unwrap();
        sol.z[0] += 1e-3;
        let res = verify_kkt(&p, &sol).unwrap();
        assert_relative_eq!(res.primal, 1e-3, epsilon = 1e-9);
    }

    #[test]
    fn unconstrained_stationarity_zero() {
        let p = QpProblem {
            hessian: DMatrix::identity(2, 2) * 4.0,
            gradient: DVector::from_row_slice(&[1.0, -2.0]),
            rows: vec![],
        };
        let sol = solve(&p, 1e-10, 100).unwrap();
        let res = verify_kkt(&p, &sol).unwrap();
        assert!(res.stationarity < 1e-12);
        assert!(res.complementarity < 1e-12);
    }

    #[test]
    fn contradictory_hard_rows_are_infeasible() {
        let p = unit_problem(
            2,
            vec![row(&[1.0, 0.0], 1.0, 2.0), row(&[1.0, 0.0], -2.0, -1.0)],
        );
        let sol = solve(&p, 1e-10, 100).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn deterministic_bitwise() {
        let p = unit_problem(
            4,
            vec![
                row(&[1.0, 1.0, 0.0, 0.0], 1.0, f64::INFINITY),
                row(&[0.0, 1.0, -1.0, 0.5], -0.5, 0.5),
                row(&[0.3, 0.0, 0.0, 1.0], 0.2, 0.2),
            ],
        );
        let a = solve(&p, 1e-10, 100).unwrap();
        let b = solve(&p, 1e-10, 100).unwrap();
        assert_eq!(a.z.as_slice(), b.z.as_slice());
        assert_eq!(a.active_set, b.active_set);
    }

    #[test]
    fn asymmetric_hessian_rejected() {
        let mut h = DMatrix::identity(2, 2);
        h[(0, 1)] = 1e-3;
        let p = QpProblem {
            hessian: h,
            gradient: DVector::zeros(2),
            rows: vec![],
        };
        assert!(matches!(solve(&p, 1e-10, 10), Err(QpError::NotSymmetric(_))));
    }
}
