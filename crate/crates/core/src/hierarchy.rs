//! Lexicographic task hierarchy solved as a cascade of QPs.
//!
//! Each priority level holds a set of [`TaskConstraint`]s. Stage `i` of the
//! cascade minimizes
//!
//! ```text
//!     1/2 q̇ᵀ (ε I) q̇ + 1/2 wᵢᵀ diag(slack_weight) wᵢ
//! ```
//!
//! subject to its own rows `lo ≤ J q̇ + wᵢ ≤ hi` (slack columns free), the
//! rows of every higher level with slacks frozen at their optima (absorbed
//! into the bounds as `lo − w* ≤ J q̇ ≤ hi − w*`), and any hard velocity
//! boxes. The decision vector of the last stage yields the commanded joint
//! velocities.
//!
//! Slack weights dominate the regularization by several orders of magnitude,
//! so feasible equality tasks are met to solver tolerance while conflicting
//! ones degrade gracefully instead of turning the stage infeasible.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{is_free_bound, INFINITE_BOUND};
use crate::qpcore::{self, ConstraintRow, QpProblem, QpStatus};

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("hierarchy has no levels")]
    Empty,
    #[error("level index {0} out of range")]
    LevelIndex(usize),
    #[error("constraint `{label}` has {got} columns, expected {expected}")]
    ColumnMismatch {
        label: String,
        got: usize,
        expected: usize,
    },
    #[error("constraint `{label}` violates its bound or weight invariants")]
    BadConstraint { label: String },
    #[error("frozen slacks missing for level {0}")]
    MissingFrozen(usize),
    #[error("stage {level} failed with status {status:?} (worst row `{label}`)")]
    StageFailed {
        level: usize,
        status: QpStatus,
        label: String,
    },
    #[error(transparent)]
    Qp(#[from] qpcore::QpError),
}

/// One prioritized block of constraint rows: `lo ≤ J q̇ + w ≤ hi` with a
/// positive quadratic penalty on the slack `w`.
#[derive(Debug, Clone)]
pub struct TaskConstraint {
    pub jacobian: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub slack_weight: DVector<f64>,
    pub label: String,
}

impl TaskConstraint {
    pub fn equality(
        jacobian: DMatrix<f64>,
        target: DVector<f64>,
        slack_weight: f64,
        label: impl Into<String>,
    ) -> Self {
        let m = jacobian.nrows();
        Self {
            jacobian,
            lower: target.clone(),
            upper: target,
            slack_weight: DVector::from_element(m, slack_weight),
            label: label.into(),
        }
    }

    pub fn rows(&self) -> usize {
        self.jacobian.nrows()
    }

    fn validate(&self, n_u: usize) -> Result<(), HierarchyError> {
        if self.jacobian.ncols() != n_u {
            return Err(HierarchyError::ColumnMismatch {
                label: self.label.clone(),
                got: self.jacobian.ncols(),
                expected: n_u,
            });
        }
        let m = self.rows();
        if self.lower.len() != m || self.upper.len() != m || self.slack_weight.len() != m {
            return Err(HierarchyError::BadConstraint {
                label: self.label.clone(),
            });
        }
        for r in 0..m {
            if self.lower[r] > self.upper[r] || self.slack_weight[r] <= 0.0 {
                return Err(HierarchyError::BadConstraint {
                    label: self.label.clone(),
                });
            }
        }
        Ok(())
    }
}

/// A full prioritized hierarchy for one control tick.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub decision_size: usize,
    /// Priority levels, highest first. Each level is a list of constraints.
    pub levels: Vec<Vec<TaskConstraint>>,
    /// Diagonal weight on q̇ in every stage; must be positive.
    pub regularization: f64,
    /// Hard per-component bounds on q̇ applied at every stage. Several boxes
    /// may be given; their intersection is enforced (and may be empty).
    pub velocity_boxes: Vec<(DVector<f64>, DVector<f64>)>,
}

impl Hierarchy {
    pub fn new(decision_size: usize, regularization: f64) -> Self {
        Self {
            decision_size,
            levels: Vec::new(),
            regularization,
            velocity_boxes: Vec::new(),
        }
    }

    fn validate(&self) -> Result<(), HierarchyError> {
        if self.levels.is_empty() {
            return Err(HierarchyError::Empty);
        }
        for level in &self.levels {
            for c in level {
                c.validate(self.decision_size)?;
            }
        }
        Ok(())
    }

    fn level_rows(&self, level: usize) -> usize {
        self.levels[level].iter().map(|c| c.rows()).sum()
    }
}

/// Result of solving the cascade.
#[derive(Debug, Clone)]
pub struct HqpSolution {
    pub velocities: DVector<f64>,
    /// Optimal slack vector per level, stacked over the level's constraints.
    pub slacks: Vec<DVector<f64>>,
    pub slack_norms: Vec<f64>,
    pub statuses: Vec<QpStatus>,
    /// Wall-clock time of the whole cascade, seconds.
    pub solve_time: f64,
}

const STAGE_TOLERANCE: f64 = 1e-8;

fn clamp_bound(b: f64) -> f64 {
    b.clamp(-INFINITE_BOUND, INFINITE_BOUND)
}

/// Build the QP for one stage. Decision vector: (q̇, w_level). Hard rows come
/// from the velocity boxes and all higher levels with slacks frozen.
pub fn stage_problem(
    h: &Hierarchy,
    level: usize,
    frozen: &[DVector<f64>],
) -> Result<QpProblem, HierarchyError> {
    h.validate()?;
    if level >= h.levels.len() {
        return Err(HierarchyError::LevelIndex(level));
    }
    if frozen.len() < level {
        return Err(HierarchyError::MissingFrozen(level));
    }
    let n_u = h.decision_size;
    let m = h.level_rows(level);
    let dim = n_u + m;

    let mut hessian = DMatrix::zeros(dim, dim);
    for i in 0..n_u {
        hessian[(i, i)] = h.regularization;
    }
    let mut slack_col = n_u;
    for c in &h.levels[level] {
        for r in 0..c.rows() {
            hessian[(slack_col, slack_col)] = c.slack_weight[r];
            slack_col += 1;
        }
    }

    let mut rows = Vec::new();
    for (lo, hi) in &h.velocity_boxes {
        for i in 0..n_u {
            if is_free_bound(lo[i]) && is_free_bound(hi[i]) {
                continue;
            }
            let mut coeffs = DVector::zeros(dim);
            coeffs[i] = 1.0;
            rows.push(ConstraintRow {
                coeffs,
                lower: clamp_bound(lo[i]),
                upper: clamp_bound(hi[i]),
            });
        }
    }
    for (k, level_k) in h.levels.iter().enumerate().take(level) {
        let w = &frozen[k];
        let mut offset = 0;
        for c in level_k {
            for r in 0..c.rows() {
                let mut coeffs = DVector::zeros(dim);
                for col in 0..n_u {
                    coeffs[col] = c.jacobian[(r, col)];
                }
                let ws = w[offset + r];
                let lower = if is_free_bound(c.lower[r]) {
                    -INFINITE_BOUND
                } else {
                    clamp_bound(c.lower[r] - ws)
                };
                let upper = if is_free_bound(c.upper[r]) {
                    INFINITE_BOUND
                } else {
                    clamp_bound(c.upper[r] - ws)
                };
                rows.push(ConstraintRow {
                    coeffs,
                    lower,
                    upper,
                });
            }
            offset += c.rows();
        }
    }
    let mut slack_col = n_u;
    for c in &h.levels[level] {
        for r in 0..c.rows() {
            let mut coeffs = DVector::zeros(dim);
            for col in 0..n_u {
                coeffs[col] = c.jacobian[(r, col)];
            }
            coeffs[slack_col] = 1.0;
            rows.push(ConstraintRow {
                coeffs,
                lower: clamp_bound(c.lower[r]),
                upper: clamp_bound(c.upper[r]),
            });
            slack_col += 1;
        }
    }

    Ok(QpProblem {
        hessian,
        gradient: DVector::zeros(dim),
        rows,
    })
}

/// Label of the most violated row of a stage, for diagnostics on failure.
fn worst_row_label(h: &Hierarchy, level: usize, problem: &QpProblem, z: &DVector<f64>) -> String {
    let n_box: usize = h
        .velocity_boxes
        .iter()
        .map(|(lo, hi)| {
            (0..h.decision_size)
                .filter(|&i| !(is_free_bound(lo[i]) && is_free_bound(hi[i])))
                .count()
        })
        .sum();
    let mut labels = vec!["velocity_box".to_string(); n_box];
    for level_k in h.levels.iter().take(level + 1) {
        for c in level_k {
            for _ in 0..c.rows() {
                labels.push(c.label.clone());
            }
        }
    }
    let mut worst = (0usize, 0.0f64);
    for (i, row) in problem.rows.iter().enumerate() {
        let v = row.coeffs.dot(z);
        let mut viol: f64 = 0.0;
        if !is_free_bound(row.lower) {
            viol = viol.max(row.lower - v);
        }
        if !is_free_bound(row.upper) {
            viol = viol.max(v - row.upper);
        }
        if viol > worst.1 {
            worst = (i, viol);
        }
    }
    labels
        .get(worst.0)
        .cloned()
        .unwrap_or_else(|| "unknown".into())
}

/// Solve the full cascade, freezing each level's optimal slacks before
/// descending to the next.
pub fn solve_cascade(h: &Hierarchy) -> Result<HqpSolution, HierarchyError> {
    h.validate()?;
    let start = Instant::now();
    let n_u = h.decision_size;
    let mut frozen: Vec<DVector<f64>> = Vec::with_capacity(h.levels.len());
    let mut statuses = Vec::with_capacity(h.levels.len());
    let mut velocities = DVector::zeros(n_u);

    for level in 0..h.levels.len() {
        let problem = stage_problem(h, level, &frozen)?;
        let max_iter = 200 + 20 * problem.rows.len();
        let sol = qpcore::solve(&problem, STAGE_TOLERANCE, max_iter)?;
        statuses.push(sol.status);
        if sol.status != QpStatus::Optimal {
            let label = worst_row_label(h, level, &problem, &sol.z);
            return Err(HierarchyError::StageFailed {
                level,
                status: sol.status,
                label,
            });
        }
        let m = h.level_rows(level);
        velocities = sol.z.rows(0, n_u).into_owned();
        frozen.push(sol.z.rows(n_u, m).into_owned());
    }

    let slack_norms = frozen.iter().map(|w| w.norm()).collect();
    Ok(HqpSolution {
        velocities,
        slacks: frozen,
        slack_norms,
        statuses,
        solve_time: start.elapsed().as_secs_f64(),
    })
}

/// Classical null-space projection resolution for equality-only hierarchies;
/// serves as an independent reference for the cascade.
///
/// Accumulates `q̇ᵢ = q̇ᵢ₋₁ + (Jᵢ Pᵢ₋₁)⁺ (bᵢ − Jᵢ q̇ᵢ₋₁)` with the augmented
/// projector recursion `Pᵢ = Pᵢ₋₁ − (Jᵢ Pᵢ₋₁)⁺ (Jᵢ Pᵢ₋₁)`. Pseudoinverses
/// are SVD-based with singular values below 1e-8 treated as zero.
pub fn nullspace_reference(equality_levels: &[(DMatrix<f64>, DVector<f64>)]) -> DVector<f64> {
    const SV_THRESHOLD: f64 = 1e-8;
    let n_u = equality_levels
        .first()
        .map(|(j, _)| j.ncols())
        .unwrap_or(0);
    let mut q = DVector::zeros(n_u);
    let mut projector = DMatrix::identity(n_u, n_u);
    for (jac, target) in equality_levels {
        let jp = jac * &projector;
        let pinv = jp
            .clone()
            .pseudo_inverse(SV_THRESHOLD)
            .unwrap_or_else(|_| DMatrix::zeros(jp.ncols(), jp.nrows()));
        let residual = target - jac * &q;
        q += &pinv * residual;
        projector -= &pinv * jp;
    }
    q
}

/// Minimal slack a row would need at the given velocities: zero when the row
/// is satisfied, otherwise the signed distance back into the bounds.
pub fn needed_slack(c: &TaskConstraint, velocities: &DVector<f64>) -> DVector<f64> {
    let v = &c.jacobian * velocities;
    DVector::from_fn(c.rows(), |r, _| {
        if !is_free_bound(c.lower[r]) && v[r] < c.lower[r] {
            c.lower[r] - v[r]
        } else if !is_free_bound(c.upper[r]) && v[r] > c.upper[r] {
            c.upper[r] - v[r]
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn eq_task(jac: &[&[f64]], b: &[f64], weight: f64, label: &str) -> TaskConstraint {
        let rows = jac.len();
        let cols = jac[0].len();
        let j = DMatrix::from_fn(rows, cols, |r, c| jac[r][c]);
        TaskConstraint::equality(j, DVector::from_row_slice(b), weight, label)
    }

    #[test]
    fn conflicting_two_level_cascade() {
        let mut h = Hierarchy::new(2, 1e-4);
        h.levels.push(vec![eq_task(&[&[1.0, 0.0]], &[1.0], 1e6, "l1")]);
        h.levels
            .push(vec![eq_task(&[&[1.0, 1.0]], &[0.0], 1e6, "l2")]);
        let sol = solve_cascade(&h).unwrap();
        assert_relative_eq!(sol.velocities[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(sol.velocities[1], -1.0, epsilon = 1e-6);
        assert!(sol.slack_norms[0] < 1e-6);
    }

    #[test]
    fn frozen_level_clamps_lower_priority() {
        let mut h = Hierarchy::new(1, 1e-4);
        h.levels.push(vec![TaskConstraint {
            jacobian: DMatrix::from_row_slice(1, 1, &[1.0]),
            lower: DVector::from_row_slice(&[-0.5]),
            upper: DVector::from_row_slice(&[0.5]),
            slack_weight: DVector::from_row_slice(&[1e6]),
            label: "box".into(),
        }]);
        h.levels.push(vec![eq_task(&[&[1.0]], &[2.0], 1e6, "goal")]);
        let sol = solve_cascade(&h).unwrap();
        assert_relative_eq!(sol.velocities[0], 0.5, epsilon = 1e-6);
        assert_relative_eq!(sol.slack_norms[1], 1.5, epsilon = 1e-5);
    }

    #[test]
    fn empty_single_level_is_zero() {
        let mut h = Hierarchy::new(3, 1e-4);
        h.levels.push(vec![]);
        let sol = solve_cascade(&h).unwrap();
        assert!(sol.velocities.norm() < 1e-12);
    }

    #[test]
    fn stage_problem_shapes() {
        let mut h = Hierarchy::new(2, 1e-4);
        h.levels.push(vec![eq_task(&[&[1.0, 0.0]], &[1.0], 1e6, "l1")]);
        h.levels
            .push(vec![eq_task(&[&[1.0, 1.0]], &[0.0], 1e6, "l2")]);

        let p1 = stage_problem(&h, 0, &[]).unwrap();
        assert_eq!(p1.num_vars(), 3); // q̇ (2) + one slack
        assert_eq!(p1.rows.len(), 1);

        let frozen = vec![DVector::from_row_slice(&[0.0])];
        let p2 = stage_problem(&h, 1, &frozen).unwrap();
        assert_eq!(p2.num_vars(), 3);
        assert_eq!(p2.rows.len(), 2);
        // Hard row from level 1 has no slack column.
        assert_relative_eq!(p2.rows[0].coeffs[2], 0.0);
        assert_relative_eq!(p2.rows[0].lower, 1.0);
        assert_relative_eq!(p2.rows[0].upper, 1.0);
        // Level-2 row carries its slack column.
        assert_relative_eq!(p2.rows[1].coeffs[2], 1.0);
    }

    #[test]
    fn stage_problem_empty_level_has_no_rows() {
        let mut h = Hierarchy::new(2, 1e-4);
        h.levels.push(vec![]);
        let p = stage_problem(&h, 0, &[]).unwrap();
        assert_eq!(p.rows.len(), 0);
        assert_eq!(p.num_vars(), 2);
    }

    #[test]
    fn nullspace_identity_task() {
        let j = DMatrix::identity(3, 3);
        let b = DVector::from_row_slice(&[0.3, -0.2, 0.5]);
        let q = nullspace_reference(&[(j, b.clone())]);
        assert_relative_eq!(q, b, epsilon = 1e-10);
    }

    #[test]
    fn nullspace_orthogonal_tasks_both_exact() {
        let j1 = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let j2 = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 0.0]);
        let q = nullspace_reference(&[
            (j1.clone(), DVector::from_row_slice(&[0.7])),
            (j2.clone(), DVector::from_row_slice(&[-0.4])),
        ]);
        assert_relative_eq!((j1 * &q)[0], 0.7, epsilon = 1e-10);
        assert_relative_eq!((j2 * &q)[0], -0.4, epsilon = 1e-10);
    }

    #[test]
    fn nullspace_matches_cascade_on_conflict() {
        let j1 = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let j2 = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let q = nullspace_reference(&[
            (j1, DVector::from_row_slice(&[1.0])),
            (j2, DVector::from_row_slice(&[0.0])),
        ]);
        assert_relative_eq!(q[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(q[1], -1.0, epsilon = 1e-9);
    }

    #[test]
    fn contradictory_velocity_boxes_fail_the_stage() {
        let mut h = Hierarchy::new(2, 1e-4);
        h.levels.push(vec![]);
        h.velocity_boxes.push((
            DVector::from_row_slice(&[0.2, -INFINITE_BOUND]),
            DVector::from_row_slice(&[0.5, INFINITE_BOUND]),
        ));
        h.velocity_boxes.push((
            DVector::from_row_slice(&[-0.5, -INFINITE_BOUND]),
            DVector::from_row_slice(&[-0.2, INFINITE_BOUND]),
        ));
        match solve_cascade(&h) {
            Err(HierarchyError::StageFailed { level, status, .. }) => {
                assert_eq!(level, 0);
                assert_eq!(status, QpStatus::Infeasible);
            }
            other => panic!("expected stage failure, got {other:?}"),
        }
    }

    #[test]
    fn slack_freeze_consistency() {
        // Conflicting equalities at the top level leave nonzero slacks that
        // re-evaluate exactly at the final velocities.
        let mut h = Hierarchy::new(1, 1e-4);
        h.levels.push(vec![
            eq_task(&[&[1.0]], &[1.0], 1e6, "a"),
            eq_task(&[&[1.0]], &[-1.0], 1e6, "b"),
        ]);
        h.levels.push(vec![eq_task(&[&[1.0]], &[0.3], 1e4, "c")]);
        let sol = solve_cascade(&h).unwrap();
        let residual_a = 1.0 - sol.velocities[0];
        let residual_b = -1.0 - sol.velocities[0];
        assert_relative_eq!(sol.slacks[0][0], residual_a, epsilon = 1e-8);
        assert_relative_eq!(sol.slacks[0][1], residual_b, epsilon = 1e-8);
    }
}
