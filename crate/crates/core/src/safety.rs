//! Barrier-based safety constraints.
//!
//! Every safe set is described by a scalar function `h(q) ≥ 0` (a barrier).
//! Constraining the velocity so that `ḣ ≥ −φ·h` with `φ > 0` keeps the set
//! forward invariant: on the boundary (`h = 0`) motion that decreases `h` is
//! forbidden, while deep inside the set the bound is inactive. Four families
//! are provided:
//!
//! * joint position limits — one bilateral row per position-limited joint;
//! * joint velocity limits — direct bounds on the decision vector;
//! * virtual walls — plane distance for monitored body points;
//! * self-collision avoidance — point-to-point and point-to-capsule
//!   distances between robot parts.
//!
//! Row direction conventions are chosen so that motion along the row
//! gradient increases the barrier.

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::hierarchy::TaskConstraint;
use crate::model::{is_free_bound, JointState, RobotModel, INFINITE_BOUND};

#[derive(Debug, Error)]
pub enum SafetyError {
    #[error("virtual wall `{0}` has collinear definition points")]
    CollinearWall(String),
    #[error("capsule segment has zero length")]
    ZeroLengthSegment,
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Linear extended-class-K gains for the two sides of a position limit.
#[derive(Debug, Clone, Copy)]
pub struct CbfGains {
    pub lower: f64,
    pub upper: f64,
}

impl CbfGains {
    pub fn symmetric(gain: f64) -> Self {
        Self {
            lower: gain,
            upper: gain,
        }
    }
}

/// A plane that monitored body points must keep a minimum distance from.
#[derive(Debug, Clone)]
pub struct VirtualWall {
    pub name: String,
    /// Three non-collinear points on the plane; the normal is
    /// `(p2−p1)×(p3−p1)` normalized, and the safe side is along the normal.
    pub points: [Vector3<f64>; 3],
    pub threshold: f64,
    pub gain: f64,
    /// Indices into the model's body-point list.
    pub monitored: Vec<usize>,
}

impl VirtualWall {
    pub fn normal(&self) -> Result<Vector3<f64>, SafetyError> {
        let n = (self.points[1] - self.points[0]).cross(&(self.points[2] - self.points[0]));
        if n.norm() <= 1e-9 {
            return Err(SafetyError::CollinearWall(self.name.clone()));
        }
        Ok(n.normalize())
    }
}

/// What a monitored point must stay away from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Obstacle {
    /// Another body point (index into the model's point list).
    Point(usize),
    /// A capsule (index into the model's capsule list).
    Capsule(usize),
}

#[derive(Debug, Clone)]
pub struct CollisionPair {
    /// Monitored body point (index into the model's point list).
    pub point: usize,
    pub obstacle: Obstacle,
    pub threshold: f64,
    pub gain: f64,
}

impl CollisionPair {
    pub fn label(&self, model: &RobotModel) -> String {
        let a = &model.points()[self.point].name;
        match self.obstacle {
            Obstacle::Point(p) => format!("sc_{a}_{}", model.points()[p].name),
            Obstacle::Capsule(c) => format!("sc_{a}_{}", model.capsules()[c].name),
        }
    }
}

/// A barrier value sampled for logging: the label matches the CSV column.
#[derive(Debug, Clone)]
pub struct Barrier {
    pub label: String,
    pub value: f64,
}

/// Closest point on the segment `a..b` to `p`, and the distance to the
/// capsule of the given radius around the segment (floored at zero).
pub fn segment_point_distance(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    radius: f64,
) -> Result<(Vector3<f64>, f64), SafetyError> {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 <= 1e-18 {
        return Err(SafetyError::ZeroLengthSegment);
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    let closest = a + ab * t;
    let distance = ((p - closest).norm() - radius).max(0.0);
    Ok((closest, distance))
}

/// Position-limit rows: `−φ̲(q−q̲) ≤ q̇ ≤ φ̄(q̄−q)` for every state component
/// with a finite limit and a decision slot (base x and y have neither).
/// The base heading row acts on the yaw-rate column.
pub fn joint_position_limits(
    model: &RobotModel,
    state: &JointState,
    gains: &CbfGains,
    slack_weight: f64,
) -> TaskConstraint {
    let n_u = model.decision_size();
    let mut rows: Vec<(usize, f64, f64)> = Vec::new();
    for i in 0..model.state_size() {
        let lo_lim = model.limits.pos_lower[i];
        let hi_lim = model.limits.pos_upper[i];
        if is_free_bound(lo_lim) && is_free_bound(hi_lim) {
            continue;
        }
        let Some(slot) = model.decision_slot_for_state(i) else {
            continue;
        };
        let q = state.q[i];
        let mut lo = -INFINITE_BOUND;
        let mut hi = INFINITE_BOUND;
        if !is_free_bound(lo_lim) {
            lo = -gains.lower * (q - lo_lim);
        }
        if !is_free_bound(hi_lim) {
            hi = gains.upper * (hi_lim - q);
        }
        rows.push((slot, lo.min(hi), hi));
    }
    let m = rows.len();
    let mut jacobian = DMatrix::zeros(m, n_u);
    let mut lower = DVector::zeros(m);
    let mut upper = DVector::zeros(m);
    for (r, (slot, lo, hi)) in rows.iter().enumerate() {
        jacobian[(r, *slot)] = 1.0;
        lower[r] = *lo;
        upper[r] = *hi;
    }
    TaskConstraint {
        jacobian,
        lower,
        upper,
        slack_weight: DVector::from_element(m, slack_weight),
        label: "joint_position_limits".into(),
    }
}

/// Number of rows [`joint_position_limits`] emits for this model.
pub fn position_limit_row_count(model: &RobotModel) -> usize {
    (0..model.state_size())
        .filter(|&i| {
            !(is_free_bound(model.limits.pos_lower[i]) && is_free_bound(model.limits.pos_upper[i]))
                && model.decision_slot_for_state(i).is_some()
        })
        .count()
}

/// Barrier values (distance to the nearer position limit) per emitted row.
pub fn position_limit_barriers(model: &RobotModel, state: &JointState) -> Vec<Barrier> {
    let mut barriers = Vec::new();
    for i in 0..model.state_size() {
        let lo = model.limits.pos_lower[i];
        let hi = model.limits.pos_upper[i];
        if is_free_bound(lo) && is_free_bound(hi) {
            continue;
        }
        if model.decision_slot_for_state(i).is_none() {
            continue;
        }
        let q = state.q[i];
        let mut h = f64::INFINITY;
        if !is_free_bound(lo) {
            h = h.min(q - lo);
        }
        if !is_free_bound(hi) {
            h = h.min(hi - q);
        }
        barriers.push(Barrier {
            label: format!("jp_{}", model.state_component_name(i)),
            value: h,
        });
    }
    barriers
}

/// Velocity-limit rows over the whole decision vector. `overrides`, when
/// given, are intersected with the model limits component by component.
pub fn joint_velocity_limits(
    model: &RobotModel,
    overrides: Option<(&DVector<f64>, &DVector<f64>)>,
    slack_weight: f64,
) -> TaskConstraint {
    let n_u = model.decision_size();
    let mut lower = model.limits.vel_lower.clone();
    let mut upper = model.limits.vel_upper.clone();
    if let Some((lo, hi)) = overrides {
        for i in 0..n_u {
            lower[i] = lower[i].max(lo[i]);
            upper[i] = upper[i].min(hi[i]);
        }
    }
    TaskConstraint {
        jacobian: DMatrix::identity(n_u, n_u),
        lower,
        upper,
        slack_weight: DVector::from_element(n_u, slack_weight),
        label: "joint_velocity_limits".into(),
    }
}

/// One row per monitored point: `n̂ᵀ J_p q̇ ≥ −φ (σ − σ̲)` with σ the signed
/// plane distance along the wall normal.
pub fn virtual_wall(
    model: &RobotModel,
    state: &JointState,
    wall: &VirtualWall,
    slack_weight: f64,
) -> Result<TaskConstraint, SafetyError> {
    let tf = model.joint_transforms(&state.q);
    virtual_wall_cached(model, &tf, &state.q, wall, slack_weight)
}

pub(crate) fn virtual_wall_cached(
    model: &RobotModel,
    tf: &[nalgebra::Isometry3<f64>],
    q: &DVector<f64>,
    wall: &VirtualWall,
    slack_weight: f64,
) -> Result<TaskConstraint, SafetyError> {
    let normal = wall.normal()?;
    let n_u = model.decision_size();
    let m = wall.monitored.len();
    let mut jacobian = DMatrix::zeros(m, n_u);
    let mut lower = DVector::zeros(m);
    let mut upper = DVector::from_element(m, INFINITE_BOUND);
    for (r, &point) in wall.monitored.iter().enumerate() {
        let p = model.point_position_cached(tf, point);
        let sigma = normal.dot(&(p - wall.points[0]));
        let h = sigma - wall.threshold;
        let jp = model.point_jacobian_cached(tf, q, point);
        for c in 0..n_u {
            jacobian[(r, c)] = normal.x * jp[(0, c)] + normal.y * jp[(1, c)] + normal.z * jp[(2, c)];
        }
        lower[r] = -wall.gain * h;
        upper[r] = INFINITE_BOUND;
    }
    Ok(TaskConstraint {
        jacobian,
        lower,
        upper,
        slack_weight: DVector::from_element(m, slack_weight),
        label: format!("virtual_wall_{}", wall.name),
    })
}

/// Wall barrier values `σ − σ̲` per monitored point.
pub fn wall_barriers(
    model: &RobotModel,
    state: &JointState,
    wall: &VirtualWall,
) -> Result<Vec<Barrier>, SafetyError> {
    let tf = model.joint_transforms(&state.q);
    let normal = wall.normal()?;
    Ok(wall
        .monitored
        .iter()
        .map(|&point| {
            let p = model.point_position_cached(&tf, point);
            Barrier {
                label: format!("vw_{}_{}", wall.name, model.points()[point].name),
                value: normal.dot(&(p - wall.points[0])) - wall.threshold,
            }
        })
        .collect())
}

/// Geometry of one collision pair at the current state.
struct PairGeometry {
    /// Unit vector from the obstacle point towards the monitored point.
    normal: Vector3<f64>,
    /// Separation σ (point distance, capsule radius already subtracted).
    sigma: f64,
    obstacle_world: Vector3<f64>,
    obstacle_frame: usize,
}

fn pair_geometry(
    model: &RobotModel,
    tf: &[nalgebra::Isometry3<f64>],
    pair: &CollisionPair,
) -> Result<Option<PairGeometry>, SafetyError> {
    let p_j = model.point_position_cached(tf, pair.point);
    let (p_l, frame_l, radius) = match pair.obstacle {
        Obstacle::Point(idx) => (
            model.point_position_cached(tf, idx),
            model.points()[idx].frame,
            0.0,
        ),
        Obstacle::Capsule(idx) => {
            let cap = &model.capsules()[idx];
            let a = (tf[cap.frame] * nalgebra::Point3::from(cap.a)).coords;
            let b = (tf[cap.frame] * nalgebra::Point3::from(cap.b)).coords;
            let ab = b - a;
            let t = ((p_j - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
            (a + ab * t, cap.frame, cap.radius)
        }
    };
    let diff = p_j - p_l;
    let dist = diff.norm();
    if dist < 1e-6 {
        return Ok(None);
    }
    Ok(Some(PairGeometry {
        normal: diff / dist,
        sigma: dist - radius,
        obstacle_world: p_l,
        obstacle_frame: frame_l,
    }))
}

/// One row per collision pair: `n̂ᵀ(J_pj − J_pl) q̇ ≥ −φ (σ − σ̲)`.
///
/// Pairs closer than 1e-6 m have an undefined gradient; their row is skipped
/// and the pair label is reported back for logging.
pub fn self_collision(
    model: &RobotModel,
    state: &JointState,
    pairs: &[CollisionPair],
    slack_weight: f64,
) -> Result<(TaskConstraint, Vec<String>), SafetyError> {
    let tf = model.joint_transforms(&state.q);
    self_collision_cached(model, &tf, &state.q, pairs, slack_weight)
}

pub(crate) fn self_collision_cached(
    model: &RobotModel,
    tf: &[nalgebra::Isometry3<f64>],
    q: &DVector<f64>,
    pairs: &[CollisionPair],
    slack_weight: f64,
) -> Result<(TaskConstraint, Vec<String>), SafetyError> {
    let n_u = model.decision_size();
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    let mut degenerate = Vec::new();
    for pair in pairs {
        let Some(geo) = pair_geometry(model, tf, pair)? else {
            degenerate.push(pair.label(model));
            continue;
        };
        let j_point = model.point_jacobian_cached(tf, q, pair.point);
        let j_obstacle = model.jacobian_at_cached(tf, q, geo.obstacle_frame, &geo.obstacle_world);
        let mut coeffs = DVector::zeros(n_u);
        for c in 0..n_u {
            coeffs[c] = geo.normal.x * (j_point[(0, c)] - j_obstacle[(0, c)])
                + geo.normal.y * (j_point[(1, c)] - j_obstacle[(1, c)])
                + geo.normal.z * (j_point[(2, c)] - j_obstacle[(2, c)]);
        }
        let h = geo.sigma - pair.threshold;
        rows.push((coeffs, -pair.gain * h));
    }
    let m = rows.len();
    let mut jacobian = DMatrix::zeros(m, n_u);
    let mut lower = DVector::zeros(m);
    for (r, (coeffs, lo)) in rows.iter().enumerate() {
        jacobian.row_mut(r).copy_from(&coeffs.transpose());
        lower[r] = *lo;
    }
    Ok((
        TaskConstraint {
            jacobian,
            lower,
            upper: DVector::from_element(m, INFINITE_BOUND),
            slack_weight: DVector::from_element(m, slack_weight),
            label: "self_collision".into(),
        },
        degenerate,
    ))
}

/// Collision barrier values `σ − σ̲` per pair (degenerate pairs report 0).
pub fn collision_barriers(
    model: &RobotModel,
    state: &JointState,
    pairs: &[CollisionPair],
) -> Result<Vec<Barrier>, SafetyError> {
    let tf = model.joint_transforms(&state.q);
    pairs
        .iter()
        .map(|pair| {
            let value = match pair_geometry(model, &tf, pair)? {
                Some(geo) => geo.sigma - pair.threshold,
                None => 0.0,
            };
            Ok(Barrier {
                label: pair.label(model),
                value,
            })
        })
        .collect()
}

/// Full per-tick safety configuration.
#[derive(Debug, Clone)]
pub struct SafetyConfig {
    pub position_gains: CbfGains,
    pub velocity_overrides: Option<(DVector<f64>, DVector<f64>)>,
    pub walls: Vec<VirtualWall>,
    pub pairs: Vec<CollisionPair>,
    pub slack_weight: f64,
}

/// The safety constraint set and its barrier samples for one tick.
#[derive(Debug, Clone)]
pub struct SafetyStack {
    pub constraints: Vec<TaskConstraint>,
    pub barriers: Vec<Barrier>,
    pub degenerate: Vec<String>,
}

impl SafetyStack {
    pub fn row_count(&self) -> usize {
        self.constraints.iter().map(|c| c.rows()).sum()
    }
}

/// Build the complete safety level: position limits, velocity limits, every
/// wall, then self-collision rows, in that fixed order.
pub fn build_stack(
    model: &RobotModel,
    state: &JointState,
    cfg: &SafetyConfig,
) -> Result<SafetyStack, SafetyError> {
    let tf = model.joint_transforms(&state.q);
    let mut constraints = Vec::with_capacity(2 + cfg.walls.len() + 1);
    constraints.push(joint_position_limits(
        model,
        state,
        &cfg.position_gains,
        cfg.slack_weight,
    ));
    constraints.push(joint_velocity_limits(
        model,
        cfg.velocity_overrides.as_ref().map(|(lo, hi)| (lo, hi)),
        cfg.slack_weight,
    ));
    for wall in &cfg.walls {
        constraints.push(virtual_wall_cached(model, &tf, &state.q, wall, cfg.slack_weight)?);
    }
    let (sc, degenerate) =
        self_collision_cached(model, &tf, &state.q, &cfg.pairs, cfg.slack_weight)?;
    constraints.push(sc);

    let mut barriers = position_limit_barriers(model, state);
    for wall in &cfg.walls {
        barriers.extend(wall_barriers(model, state, wall)?);
    }
    barriers.extend(collision_barriers(model, state, &cfg.pairs)?);

    Ok(SafetyStack {
        constraints,
        barriers,
        degenerate,
    })
}

/// Nominal scalar row count of the stack (no degenerate pairs skipped).
pub fn nominal_row_count(model: &RobotModel, cfg: &SafetyConfig) -> usize {
    position_limit_row_count(model)
        + model.decision_size()
        + cfg.walls.iter().map(|w| w.monitored.len()).sum::<usize>()
        + cfg.pairs.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn segment_projection_cases() {
        let a = Vector3::new(0.0, 0.0, 0.0);
        let b = Vector3::new(0.0, 0.0, 1.0);
        // Perpendicular foot.
        let (cp, d) = segment_point_distance(&Vector3::new(0.0, 0.4, 0.5), &a, &b, 0.1).unwrap();
        assert_relative_eq!(cp, Vector3::new(0.0, 0.0, 0.5), epsilon = 1e-12);
        assert_relative_eq!(d, 0.3, epsilon = 1e-12);
        // Beyond an endpoint: clamps.
        let (cp, d) = segment_point_distance(&Vector3::new(0.0, 0.0, 2.0), &a, &b, 0.0).unwrap();
        assert_relative_eq!(cp, b, epsilon = 1e-12);
        assert_relative_eq!(d, 1.0, epsilon = 1e-12);
        // Zero-length segment errors.
        assert!(segment_point_distance(&a, &b, &b, 0.0).is_err());
    }

    #[test]
    fn position_limit_bound_values() {
        // q = 1.0, upper limit 1.44, gain 10 → upper velocity bound 4.4.
        let q = 1.0f64;
        let hi = 10.0 * (1.44 - q);
        assert_relative_eq!(hi, 4.4, epsilon = 1e-12);
        // At the limit the bound closes to zero.
        assert_relative_eq!(10.0 * (1.44 - 1.44), 0.0);
    }

    #[test]
    fn wall_row_hand_example() {
        // Plane z = 0 from three points, point at z = 0.5, threshold 0.3,
        // gain 5 → h = 0.2, lower bound −1.0.
        let wall_points = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let n = (wall_points[1] - wall_points[0])
            .cross(&(wall_points[2] - wall_points[0]))
            .normalize();
        assert_relative_eq!(n, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
        let p = Vector3::new(0.3, -0.2, 0.5);
        let h = n.dot(&(p - wall_points[0])) - 0.3;
        assert_relative_eq!(h, 0.2, epsilon = 1e-12);
        assert_relative_eq!(-5.0 * h, -1.0, epsilon = 1e-12);
        // Far away the bound is large and inactive.
        let p_far = Vector3::new(0.0, 0.0, 10.3);
        let h_far = n.dot(&(p_far - wall_points[0])) - 0.3;
        assert_relative_eq!(-5.0 * h_far, -50.0, epsilon = 1e-12);
    }

    #[test]
    fn collision_hand_example() {
        // Points 0.5 m apart, threshold 0.2, gain 10 → σ = 0.5, h = 0.3,
        // lower bound −3.0.
        let p_j = Vector3::new(0.0, 0.0, 1.0);
        let p_l = Vector3::new(0.0, 0.0, 0.5);
        let sigma = (p_j - p_l).norm();
        assert_relative_eq!(sigma, 0.5, epsilon = 1e-12);
        let h = sigma - 0.2;
        assert_relative_eq!(-10.0 * h, -3.0, epsilon = 1e-12);
        // Exactly at the head threshold the bound closes.
        assert_relative_eq!(-10.0 * (0.5 - 0.5), 0.0);
    }
}
