//! Operational and optimization tasks: admittance trajectory tracking,
//! hand-guiding and preferred joint posture.
//!
//! # Discrete admittance law
//!
//! The end-effectors should exhibit virtual mass–damper–spring dynamics
//! against the measured external wrench `h` (expressed in the world frame,
//! acting *on* the end-effector):
//!
//! ```text
//!     Km (a_d − a) + Kd (v_d − v) + Kp ρ̃ + h = 0
//! ```
//!
//! where `ρ̃` stacks position errors and quaternion-vector orientation errors
//! (desired minus actual). Approximating the acceleration by the backward
//! difference `a = (v − v(t−Ts)) / Ts` and substituting `v = J q̇` gives the
//! velocity-level equality used in the hierarchy:
//!
//! ```text
//!     (Km/Ts + Kd) J q̇ = Km a_d + (Km/Ts) v(t−Ts) + Kd v_d + Kp ρ̃ + h
//! ```
//!
//! The sign of `h` is chosen so that a constant push yields a steady-state
//! displacement along the push, `p − p_d = Kp⁻¹ f`, and a constant pull in
//! hand-guiding mode (`Kp = 0`, zero references) settles at `v = Kd⁻¹ h`.
//!
//! All 12-vectors are ordered `[left linear, left angular, right linear,
//! right angular]`.

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};

use crate::hierarchy::TaskConstraint;
use crate::model::{JointState, ModelError, Pose, RobotModel};

/// Per-end-effector block gains: `diag{k_lin·I₃, k_ang·I₃}`.
#[derive(Debug, Clone, Copy)]
pub struct AdmittanceGains {
    pub mass_lin: f64,
    pub mass_ang: f64,
    pub damping_lin: f64,
    pub damping_ang: f64,
    pub stiffness_lin: f64,
    pub stiffness_ang: f64,
}

/// Virtual mass, damping and stiffness for both end-effectors.
#[derive(Debug, Clone, Copy)]
pub struct AdmittanceParams {
    pub left: AdmittanceGains,
    pub right: AdmittanceGains,
}

impl AdmittanceParams {
    pub fn uniform(gains: AdmittanceGains) -> Self {
        Self {
            left: gains,
            right: gains,
        }
    }

    /// Same parameters with the stiffness dropped to zero (hand-guiding).
    pub fn zero_stiffness(&self) -> Self {
        let mut p = *self;
        p.left.stiffness_lin = 0.0;
        p.left.stiffness_ang = 0.0;
        p.right.stiffness_lin = 0.0;
        p.right.stiffness_ang = 0.0;
        p
    }

    fn diag(&self, pick: impl Fn(&AdmittanceGains) -> (f64, f64)) -> DVector<f64> {
        let mut d = DVector::zeros(12);
        for (ee, gains) in [(0, &self.left), (6, &self.right)] {
            let (lin, ang) = pick(gains);
            for i in 0..3 {
                d[ee + i] = lin;
                d[ee + 3 + i] = ang;
            }
        }
        d
    }

    pub fn mass_diag(&self) -> DVector<f64> {
        self.diag(|g| (g.mass_lin, g.mass_ang))
    }

    pub fn damping_diag(&self) -> DVector<f64> {
        self.diag(|g| (g.damping_lin, g.damping_ang))
    }

    pub fn stiffness_diag(&self) -> DVector<f64> {
        self.diag(|g| (g.stiffness_lin, g.stiffness_ang))
    }
}

/// Desired poses, twists and accelerations for both end-effectors.
#[derive(Debug, Clone)]
pub struct CartesianReference {
    pub poses: [Pose; 2],
    pub velocity: DVector<f64>,
    pub acceleration: DVector<f64>,
}

impl CartesianReference {
    /// Hold the given poses with zero feedforward.
    pub fn hold(left: Pose, right: Pose) -> Self {
        Self {
            poses: [left, right],
            velocity: DVector::zeros(12),
            acceleration: DVector::zeros(12),
        }
    }
}

/// Previous commanded end-effector twist, needed by the backward-difference
/// acceleration. Owned by the control loop and updated once per tick.
#[derive(Debug, Clone)]
pub struct ControllerMemory {
    pub prev_twist: DVector<f64>,
    pub sample_time: f64,
}

impl ControllerMemory {
    /// Initialize from the current measured twist so the first tick sees no
    /// spurious acceleration.
    pub fn new(measured_twist: DVector<f64>, sample_time: f64) -> Self {
        assert!(sample_time > 0.0);
        Self {
            prev_twist: measured_twist,
            sample_time,
        }
    }

    pub fn update(&mut self, commanded_twist: DVector<f64>) {
        self.prev_twist = commanded_twist;
    }
}

/// Orientation error as the vector part of `o_d ∗ o⁻¹`, sign-normalized to
/// the shortest rotation.
pub fn quaternion_error(desired: &UnitQuaternion<f64>, actual: &UnitQuaternion<f64>) -> Vector3<f64> {
    let e = desired * actual.inverse();
    let q = e.quaternion();
    let v = Vector3::new(q.i, q.j, q.k);
    if q.w < 0.0 {
        -v
    } else {
        v
    }
}

/// Stacked pose error `[p̃_l, Q̃_l, p̃_r, Q̃_r]` of the reference against the
/// current end-effector poses.
fn pose_error(reference: &CartesianReference, actual: &[Pose; 2]) -> DVector<f64> {
    let mut e = DVector::zeros(12);
    for ee in 0..2 {
        let p_err = reference.poses[ee].position - actual[ee].position;
        let o_err = quaternion_error(&reference.poses[ee].orientation, &actual[ee].orientation);
        for i in 0..3 {
            e[6 * ee + i] = p_err[i];
            e[6 * ee + 3 + i] = o_err[i];
        }
    }
    e
}

fn current_ee_poses(model: &RobotModel, state: &JointState) -> Result<[Pose; 2], ModelError> {
    Ok([
        model.forward_kinematics(state, "ee_left")?,
        model.forward_kinematics(state, "ee_right")?,
    ])
}

fn admittance_rows(
    model: &RobotModel,
    state: &JointState,
    mem: &ControllerMemory,
    target: &DVector<f64>,
    slack_weight: f64,
    label: &str,
) -> Result<TaskConstraint, ModelError> {
    let jac = model.stacked_dual_arm_jacobian(state)?;
    Ok(TaskConstraint::equality(
        jac,
        target.clone(),
        slack_weight,
        label,
    ))
    .map(|mut c| {
        // Scale rows by (Km/Ts + Kd); done by the caller via `target` and the
        // scale vector to keep the borrow simple.
        let _ = mem;
        c.label = label.to_string();
        c
    })
}

/// Velocity-level admittance equality `J_adm q̇ = b_adm` with
/// `J_adm = (Km/Ts + Kd) J` (diagonal row scaling).
pub fn admittance_constraint(
    model: &RobotModel,
    state: &JointState,
    mem: &ControllerMemory,
    reference: &CartesianReference,
    wrench: &DVector<f64>,
    params: &AdmittanceParams,
    slack_weight: f64,
) -> Result<TaskConstraint, ModelError> {
    let ts = mem.sample_time;
    let mass = params.mass_diag();
    let damping = params.damping_diag();
    let stiffness = params.stiffness_diag();
    let actual = current_ee_poses(model, state)?;
    let rho = pose_error(reference, &actual);

    let mut scale = DVector::zeros(12);
    let mut target = DVector::zeros(12);
    for i in 0..12 {
        scale[i] = mass[i] / ts + damping[i];
        target[i] = mass[i] * reference.acceleration[i]
            + (mass[i] / ts) * mem.prev_twist[i]
            + damping[i] * reference.velocity[i]
            + stiffness[i] * rho[i]
            + wrench[i];
    }

    let mut constraint = admittance_rows(model, state, mem, &target, slack_weight, "admittance")?;
    for r in 0..12 {
        for c in 0..constraint.jacobian.ncols() {
            constraint.jacobian[(r, c)] *= scale[r];
        }
    }
    Ok(constraint)
}

/// Hand-guiding equality: admittance with zero stiffness and zero references,
/// `b = (Km/Ts) v(t−Ts) + h`.
pub fn hand_guiding_constraint(
    model: &RobotModel,
    state: &JointState,
    mem: &ControllerMemory,
    wrench: &DVector<f64>,
    params: &AdmittanceParams,
    slack_weight: f64,
) -> Result<TaskConstraint, ModelError> {
    let ts = mem.sample_time;
    let params = params.zero_stiffness();
    let mass = params.mass_diag();
    let damping = params.damping_diag();

    let mut scale = DVector::zeros(12);
    let mut target = DVector::zeros(12);
    for i in 0..12 {
        scale[i] = mass[i] / ts + damping[i];
        target[i] = (mass[i] / ts) * mem.prev_twist[i] + wrench[i];
    }

    let mut constraint = admittance_rows(model, state, mem, &target, slack_weight, "hand_guiding")?;
    for r in 0..12 {
        for c in 0..constraint.jacobian.ncols() {
            constraint.jacobian[(r, c)] *= scale[r];
        }
    }
    Ok(constraint)
}

/// Preferred-posture equality `q̇ = q̇_d + K (q_d − q)` over the decision
/// vector. Targets are indexed by decision slot; the forward-speed slot has
/// no position to track, so its row carries only the feedforward, while the
/// yaw-rate slot tracks the base heading.
pub fn preferred_posture_constraint(
    model: &RobotModel,
    state: &JointState,
    target_positions: &DVector<f64>,
    target_velocities: &DVector<f64>,
    gains: &DVector<f64>,
    slack_weight: f64,
) -> TaskConstraint {
    let n_u = model.decision_size();
    assert_eq!(target_positions.len(), n_u);
    assert_eq!(target_velocities.len(), n_u);
    assert_eq!(gains.len(), n_u);
    let mut b = DVector::zeros(n_u);
    for i in 0..n_u {
        let err = match model.state_slot_for_decision(i) {
            Some(s) => target_positions[i] - state.q[s],
            None => 0.0,
        };
        b[i] = target_velocities[i] + gains[i] * err;
    }
    TaskConstraint::equality(
        DMatrix::identity(n_u, n_u),
        b,
        slack_weight,
        "preferred_posture",
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Quaternion;

    const TABLE_GAINS: AdmittanceGains = AdmittanceGains {
        mass_lin: 20.0,
        mass_ang: 3.0,
        damping_lin: 253.0,
        damping_ang: 27.0,
        stiffness_lin: 800.0,
        stiffness_ang: 60.0,
    };

    fn test_model() -> RobotModel {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../models/canopies.model");
        RobotModel::from_file(path).expect("default model loads")
    }

    #[test]
    fn quaternion_error_identity() {
        let q = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.3);
        assert_relative_eq!(quaternion_error(&q, &q).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn quaternion_error_quarter_turn() {
        let desired = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        let e = quaternion_error(&desired, &UnitQuaternion::identity());
        assert_relative_eq!(e.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(e.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(e.z, (std::f64::consts::FRAC_PI_4).sin(), epsilon = 1e-12);
    }

    #[test]
    fn quaternion_error_double_cover() {
        let q = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 1.1);
        let raw = q.quaternion();
        let negated =
            UnitQuaternion::from_quaternion(Quaternion::new(-raw.w, -raw.i, -raw.j, -raw.k));
        assert_relative_eq!(quaternion_error(&negated, &q).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn admittance_scale_factor() {
        // Ts = 0.01, Km = 20, Kd = 253 → rows scaled by 2253.
        let model = test_model();
        let q = DVector::zeros(model.state_size());
        let state = JointState::at_rest(q, model.decision_size());
        let mem = ControllerMemory::new(DVector::zeros(12), 0.01);
        let left = model.forward_kinematics(&state, "ee_left").unwrap();
        let right = model.forward_kinematics(&state, "ee_right").unwrap();
        let reference = CartesianReference::hold(left, right);
        let params = AdmittanceParams::uniform(TABLE_GAINS);
        let c = admittance_constraint(
            &model,
            &state,
            &mem,
            &reference,
            &DVector::zeros(12),
            &params,
            1e4,
        )
        .unwrap();
        let plain = model.stacked_dual_arm_jacobian(&state).unwrap();
        for col in 0..model.decision_size() {
            assert_relative_eq!(c.jacobian[(0, col)], 2253.0 * plain[(0, col)], epsilon = 1e-9);
        }
    }

    #[test]
    fn perfect_tracking_reference_is_consistent() {
        // With zero errors and v(t−Ts) = v_d − Ts·a_d the target reduces to
        // (Km/Ts + Kd) v_d, i.e. the constraint asks exactly for J q̇ = v_d.
        let model = test_model();
        let q = DVector::zeros(model.state_size());
        let state = JointState::at_rest(q, model.decision_size());
        let ts = 0.01;
        let mut v_d = DVector::zeros(12);
        v_d[0] = 0.2;
        v_d[7] = -0.1;
        let mut a_d = DVector::zeros(12);
        a_d[0] = 0.5;
        let mem = ControllerMemory::new(&v_d - ts * &a_d, ts);
        let left = model.forward_kinematics(&state, "ee_left").unwrap();
        let right = model.forward_kinematics(&state, "ee_right").unwrap();
        let reference = CartesianReference {
            poses: [left, right],
            velocity: v_d.clone(),
            acceleration: a_d,
        };
        let params = AdmittanceParams::uniform(TABLE_GAINS);
        let c = admittance_constraint(
            &model,
            &state,
            &mem,
            &reference,
            &DVector::zeros(12),
            &params,
            1e4,
        )
        .unwrap();
        let scale = |i: usize| params.mass_diag()[i] / ts + params.damping_diag()[i];
        for i in 0..12 {
            assert_relative_eq!(c.lower[i], scale(i) * v_d[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn hand_guiding_at_rest_is_zero_target() {
        let model = test_model();
        let q = DVector::zeros(model.state_size());
        let state = JointState::at_rest(q, model.decision_size());
        let mem = ControllerMemory::new(DVector::zeros(12), 0.01);
        let params = AdmittanceParams::uniform(TABLE_GAINS);
        let c =
            hand_guiding_constraint(&model, &state, &mem, &DVector::zeros(12), &params, 1e4)
                .unwrap();
        assert_relative_eq!(c.lower.norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn hand_guiding_decay_rate() {
        // After force release the commanded twist contracts by
        // (Km/Ts)/(Km/Ts + Kd) per tick.
        let km = 20.0;
        let kd = 253.0;
        let ts = 0.01;
        let mut v = 0.1;
        let factor = (km / ts) / (km / ts + kd);
        for _ in 0..5 {
            let next = (km / ts) * v / (km / ts + kd);
            assert_relative_eq!(next / v, factor, epsilon = 1e-12);
            v = next;
        }
    }

    #[test]
    fn posture_rows() {
        let model = test_model();
        let n_u = model.decision_size();
        let q0 = DVector::zeros(model.state_size());
        let state = JointState::at_rest(q0, n_u);
        let mut q_d = DVector::zeros(n_u);
        q_d[4] = 0.1; // first left-arm joint (v, ω, yaw, lift, l1...)
        let gains = DVector::from_element(n_u, 10.0);
        let c = preferred_posture_constraint(
            &model,
            &state,
            &q_d,
            &DVector::zeros(n_u),
            &gains,
            1e2,
        );
        assert_relative_eq!(c.lower[4], 1.0, epsilon = 1e-12);
        // At the target with zero feedforward everything is zero.
        let c0 = preferred_posture_constraint(
            &model,
            &state,
            &DVector::zeros(n_u),
            &DVector::zeros(n_u),
            &gains,
            1e2,
        );
        assert_relative_eq!(c0.lower.norm(), 0.0, epsilon = 1e-15);
    }
}
