//! Kinematic model of the mobile dual-arm robot.
//!
//! The robot is a serial tree rooted at a planar mobile base: the base
//! contributes three state components (x, y, heading) driven by two
//! decision-vector inputs (forward speed, yaw rate), every other joint is a
//! scalar prismatic or revolute joint contributing one component to both
//! vectors. All quantities are expressed in the world frame unless noted.
//!
//! A model is loaded from a TOML description (see `models/canopies.model`)
//! with sections `joints[]`, `frames[]`, `points[]`, `capsules[]` and
//! `limits`. Every joint implicitly defines a frame of the same name;
//! `frames[]` adds further named frames with a fixed offset from a joint.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{
    DMatrix, DVector, Isometry3, Matrix3x2, Quaternion, Translation3, UnitQuaternion, UnitVector3,
    Vector3,
};
use serde::Deserialize;
use thiserror::Error;

/// Bound magnitude treated as "unconstrained" throughout the library.
pub const INFINITE_BOUND: f64 = 1.0e12;

/// True when a bound value carries no information (at or beyond the sentinel).
pub fn is_free_bound(b: f64) -> bool {
    b.abs() >= 0.1 * INFINITE_BOUND
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("failed to read model file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse model file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("model validation failed: {0}")]
    Validation(String),
    #[error("unknown frame `{0}`")]
    UnknownFrame(String),
    #[error("unknown body point `{0}`")]
    UnknownPoint(String),
    #[error("unknown capsule `{0}`")]
    UnknownCapsule(String),
    #[error("state dimension mismatch: expected {expected}, got {got}")]
    StateDimension { expected: usize, got: usize },
}

/// Kind of a joint in the kinematic tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointKind {
    /// Planar mobile base: state (x, y, θ), inputs (v, ω) with unicycle
    /// kinematics. Must be the root of the tree.
    PlanarBase,
    Prismatic,
    Revolute,
}

#[derive(Debug, Clone)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    /// Motion axis expressed in the joint origin frame; unit norm.
    pub axis: Vector3<f64>,
    /// Fixed transform from the parent joint frame to this joint's origin.
    pub origin: Isometry3<f64>,
    /// Index of the parent joint; `None` for the root.
    pub parent: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct FrameDef {
    pub name: String,
    pub joint: usize,
    pub origin: Isometry3<f64>,
}

/// A monitored point rigidly attached to a frame.
#[derive(Debug, Clone)]
pub struct BodyPoint {
    pub name: String,
    pub frame: usize,
    pub offset: Vector3<f64>,
}

/// A capsule (segment + radius) rigidly attached to a frame, used as a
/// self-collision obstacle.
#[derive(Debug, Clone)]
pub struct CapsuleDef {
    pub name: String,
    pub frame: usize,
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

/// Joint position limits (state order) and velocity limits (decision order).
#[derive(Debug, Clone)]
pub struct Limits {
    pub pos_lower: DVector<f64>,
    pub pos_upper: DVector<f64>,
    pub vel_lower: DVector<f64>,
    pub vel_upper: DVector<f64>,
}

/// State-block sizes: planar base pose (3), torso joints, joints per arm.
#[derive(Debug, Clone, Copy)]
pub struct Partition {
    pub base: usize,
    pub torso: usize,
    pub arm: usize,
}

/// Validated robot description.
#[derive(Debug, Clone)]
pub struct RobotModel {
    joints: Vec<Joint>,
    frames: Vec<FrameDef>,
    points: Vec<BodyPoint>,
    capsules: Vec<CapsuleDef>,
    pub limits: Limits,
    pub partition: Partition,
    state_size: usize,
    decision_size: usize,
    /// First state-vector slot of each joint.
    state_offset: Vec<usize>,
    /// First decision-vector slot of each joint.
    decision_offset: Vec<usize>,
    frame_lookup: BTreeMap<String, FrameRef>,
    point_lookup: BTreeMap<String, usize>,
    capsule_lookup: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Copy)]
enum FrameRef {
    Joint(usize),
    Named(usize),
}

/// Joint-space state: positions `q` (state order), commanded velocities `qd`
/// (decision order) and time.
#[derive(Debug, Clone)]
pub struct JointState {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    pub t: f64,
}

impl JointState {
    pub fn at_rest(q: DVector<f64>, decision_size: usize) -> Self {
        Self {
            q,
            qd: DVector::zeros(decision_size),
            t: 0.0,
        }
    }
}

/// Position and orientation of a frame in the world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation,
        }
        .canonical()
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self {
            position: iso.translation.vector,
            orientation: iso.rotation,
        }
        .canonical()
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.position), self.orientation)
    }

    /// Normalize the quaternion sign so the scalar part is non-negative.
    pub fn canonical(mut self) -> Self {
        if self.orientation.w < 0.0 {
            let q = self.orientation.quaternion();
            self.orientation =
                UnitQuaternion::from_quaternion(Quaternion::new(-q.w, -q.i, -q.j, -q.k));
        }
        self
    }
}

/// Linear and angular velocity of a frame, world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Self {
            linear: Vector3::zeros(),
            angular: Vector3::zeros(),
        }
    }
}

/// Force and moment measured or applied at a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub moment: Vector3<f64>,
    pub frame: String,
}

impl Wrench {
    pub fn zero(frame: impl Into<String>) -> Self {
        Self {
            force: Vector3::zeros(),
            moment: Vector3::zeros(),
            frame: frame.into(),
        }
    }
}

/// Maps unicycle inputs (v, ω) to planar pose rates (ẋ, ẏ, θ̇).
pub fn base_velocity_mapping(theta: f64) -> Matrix3x2<f64> {
    Matrix3x2::new(theta.cos(), 0.0, theta.sin(), 0.0, 0.0, 1.0)
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct ModelFile {
    partition: PartitionFile,
    joints: Vec<JointFile>,
    #[serde(default)]
    frames: Vec<FrameFile>,
    #[serde(default)]
    points: Vec<PointFile>,
    #[serde(default)]
    capsules: Vec<CapsuleFile>,
    limits: LimitsFile,
}

#[derive(Deserialize)]
struct PartitionFile {
    base: usize,
    torso: usize,
    arm: usize,
}

#[derive(Deserialize)]
struct JointFile {
    name: String,
    kind: String,
    axis: [f64; 3],
    origin_xyz: [f64; 3],
    origin_quat_wxyz: [f64; 4],
    #[serde(default)]
    parent: Option<String>,
}

#[derive(Deserialize)]
struct FrameFile {
    name: String,
    joint: String,
    origin_xyz: [f64; 3],
    origin_quat_wxyz: [f64; 4],
}

#[derive(Deserialize)]
struct PointFile {
    name: String,
    frame: String,
    offset: [f64; 3],
}

#[derive(Deserialize)]
struct CapsuleFile {
    name: String,
    frame: String,
    a_xyz: [f64; 3],
    b_xyz: [f64; 3],
    radius: f64,
}

#[derive(Deserialize)]
struct LimitsFile {
    pos_lower: Vec<f64>,
    pos_upper: Vec<f64>,
    vel_lower: Vec<f64>,
    vel_upper: Vec<f64>,
}

fn iso_from(xyz: [f64; 3], wxyz: [f64; 4]) -> Result<Isometry3<f64>, ModelError> {
    let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
    if (q.norm() - 1.0).abs() > 1e-6 {
        return Err(ModelError::Validation(format!(
            "origin quaternion {wxyz:?} is not unit norm"
        )));
    }
    Ok(Isometry3::from_parts(
        Translation3::new(xyz[0], xyz[1], xyz[2]),
        UnitQuaternion::from_quaternion(q),
    ))
}

fn sanitize_bound(b: f64) -> f64 {
    if b.is_infinite() {
        b.signum() * INFINITE_BOUND
    } else {
        b
    }
}

impl RobotModel {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        let file: ModelFile = toml::from_str(text)?;
        Self::build(file)
    }

    fn build(file: ModelFile) -> Result<Self, ModelError> {
        let mut joints = Vec::with_capacity(file.joints.len());
        let mut name_to_joint: BTreeMap<String, usize> = BTreeMap::new();

        for (idx, jf) in file.joints.iter().enumerate() {
            let kind = match jf.kind.as_str() {
                "planar-base" => JointKind::PlanarBase,
                "prismatic" => JointKind::Prismatic,
                "revolute" => JointKind::Revolute,
                other => {
                    return Err(ModelError::Validation(format!(
                        "joint `{}` has unknown kind `{other}`",
                        jf.name
                    )))
                }
            };
            let axis = Vector3::new(jf.axis[0], jf.axis[1], jf.axis[2]);
            if (axis.norm() - 1.0).abs() > 1e-9 {
                return Err(ModelError::Validation(format!(
                    "joint `{}` axis is not unit norm",
                    jf.name
                )));
            }
            if kind == JointKind::PlanarBase && (axis - Vector3::z()).norm() > 1e-9 {
                return Err(ModelError::Validation(format!(
                    "planar base `{}` must rotate about +z",
                    jf.name
                )));
            }
            let parent = match &jf.parent {
                None => None,
                Some(p) if p.is_empty() => None,
                Some(p) => Some(*name_to_joint.get(p).ok_or_else(|| {
                    ModelError::Validation(format!(
                        "joint `{}` references unknown parent `{p}` (parents must precede children)",
                        jf.name
                    ))
                })?),
            };
            if name_to_joint.contains_key(&jf.name) {
                return Err(ModelError::Validation(format!(
                    "duplicate joint name `{}`",
                    jf.name
                )));
            }
            name_to_joint.insert(jf.name.clone(), idx);
            joints.push(Joint {
                name: jf.name.clone(),
                kind,
                axis,
                origin: iso_from(jf.origin_xyz, jf.origin_quat_wxyz)?,
                parent,
            });
        }

        let planar: Vec<usize> = joints
            .iter()
            .enumerate()
            .filter(|(_, j)| j.kind == JointKind::PlanarBase)
            .map(|(i, _)| i)
            .collect();
        if planar.len() != 1 || planar[0] != 0 || joints[0].parent.is_some() {
            return Err(ModelError::Validation(
                "exactly one planar-base joint is required and it must be the root".into(),
            ));
        }

        let mut state_offset = Vec::with_capacity(joints.len());
        let mut decision_offset = Vec::with_capacity(joints.len());
        let (mut ns, mut nd) = (0usize, 0usize);
        for j in &joints {
            state_offset.push(ns);
            decision_offset.push(nd);
            match j.kind {
                JointKind::PlanarBase => {
                    ns += 3;
                    nd += 2;
                }
                _ => {
                    ns += 1;
                    nd += 1;
                }
            }
        }

        let partition = Partition {
            base: file.partition.base,
            torso: file.partition.torso,
            arm: file.partition.arm,
        };
        if partition.base != 3 {
            return Err(ModelError::Validation(
                "partition.base must be 3 (planar pose x, y, θ)".into(),
            ));
        }
        if ns != partition.base + partition.torso + 2 * partition.arm {
            return Err(ModelError::Validation(format!(
                "state size {ns} does not match partition {} + {} + 2*{}",
                partition.base, partition.torso, partition.arm
            )));
        }

        let mut frame_lookup: BTreeMap<String, FrameRef> = BTreeMap::new();
        for (i, j) in joints.iter().enumerate() {
            frame_lookup.insert(j.name.clone(), FrameRef::Joint(i));
        }
        let mut frames = Vec::with_capacity(file.frames.len());
        for ff in &file.frames {
            let joint = *name_to_joint.get(&ff.joint).ok_or_else(|| {
                ModelError::Validation(format!(
                    "frame `{}` references unknown joint `{}`",
                    ff.name, ff.joint
                ))
            })?;
            if frame_lookup.contains_key(&ff.name) {
                return Err(ModelError::Validation(format!(
                    "duplicate frame name `{}`",
                    ff.name
                )));
            }
            frame_lookup.insert(ff.name.clone(), FrameRef::Named(frames.len()));
            frames.push(FrameDef {
                name: ff.name.clone(),
                joint,
                origin: iso_from(ff.origin_xyz, ff.origin_quat_wxyz)?,
            });
        }

        // Resolve a frame name to its carrying joint plus the fixed offset of
        // the named frame, so points and capsules hang directly off joints.
        let resolve_attachment = |name: &str| -> Result<(usize, Isometry3<f64>), ModelError> {
            match frame_lookup
                .get(name)
                .copied()
                .ok_or_else(|| ModelError::UnknownFrame(name.to_string()))?
            {
                FrameRef::Joint(j) => Ok((j, Isometry3::identity())),
                FrameRef::Named(f) => Ok((frames[f].joint, frames[f].origin)),
            }
        };

        let mut points = Vec::with_capacity(file.points.len());
        let mut point_lookup = BTreeMap::new();
        for pf in &file.points {
            let (joint, local) = resolve_attachment(&pf.frame)?;
            if point_lookup.contains_key(&pf.name) {
                return Err(ModelError::Validation(format!(
                    "duplicate point name `{}`",
                    pf.name
                )));
            }
            point_lookup.insert(pf.name.clone(), points.len());
            let offset = Vector3::new(pf.offset[0], pf.offset[1], pf.offset[2]);
            points.push(BodyPoint {
                name: pf.name.clone(),
                frame: joint,
                offset: (local * nalgebra::Point3::from(offset)).coords,
            });
        }

        let mut capsules = Vec::with_capacity(file.capsules.len());
        let mut capsule_lookup = BTreeMap::new();
        for cf in &file.capsules {
            let (joint, local) = resolve_attachment(&cf.frame)?;
            if cf.radius < 0.0 {
                return Err(ModelError::Validation(format!(
                    "capsule `{}` has negative radius",
                    cf.name
                )));
            }
            let a = Vector3::new(cf.a_xyz[0], cf.a_xyz[1], cf.a_xyz[2]);
            let b = Vector3::new(cf.b_xyz[0], cf.b_xyz[1], cf.b_xyz[2]);
            if (a - b).norm() < 1e-9 {
                return Err(ModelError::Validation(format!(
                    "capsule `{}` segment has zero length",
                    cf.name
                )));
            }
            if capsule_lookup.contains_key(&cf.name) {
                return Err(ModelError::Validation(format!(
                    "duplicate capsule name `{}`",
                    cf.name
                )));
            }
            capsule_lookup.insert(cf.name.clone(), capsules.len());
            capsules.push(CapsuleDef {
                name: cf.name.clone(),
                frame: joint,
                a: (local * nalgebra::Point3::from(a)).coords,
                b: (local * nalgebra::Point3::from(b)).coords,
                radius: cf.radius,
            });
        }

        let lim = &file.limits;
        if lim.pos_lower.len() != ns || lim.pos_upper.len() != ns {
            return Err(ModelError::Validation(format!(
                "position limit arrays must have length {ns}"
            )));
        }
        if lim.vel_lower.len() != nd || lim.vel_upper.len() != nd {
            return Err(ModelError::Validation(format!(
                "velocity limit arrays must have length {nd}"
            )));
        }
        let pos_lower = DVector::from_iterator(ns, lim.pos_lower.iter().map(|&b| sanitize_bound(b)));
        let pos_upper = DVector::from_iterator(ns, lim.pos_upper.iter().map(|&b| sanitize_bound(b)));
        let vel_lower = DVector::from_iterator(nd, lim.vel_lower.iter().map(|&b| sanitize_bound(b)));
        let vel_upper = DVector::from_iterator(nd, lim.vel_upper.iter().map(|&b| sanitize_bound(b)));
        for i in 0..ns {
            if pos_lower[i] > pos_upper[i] {
                return Err(ModelError::Validation(format!(
                    "position limits inverted at state component {i}: {} > {}",
                    pos_lower[i], pos_upper[i]
                )));
            }
        }
        for i in 0..nd {
            if !(vel_lower[i] < 0.0 && vel_upper[i] > 0.0) {
                return Err(ModelError::Validation(format!(
                    "velocity limits at decision component {i} must straddle zero"
                )));
            }
        }

        Ok(RobotModel {
            joints,
            frames,
            points,
            capsules,
            limits: Limits {
                pos_lower,
                pos_upper,
                vel_lower,
                vel_upper,
            },
            partition,
            state_size: ns,
            decision_size: nd,
            state_offset,
            decision_offset,
            frame_lookup,
            point_lookup,
            capsule_lookup,
        })
    }

    pub fn state_size(&self) -> usize {
        self.state_size
    }

    pub fn decision_size(&self) -> usize {
        self.decision_size
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn points(&self) -> &[BodyPoint] {
        &self.points
    }

    pub fn capsules(&self) -> &[CapsuleDef] {
        &self.capsules
    }

    /// State-vector slot of the first component of joint `idx`.
    pub fn state_offset(&self, idx: usize) -> usize {
        self.state_offset[idx]
    }

    /// Decision-vector slot of the first component of joint `idx`.
    pub fn decision_offset(&self, idx: usize) -> usize {
        self.decision_offset[idx]
    }

    pub fn point_index(&self, name: &str) -> Result<usize, ModelError> {
        self.point_lookup
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::UnknownPoint(name.to_string()))
    }

    pub fn capsule_index(&self, name: &str) -> Result<usize, ModelError> {
        self.capsule_lookup
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::UnknownCapsule(name.to_string()))
    }

    fn frame_ref(&self, name: &str) -> Result<(usize, Isometry3<f64>), ModelError> {
        match self
            .frame_lookup
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::UnknownFrame(name.to_string()))?
        {
            FrameRef::Joint(j) => Ok((j, Isometry3::identity())),
            FrameRef::Named(f) => Ok((self.frames[f].joint, self.frames[f].origin)),
        }
    }

    fn check_state(&self, state: &JointState) -> Result<(), ModelError> {
        if state.q.len() != self.state_size {
            return Err(ModelError::StateDimension {
                expected: self.state_size,
                got: state.q.len(),
            });
        }
        Ok(())
    }

    /// World transform of every joint frame (after its own motion).
    pub fn joint_transforms(&self, q: &DVector<f64>) -> Vec<Isometry3<f64>> {
        debug_assert_eq!(q.len(), self.state_size);
        let mut tf = Vec::with_capacity(self.joints.len());
        for (i, joint) in self.joints.iter().enumerate() {
            let parent_tf = match joint.parent {
                Some(p) => tf[p],
                None => Isometry3::identity(),
            };
            let origin_tf = parent_tf * joint.origin;
            let s = self.state_offset[i];
            let motion = match joint.kind {
                JointKind::PlanarBase => Isometry3::from_parts(
                    Translation3::new(q[s], q[s + 1], 0.0),
                    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), q[s + 2]),
                ),
                JointKind::Prismatic => Isometry3::from_parts(
                    Translation3::from(joint.axis * q[s]),
                    UnitQuaternion::identity(),
                ),
                JointKind::Revolute => Isometry3::from_parts(
                    Translation3::identity(),
                    UnitQuaternion::from_axis_angle(&UnitVector3::new_normalize(joint.axis), q[s]),
                ),
            };
            tf.push(origin_tf * motion);
        }
        tf
    }

    /// World pose of a named frame given precomputed joint transforms.
    pub fn frame_pose_cached(
        &self,
        tf: &[Isometry3<f64>],
        frame: &str,
    ) -> Result<Isometry3<f64>, ModelError> {
        let (joint, local) = self.frame_ref(frame)?;
        Ok(tf[joint] * local)
    }

    /// World pose of a named frame; quaternion normalized with κ ≥ 0.
    pub fn forward_kinematics(
        &self,
        state: &JointState,
        frame: &str,
    ) -> Result<Pose, ModelError> {
        self.check_state(state)?;
        let tf = self.joint_transforms(&state.q);
        Ok(Pose::from_isometry(&self.frame_pose_cached(&tf, frame)?))
    }

    /// World position of a stored body point.
    pub fn point_position_cached(&self, tf: &[Isometry3<f64>], point: usize) -> Vector3<f64> {
        let p = &self.points[point];
        (tf[p.frame] * nalgebra::Point3::from(p.offset)).coords
    }

    /// 6 × n_u geometric Jacobian of a world point rigidly attached to joint
    /// `joint_idx`. Columns of joints off the support path are exactly zero.
    pub fn jacobian_at_cached(
        &self,
        tf: &[Isometry3<f64>],
        q: &DVector<f64>,
        joint_idx: usize,
        world_point: &Vector3<f64>,
    ) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(6, self.decision_size);
        let mut cursor = Some(joint_idx);
        while let Some(i) = cursor {
            let joint = &self.joints[i];
            let origin_tf = match joint.parent {
                Some(p) => tf[p] * joint.origin,
                None => joint.origin,
            };
            let d = self.decision_offset[i];
            match joint.kind {
                JointKind::PlanarBase => {
                    let s = self.state_offset[i];
                    let theta = q[s + 2];
                    let x_axis = origin_tf.rotation * Vector3::x();
                    let y_axis = origin_tf.rotation * Vector3::y();
                    let z_axis = origin_tf.rotation * Vector3::z();
                    // Column for forward speed v: heading direction in the
                    // origin frame's plane.
                    let heading = x_axis * theta.cos() + y_axis * theta.sin();
                    jac[(0, d)] = heading.x;
                    jac[(1, d)] = heading.y;
                    jac[(2, d)] = heading.z;
                    // Column for yaw rate ω: rotation about the origin-frame z
                    // axis located at the base frame position.
                    let center = origin_tf.translation.vector
                        + origin_tf.rotation * Vector3::new(q[s], q[s + 1], 0.0);
                    let lin = z_axis.cross(&(world_point - center));
                    for r in 0..3 {
                        jac[(r, d + 1)] = lin[r];
                        jac[(r + 3, d + 1)] = z_axis[r];
                    }
                }
                JointKind::Prismatic => {
                    let axis = origin_tf.rotation * joint.axis;
                    for r in 0..3 {
                        jac[(r, d)] = axis[r];
                    }
                }
                JointKind::Revolute => {
                    let axis = origin_tf.rotation * joint.axis;
                    let arm = world_point - origin_tf.translation.vector;
                    let lin = axis.cross(&arm);
                    for r in 0..3 {
                        jac[(r, d)] = lin[r];
                        jac[(r + 3, d)] = axis[r];
                    }
                }
            }
            cursor = joint.parent;
        }
        jac
    }

    /// 6 × n_u geometric Jacobian of a named frame: frame twist = J q̇.
    pub fn geometric_jacobian(
        &self,
        state: &JointState,
        frame: &str,
    ) -> Result<DMatrix<f64>, ModelError> {
        self.check_state(state)?;
        let tf = self.joint_transforms(&state.q);
        let (joint, local) = self.frame_ref(frame)?;
        let world = (tf[joint] * local).translation.vector;
        Ok(self.jacobian_at_cached(&tf, &state.q, joint, &world))
    }

    /// 3 × n_u linear-velocity Jacobian of a point attached to `frame` at
    /// `offset` (frame coordinates).
    pub fn point_jacobian(
        &self,
        state: &JointState,
        frame: &str,
        offset: &Vector3<f64>,
    ) -> Result<DMatrix<f64>, ModelError> {
        self.check_state(state)?;
        let tf = self.joint_transforms(&state.q);
        let (joint, local) = self.frame_ref(frame)?;
        let world = (tf[joint] * local) * nalgebra::Point3::from(*offset);
        let full = self.jacobian_at_cached(&tf, &state.q, joint, &world.coords);
        Ok(full.rows(0, 3).into_owned())
    }

    /// 3 × n_u linear Jacobian of a stored body point, using cached
    /// transforms.
    pub fn point_jacobian_cached(
        &self,
        tf: &[Isometry3<f64>],
        q: &DVector<f64>,
        point: usize,
    ) -> DMatrix<f64> {
        let p = &self.points[point];
        let world = self.point_position_cached(tf, point);
        self.jacobian_at_cached(tf, q, p.frame, &world)
            .rows(0, 3)
            .into_owned()
    }

    /// 12 × n_u stacked Jacobian: rows 0–5 left end-effector, 6–11 right.
    pub fn stacked_dual_arm_jacobian(
        &self,
        state: &JointState,
    ) -> Result<DMatrix<f64>, ModelError> {
        let left = self.geometric_jacobian(state, "ee_left")?;
        let right = self.geometric_jacobian(state, "ee_right")?;
        let mut j = DMatrix::zeros(12, self.decision_size);
        j.rows_mut(0, 6).copy_from(&left);
        j.rows_mut(6, 6).copy_from(&right);
        Ok(j)
    }

    /// Maps decision-vector rates to state-vector rates: identity except the
    /// base block, which goes through [`base_velocity_mapping`].
    pub fn state_rate(&self, q: &DVector<f64>, qd: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(qd.len(), self.decision_size);
        let mut dq = DVector::zeros(self.state_size);
        for (i, joint) in self.joints.iter().enumerate() {
            let s = self.state_offset[i];
            let d = self.decision_offset[i];
            match joint.kind {
                JointKind::PlanarBase => {
                    let m = base_velocity_mapping(q[s + 2]);
                    let u = nalgebra::Vector2::new(qd[d], qd[d + 1]);
                    let rates = m * u;
                    dq[s] = rates[0];
                    dq[s + 1] = rates[1];
                    dq[s + 2] = rates[2];
                }
                _ => dq[s] = qd[d],
            }
        }
        dq
    }

    /// Decision slot carrying a given scalar state component, if any.
    /// Scalar joints map one-to-one; the base heading θ maps to the yaw-rate
    /// slot; base x and y have no direct decision slot.
    pub fn decision_slot_for_state(&self, state_idx: usize) -> Option<usize> {
        for (i, joint) in self.joints.iter().enumerate() {
            let s = self.state_offset[i];
            let d = self.decision_offset[i];
            match joint.kind {
                JointKind::PlanarBase => {
                    if state_idx == s || state_idx == s + 1 {
                        return None;
                    }
                    if state_idx == s + 2 {
                        return Some(d + 1);
                    }
                }
                _ => {
                    if state_idx == s {
                        return Some(d);
                    }
                }
            }
        }
        None
    }

    /// State slot read by a given decision component, if any. Scalar joints
    /// map one-to-one and the yaw-rate slot reads the base heading; the
    /// forward-speed slot has no single state counterpart.
    pub fn state_slot_for_decision(&self, dec_idx: usize) -> Option<usize> {
        for (i, joint) in self.joints.iter().enumerate() {
            let s = self.state_offset[i];
            let d = self.decision_offset[i];
            match joint.kind {
                JointKind::PlanarBase => {
                    if dec_idx == d {
                        return None;
                    }
                    if dec_idx == d + 1 {
                        return Some(s + 2);
                    }
                }
                _ => {
                    if dec_idx == d {
                        return Some(s);
                    }
                }
            }
        }
        None
    }

    /// Human-readable name of a state component.
    pub fn state_component_name(&self, state_idx: usize) -> String {
        for (i, joint) in self.joints.iter().enumerate() {
            let s = self.state_offset[i];
            match joint.kind {
                JointKind::PlanarBase => {
                    if state_idx == s {
                        return format!("{}_x", joint.name);
                    }
                    if state_idx == s + 1 {
                        return format!("{}_y", joint.name);
                    }
                    if state_idx == s + 2 {
                        return format!("{}_theta", joint.name);
                    }
                }
                _ => {
                    if state_idx == s {
                        return joint.name.clone();
                    }
                }
            }
        }
        format!("q{state_idx}")
    }

    /// Human-readable name of a decision component.
    pub fn decision_component_name(&self, dec_idx: usize) -> String {
        for (i, joint) in self.joints.iter().enumerate() {
            let d = self.decision_offset[i];
            match joint.kind {
                JointKind::PlanarBase => {
                    if dec_idx == d {
                        return format!("{}_v", joint.name);
                    }
                    if dec_idx == d + 1 {
                        return format!("{}_omega", joint.name);
                    }
                }
                _ => {
                    if dec_idx == d {
                        return joint.name.clone();
                    }
                }
            }
        }
        format!("qd{dec_idx}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single_joint_model(kind: &str, axis: [f64; 3]) -> String {
        format!(
            r#"
[partition]
base = 3
torso = 0
arm = 0

[[joints]]
name = "base"
kind = "planar-base"
axis = [0.0, 0.0, 1.0]
origin_xyz = [0.0, 0.0, 0.0]
origin_quat_wxyz = [1.0, 0.0, 0.0, 0.0]

[[joints]]
name = "j1"
kind = "{kind}"
axis = [{}, {}, {}]
origin_xyz = [0.0, 0.0, 0.0]
origin_quat_wxyz = [1.0, 0.0, 0.0, 0.0]
parent = "base"

[[frames]]
name = "tip"
joint = "j1"
origin_xyz = [1.0, 0.0, 0.0]
origin_quat_wxyz = [1.0, 0.0, 0.0, 0.0]

[limits]
pos_lower = [-inf, -inf, -3.14159, -3.14159]
pos_upper = [inf, inf, 3.14159, 3.14159]
vel_lower = [-inf, -inf, -1.0]
vel_upper = [inf, inf, 1.0]
"#,
            axis[0], axis[1], axis[2]
        )
    }

    // The extra scalar joint makes the partition 3 + 0 + 0 mismatch; use a
    // torso slot for it instead.
    fn one_scalar_joint(kind: &str, axis: [f64; 3]) -> RobotModel {
        let text = single_joint_model(kind, axis).replace("torso = 0", "torso = 1");
        RobotModel::from_toml_str(&text).expect("model should load")
    }

    #[test]
    fn prismatic_translation() {
        let model = one_scalar_joint("prismatic", [0.0, 0.0, 1.0]);
        let mut q = DVector::zeros(4);
        q[3] = 0.5;
        let state = JointState::at_rest(q, model.decision_size());
        let pose = model.forward_kinematics(&state, "j1").unwrap();
        assert_relative_eq!(pose.position, Vector3::new(0.0, 0.0, 0.5), epsilon = 1e-12);
    }

    #[test]
    fn revolute_quarter_turn() {
        let model = one_scalar_joint("revolute", [0.0, 0.0, 1.0]);
        let mut q = DVector::zeros(4);
        q[3] = std::f64::consts::FRAC_PI_2;
        let state = JointState::at_rest(q, model.decision_size());
        let pose = model.forward_kinematics(&state, "tip").unwrap();
        assert_relative_eq!(pose.position, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn revolute_jacobian_cross_product() {
        let model = one_scalar_joint("revolute", [0.0, 0.0, 1.0]);
        let state = JointState::at_rest(DVector::zeros(4), model.decision_size());
        let jac = model.geometric_jacobian(&state, "tip").unwrap();
        // Tip at (1,0,0), axis z: linear column (0,1,0), angular (0,0,1).
        assert_relative_eq!(jac[(0, 2)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(jac[(1, 2)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(jac[(5, 2)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn base_mapping_matches_examples() {
        let m = base_velocity_mapping(0.0);
        let u = nalgebra::Vector2::new(1.0, 0.0);
        assert_relative_eq!(m * u, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
        let m = base_velocity_mapping(std::f64::consts::FRAC_PI_2);
        assert_relative_eq!(m * u, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-10);
        let m = base_velocity_mapping(0.7);
        let u = nalgebra::Vector2::new(0.0, 1.0);
        assert_relative_eq!(m * u, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn inverted_limits_rejected() {
        let text = single_joint_model("revolute", [0.0, 0.0, 1.0])
            .replace("torso = 0", "torso = 1")
            .replace(
                "pos_lower = [-inf, -inf, -3.14159, -3.14159]",
                "pos_lower = [-inf, -inf, -3.14159, 4.0]",
            );
        assert!(matches!(
            RobotModel::from_toml_str(&text),
            Err(ModelError::Validation(_))
        ));
    }

    #[test]
    fn non_unit_axis_rejected() {
        let text =
            single_joint_model("revolute", [0.0, 0.0, 2.0]).replace("torso = 0", "torso = 1");
        assert!(matches!(
            RobotModel::from_toml_str(&text),
            Err(ModelError::Validation(_))
        ));
    }

    #[test]
    fn unknown_frame_is_an_error() {
        let model = one_scalar_joint("revolute", [0.0, 0.0, 1.0]);
        let state = JointState::at_rest(DVector::zeros(4), model.decision_size());
        assert!(matches!(
            model.forward_kinematics(&state, "nope"),
            Err(ModelError::UnknownFrame(_))
        ));
    }

    #[test]
    fn pose_scalar_part_normalized() {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(-0.5, 0.5, 0.5, 0.5));
        let pose = Pose::new(Vector3::zeros(), q);
        assert!(pose.orientation.w >= 0.0);
        let angle = pose.orientation.angle_to(&q);
        assert!(angle < 1e-12, "sign flip must preserve the rotation");
    }
}
