//! Whole-body task-priority control for a mobile dual-arm harvesting robot.
//!
//! The library stacks up from a kinematic model to a full control loop:
//!
//! * [`model`] — robot description, forward kinematics, geometric Jacobians;
//! * [`qpcore`] — dense strictly-convex QP solver (dual active set);
//! * [`hierarchy`] — lexicographic task cascade solved as a sequence of QPs;
//! * [`safety`] — barrier-based constraints: joint limits, virtual walls,
//!   self-collision avoidance;
//! * [`operational`] — admittance trajectory tracking, hand-guiding and
//!   preferred-posture tasks;
//! * [`wrenchproc`] — payload compensation and contact classification for
//!   wrist force/torque measurements;
//! * [`traj`] — trapezoidal Cartesian trajectories and the harvesting
//!   waypoint sequence;
//! * [`supervisor`] — finite-state machine switching between autonomous and
//!   hand-guided operation;
//! * [`sim`] — fixed-step kinematic simulator driving the whole loop and
//!   logging every tick to CSV.

pub mod hierarchy;
pub mod model;
pub mod operational;
pub mod qpcore;
pub mod safety;
pub mod sim;
pub mod supervisor;
pub mod traj;
pub mod wrenchproc;
