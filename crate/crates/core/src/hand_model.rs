//! Kinematic five-finger hand with 22 actuated joints.
//!
//! Each finger is a serial chain of revolute joints mounted above the lid.
//! Joints track EMA-smoothed position targets with a first-order law; the
//! reported joint torque is a synthetic PD expression consumed only by the
//! work penalty.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3xX, Rotation3, SVector, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::contact_geometry::{Point, TactileArray, NUM_FINGERS};
use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 22;

pub type JointVector = SVector<f64, NUM_JOINTS>;

/// Name of the geometry shipped with the crate.
pub const BUILTIN_PROFILE: &str = "desk-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    /// Rotation axis in the parent link frame.
    pub axis: [f64; 3],
    /// Translation from the previous joint (or finger base) to this joint.
    pub offset: [f64; 3],
    pub lower: f64,
    pub upper: f64,
    /// Posture used to seed and regularise inverse kinematics.
    pub nominal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FingerSpec {
    pub name: String,
    pub base_position: [f64; 3],
    /// Heading of the base frame's x axis about world z (radians).
    pub base_yaw: f64,
    pub joints: Vec<JointSpec>,
    /// Translation from the last joint to the fingertip cap centre.
    pub tip_offset: [f64; 3],
    pub cap_radius: f64,
}

/// Built-in desk-scale hand: five chains spaced 72° around the lid axis,
/// thumb and little finger with five joints, the others with four.
pub fn builtin_profile() -> Vec<FingerSpec> {
    const BASE_RADIUS: f64 = 0.075;
    const BASE_HEIGHT: f64 = 0.065;
    const LINKS: [f64; 3] = [0.035, 0.028, 0.018];
    let names = ["thumb", "index", "middle", "ring", "little"];
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let heading = (18.0 + 72.0 * i as f64).to_radians();
            let mut joints = Vec::new();
            if i == 0 || i == 4 {
                joints.push(JointSpec {
                    axis: [1.0, 0.0, 0.0],
                    offset: [0.0; 3],
                    lower: -0.5,
                    upper: 0.5,
                    nominal: 0.0,
                });
            }
            joints.push(JointSpec {
                axis: [0.0, 0.0, 1.0],
                offset: [0.0; 3],
                lower: -0.75,
                upper: 0.75,
                nominal: 0.0,
            });
            joints.push(JointSpec {
                axis: [0.0, 1.0, 0.0],
                offset: [0.0; 3],
                lower: -0.3,
                upper: 1.6,
                nominal: 0.6,
            });
            joints.push(JointSpec {
                axis: [0.0, 1.0, 0.0],
                offset: [LINKS[0], 0.0, 0.0],
                lower: 0.0,
                upper: 1.8,
                nominal: 0.7,
            });
            joints.push(JointSpec {
                axis: [0.0, 1.0, 0.0],
                offset: [LINKS[1], 0.0, 0.0],
                lower: 0.0,
                upper: 1.8,
                nominal: 0.5,
            });
            FingerSpec {
                name: name.to_string(),
                base_position: [
                    BASE_RADIUS * heading.cos(),
                    BASE_RADIUS * heading.sin(),
                    BASE_HEIGHT,
                ],
                base_yaw: heading + std::f64::consts::PI,
                joints,
                tip_offset: [LINKS[2], 0.0, 0.0],
                cap_radius: 0.006,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Joint {
    axis: Unit<Vector3<f64>>,
    offset: Vector3<f64>,
}

#[derive(Debug, Clone)]
struct Chain {
    base_rotation: Rotation3<f64>,
    base_position: Point,
    joints: Vec<Joint>,
    first_joint: usize,
    tip_offset: Vector3<f64>,
}

/// Chain geometry, joint limits and fingertip sensor layout for the hand.
#[derive(Debug, Clone)]
pub struct FingerKinematics {
    chains: Vec<Chain>,
    lower: JointVector,
    upper: JointVector,
    nominal: JointVector,
    /// Sensor offsets in the fingertip frame, shared by all fingers.
    sensor_offsets: Vec<Vector3<f64>>,
    cap_radius: [f64; NUM_FINGERS],
}

/// Fingertip positions, orientations and sensor points for one joint vector.
#[derive(Debug, Clone)]
pub struct HandPose {
    pub tips: [Point; NUM_FINGERS],
    pub tip_rotations: [Rotation3<f64>; NUM_FINGERS],
    pub sensors: TactileArray,
}

impl FingerKinematics {
    /// Builds the hand from chain specs; `sensors_per_finger` must be a
    /// perfect square (an n×n grid on each fingertip cap) and `cap_spread`
    /// is the polar angle of the outermost grid ring.
    pub fn from_specs(specs: &[FingerSpec], sensors_per_finger: usize, cap_spread: f64) -> Result<Self> {
        if specs.len() != NUM_FINGERS {
            return Err(Error::config(format!(
                "hand needs {NUM_FINGERS} fingers, got {}",
                specs.len()
            )));
        }
        let total: usize = specs.iter().map(|s| s.joints.len()).sum();
        if total != NUM_JOINTS {
            return Err(Error::config(format!(
                "finger chains must total {NUM_JOINTS} joints, got {total}"
            )));
        }
        let grid = (sensors_per_finger as f64).sqrt().round() as usize;
        if grid == 0 || grid * grid != sensors_per_finger {
            return Err(Error::config(format!(
                "sensors_per_finger must be a positive perfect square, got {sensors_per_finger}"
            )));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&cap_spread) {
            return Err(Error::config(format!("cap spread must lie in [0, pi/2), got {cap_spread}")));
        }

        let mut chains = Vec::with_capacity(NUM_FINGERS);
        let mut lower = JointVector::zeros();
        let mut upper = JointVector::zeros();
        let mut nominal = JointVector::zeros();
        let mut cap_radius = [0.0; NUM_FINGERS];
        let mut next = 0;
        for (i, spec) in specs.iter().enumerate() {
            if !(3..=5).contains(&spec.joints.len()) {
                return Err(Error::config(format!(
                    "finger {} has {} joints; chains carry 3 to 5",
                    spec.name,
                    spec.joints.len()
                )));
            }
            if !(spec.cap_radius > 0.0) {
                return Err(Error::config(format!("finger {} needs a positive cap radius", spec.name)));
            }
            cap_radius[i] = spec.cap_radius;
            let mut joints = Vec::new();
            for (j, js) in spec.joints.iter().enumerate() {
                let axis = Vector3::from(js.axis);
                if axis.norm() < 1e-12 {
                    return Err(Error::config(format!("finger {} joint {j} has a zero axis", spec.name)));
                }
                if !(js.lower <= js.nominal && js.nominal <= js.upper) {
                    return Err(Error::config(format!(
                        "finger {} joint {j}: nominal {} outside [{}, {}]",
                        spec.name, js.nominal, js.lower, js.upper
                    )));
                }
                lower[next + j] = js.lower;
                upper[next + j] = js.upper;
                nominal[next + j] = js.nominal;
                joints.push(Joint {
                    axis: Unit::new_normalize(axis),
                    offset: Vector3::from(js.offset),
                });
            }
            chains.push(Chain {
                base_rotation: Rotation3::from_axis_angle(&Vector3::z_axis(), spec.base_yaw),
                base_position: Point::from(spec.base_position),
                joints,
                first_joint: next,
                tip_offset: Vector3::from(spec.tip_offset),
            });
            next += spec.joints.len();
        }

        let mut sensor_offsets = Vec::with_capacity(sensors_per_finger);
        let angles: Vec<f64> = if grid == 1 {
            vec![0.0]
        } else {
            (0..grid)
                .map(|g| -cap_spread + 2.0 * cap_spread * g as f64 / (grid - 1) as f64)
                .collect()
        };
        for a in &angles {
            for b in &angles {
                sensor_offsets.push(Vector3::new(1.0, a.tan(), b.tan()).normalize());
            }
        }

        Ok(Self {
            chains,
            lower,
            upper,
            nominal,
            sensor_offsets,
            cap_radius,
        })
    }

    pub fn builtin(sensors_per_finger: usize, cap_spread: f64) -> Result<Self> {
        Self::from_specs(&builtin_profile(), sensors_per_finger, cap_spread)
    }

    pub fn lower(&self) -> &JointVector {
        &self.lower
    }

    pub fn upper(&self) -> &JointVector {
        &self.upper
    }

    pub fn nominal(&self) -> &JointVector {
        &self.nominal
    }

    pub fn sensors_per_finger(&self) -> usize {
        self.sensor_offsets.len()
    }

    pub fn cap_radius(&self, finger: usize) -> f64 {
        self.cap_radius[finger]
    }

    /// Global joint indices belonging to `finger`.
    pub fn joint_range(&self, finger: usize) -> std::ops::Range<usize> {
        let c = &self.chains[finger];
        c.first_joint..c.first_joint + c.joints.len()
    }

    pub fn clamp(&self, q: &JointVector) -> JointVector {
        q.zip_zip_map(&self.lower, &self.upper, |v, lo, hi| v.clamp(lo, hi))
    }

    /// Walks one chain, returning world joint origins, world joint axes, the
    /// fingertip position and fingertip orientation.
    fn walk(&self, finger: usize, q: &JointVector) -> (Vec<Point>, Vec<Vector3<f64>>, Point, Rotation3<f64>) {
        let chain = &self.chains[finger];
        let mut rotation = chain.base_rotation;
        let mut position = chain.base_position;
        let mut origins = Vec::with_capacity(chain.joints.len());
        let mut axes = Vec::with_capacity(chain.joints.len());
        for (j, joint) in chain.joints.iter().enumerate() {
            position += rotation * joint.offset;
            origins.push(position);
            axes.push(rotation * joint.axis.into_inner());
            rotation *= Rotation3::from_axis_angle(&joint.axis, q[chain.first_joint + j]);
        }
        let tip = position + rotation * chain.tip_offset;
        (origins, axes, tip, rotation)
    }

    pub fn fingertip(&self, finger: usize, q: &JointVector) -> Point {
        self.walk(finger, q).2
    }

    /// Fingertip position and orientation of one finger.
    pub fn tip_frame(&self, finger: usize, q: &JointVector) -> (Point, Rotation3<f64>) {
        let (_, _, tip, rot) = self.walk(finger, q);
        (tip, rot)
    }

    pub fn forward_kinematics(&self, q: &JointVector) -> HandPose {
        let mut tips = [Point::zeros(); NUM_FINGERS];
        let mut tip_rotations = [Rotation3::identity(); NUM_FINGERS];
        let mut sensors = Vec::with_capacity(NUM_FINGERS);
        for i in 0..NUM_FINGERS {
            let (_, _, tip, rot) = self.walk(i, q);
            tips[i] = tip;
            tip_rotations[i] = rot;
            let r = self.cap_radius[i];
            sensors.push(self.sensor_offsets.iter().map(|o| tip + rot * (o * r)).collect());
        }
        HandPose {
            tips,
            tip_rotations,
            sensors: TactileArray::new(sensors).expect("sensor layout is uniform by construction"),
        }
    }

    /// Positional Jacobian of one fingertip with respect to that finger's joints.
    pub fn tip_jacobian(&self, finger: usize, q: &JointVector) -> Matrix3xX<f64> {
        let (origins, axes, tip, _) = self.walk(finger, q);
        let mut jac = Matrix3xX::zeros(origins.len());
        for (col, (o, a)) in origins.iter().zip(&axes).enumerate() {
            jac.set_column(col, &a.cross(&(tip - o)));
        }
        jac
    }

    /// Fingertip velocities from the analytic Jacobian.
    pub fn tip_velocities(&self, q: &JointVector, qdot: &JointVector) -> [Vector3<f64>; NUM_FINGERS] {
        let mut out = [Vector3::zeros(); NUM_FINGERS];
        for (i, v) in out.iter_mut().enumerate() {
            let range = self.joint_range(i);
            let rates = DVector::from_iterator(range.len(), range.map(|j| qdot[j]));
            *v = self.tip_jacobian(i, q) * rates;
        }
        out
    }

    /// Damped least-squares inverse kinematics for one fingertip position.
    /// Only the joints of `finger` are modified; the redundant directions are
    /// pulled towards the nominal posture.
    pub fn solve_tip(&self, finger: usize, seed: &JointVector, target: &Point, iterations: usize) -> JointVector {
        const DAMPING: f64 = 5e-3;
        const POSTURE_GAIN: f64 = 0.05;
        let range = self.joint_range(finger);
        let n = range.len();
        let mut q = *seed;
        for _ in 0..iterations {
            let tip = self.fingertip(finger, &q);
            let err = target - tip;
            if err.norm() < 1e-9 {
                break;
            }
            let jac = self.tip_jacobian(finger, &q);
            let jjt = &jac * jac.transpose() + Matrix3::identity() * (DAMPING * DAMPING);
            let Some(inv) = jjt.try_inverse() else { break };
            let pinv = jac.transpose() * inv;
            let mut dq = &pinv * err;
            let posture = DVector::from_iterator(n, range.clone().map(|j| self.nominal[j] - q[j]));
            let null = DMatrix::identity(n, n) - &pinv * &jac;
            dq += null * posture * POSTURE_GAIN;
            for (local, j) in range.clone().enumerate() {
                q[j] = (q[j] + dq[local]).clamp(self.lower[j], self.upper[j]);
            }
        }
        q
    }
}

/// Fingertip velocities by finite difference of consecutive positions.
pub fn fingertip_velocities(
    previous: &[Point; NUM_FINGERS],
    current: &[Point; NUM_FINGERS],
    dt: f64,
) -> [Vector3<f64>; NUM_FINGERS] {
    let mut v = [Vector3::zeros(); NUM_FINGERS];
    for i in 0..NUM_FINGERS {
        v[i] = (current[i] - previous[i]) / dt;
    }
    v
}

/// Actuation and tracking parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActuationParams {
    /// Target increment gain on the smoothed action.
    pub eta: f64,
    pub action_scale: f64,
    pub clip_action: f64,
    /// EMA retention factor: `ema' = beta * ema + (1 - beta) * a`.
    pub ema_beta: f64,
    pub tracking_time_constant: f64,
    pub rate_limit: f64,
    pub torque_gain: f64,
    pub torque_damping: f64,
}

impl Default for ActuationParams {
    fn default() -> Self {
        Self {
            eta: 0.75,
            action_scale: 0.1,
            clip_action: 1.0,
            ema_beta: 0.8,
            tracking_time_constant: 0.05,
            rate_limit: 8.0,
            torque_gain: 2.0,
            torque_damping: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandState {
    pub q: JointVector,
    pub qdot: JointVector,
    /// Joint target from the previous step (the one the joints are tracking).
    pub q_target_prev: JointVector,
    pub ema: JointVector,
    pub tau: JointVector,
}

impl HandState {
    /// Hand resting at `q` with targets on the current pose.
    pub fn at_rest(q: JointVector) -> Self {
        Self {
            q,
            qdot: JointVector::zeros(),
            q_target_prev: q,
            ema: JointVector::zeros(),
            tau: JointVector::zeros(),
        }
    }
}

/// Folds a relative action into the EMA accumulator and advances the joint
/// target; the target stays inside the joint limits.
pub fn apply_action(
    state: &HandState,
    action: &JointVector,
    params: &ActuationParams,
    kin: &FingerKinematics,
) -> Result<HandState> {
    if let Some(bad) = action.iter().position(|a| !a.is_finite()) {
        return Err(Error::Input(format!("action component {bad} is not finite")));
    }
    let clipped = action.map(|a| a.clamp(-params.clip_action, params.clip_action));
    let ema = state.ema * params.ema_beta + clipped * (1.0 - params.ema_beta);
    let target = kin.clamp(&(state.q_target_prev + ema * (params.eta * params.action_scale)));
    Ok(HandState {
        ema,
        q_target_prev: target,
        ..state.clone()
    })
}

/// First-order rate-limited tracking of the joint target.
pub fn step_joints(state: &HandState, dt: f64, params: &ActuationParams, kin: &FingerKinematics) -> HandState {
    let alpha = 1.0 - (-dt / params.tracking_time_constant).exp();
    let max_step = params.rate_limit * dt;
    let error = state.q_target_prev - state.q;
    let delta = error.map(|e| (alpha * e).clamp(-max_step, max_step));
    let q = kin.clamp(&(state.q + delta));
    let qdot = (q - state.q) / dt;
    let tau = error * params.torque_gain - qdot * params.torque_damping;
    HandState {
        q,
        qdot,
        tau,
        ..state.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn hand() -> FingerKinematics {
        FingerKinematics::builtin(9, 0.5).unwrap()
    }

    #[test]
    fn builtin_profile_has_22_joints() {
        let kin = hand();
        let total: usize = (0..5).map(|i| kin.joint_range(i).len()).sum();
        assert_eq!(total, NUM_JOINTS);
        assert_eq!(kin.joint_range(0).len(), 5);
        assert_eq!(kin.joint_range(4).len(), 5);
    }

    #[test]
    fn rejects_wrong_joint_total() {
        let mut specs = builtin_profile();
        specs[1].joints.pop();
        assert!(FingerKinematics::from_specs(&specs, 9, 0.5).is_err());
    }

    #[test]
    fn rejects_non_square_sensor_count() {
        assert!(FingerKinematics::builtin(8, 0.5).is_err());
    }

    #[test]
    fn rest_pose_matches_closed_form() {
        let kin = hand();
        let pose = kin.forward_kinematics(&JointVector::zeros());
        for (i, spec) in builtin_profile().iter().enumerate() {
            // straight chain: tip = base + (sum of link lengths) along the base heading
            let reach: f64 = spec.joints.iter().map(|j| j.offset[0]).sum::<f64>() + spec.tip_offset[0];
            let expected = Point::new(
                spec.base_position[0] + reach * spec.base_yaw.cos(),
                spec.base_position[1] + reach * spec.base_yaw.sin(),
                spec.base_position[2],
            );
            assert_relative_eq!(pose.tips[i], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn sensors_lie_on_the_cap() {
        let kin = hand();
        let pose = kin.forward_kinematics(kin.nominal());
        for i in 0..5 {
            for s in pose.sensors.finger(i) {
                assert_relative_eq!((s - pose.tips[i]).norm(), kin.cap_radius(i), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn yaw_joint_moves_only_its_finger_on_a_circle() {
        let kin = hand();
        let q0 = JointVector::zeros();
        let yaw = kin.joint_range(1).start; // index finger: first joint is yaw
        let mut q1 = q0;
        q1[yaw] = 0.3;
        let a = kin.forward_kinematics(&q0);
        let b = kin.forward_kinematics(&q1);
        let base = Point::from(builtin_profile()[1].base_position);
        assert_relative_eq!((a.tips[1] - base).norm(), (b.tips[1] - base).norm(), epsilon = 1e-12);
        assert!((a.tips[1] - b.tips[1]).norm() > 1e-3);
        for i in [0, 2, 3, 4] {
            assert_eq!(a.tips[i], b.tips[i]);
        }
    }

    #[test]
    fn stationary_hand_has_zero_tip_velocity() {
        let kin = hand();
        let pose = kin.forward_kinematics(kin.nominal());
        let v = fingertip_velocities(&pose.tips, &pose.tips, 0.0166);
        assert!(v.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn finite_difference_velocity_matches_jacobian() {
        let kin = hand();
        let dt = 0.0166;
        let q_at = |t: f64| {
            let mut q = *kin.nominal();
            for j in 0..NUM_JOINTS {
                q[j] += 0.2 * (1.3 * t + 0.4 * j as f64).sin();
            }
            q
        };
        for step in 0..50 {
            let t = step as f64 * dt;
            let (qa, qb) = (q_at(t), q_at(t + dt));
            let mid = q_at(t + 0.5 * dt);
            let qdot = (qb - qa) / dt;
            let fd = fingertip_velocities(
                &kin.forward_kinematics(&qa).tips,
                &kin.forward_kinematics(&qb).tips,
                dt,
            );
            let analytic = kin.tip_velocities(&mid, &qdot);
            for i in 0..5 {
                let rel = (fd[i] - analytic[i]).norm() / analytic[i].norm().max(1e-9);
                assert!(rel < 0.02, "finger {i} step {step}: {rel}");
            }
        }
    }

    #[test]
    fn ik_reaches_a_reachable_point() {
        let kin = hand();
        let mut q = *kin.nominal();
        q[7] += 0.2;
        let target = kin.fingertip(1, &q);
        let solved = kin.solve_tip(1, kin.nominal(), &target, 100);
        let miss = (kin.fingertip(1, &solved) - target).norm();
        assert!(miss < 1e-5, "miss {miss}");
    }

    #[test]
    fn zero_action_keeps_target_fixed() {
        let kin = hand();
        let params = ActuationParams::default();
        let mut state = HandState::at_rest(*kin.nominal());
        let start = state.q_target_prev;
        for _ in 0..20 {
            state = apply_action(&state, &JointVector::zeros(), &params, &kin).unwrap();
        }
        assert_eq!(state.q_target_prev, start);
    }

    #[test]
    fn constant_action_increment_converges_geometrically() {
        // nominal posture is far from limits for joint 1 (yaw of the thumb)
        let kin = hand();
        let params = ActuationParams::default();
        let c = 0.05;
        let mut action = JointVector::zeros();
        action[1] = c;
        let mut state = HandState::at_rest(*kin.nominal());
        let mut gap = c;
        for n in 1..=30 {
            let before = state.q_target_prev[1];
            state = apply_action(&state, &action, &params, &kin).unwrap();
            let new_gap = (state.ema[1] - c).abs();
            // closed form: ema_n = c (1 - beta^n)
            assert_relative_eq!(state.ema[1], c * (1.0 - params.ema_beta.powi(n)), epsilon = 1e-15);
            assert!(new_gap < gap);
            gap = new_gap;
            let increment = state.q_target_prev[1] - before;
            assert_relative_eq!(increment, params.eta * params.action_scale * state.ema[1], epsilon = 1e-15);
        }
        assert!((state.ema[1] - c).abs() < c * 0.01);
    }

    #[test]
    fn non_finite_action_rejected() {
        let kin = hand();
        let mut a = JointVector::zeros();
        a[4] = f64::NAN;
        let state = HandState::at_rest(*kin.nominal());
        assert!(matches!(
            apply_action(&state, &a, &ActuationParams::default(), &kin),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn joint_at_target_stays_put() {
        let kin = hand();
        let params = ActuationParams::default();
        let state = HandState::at_rest(*kin.nominal());
        let next = step_joints(&state, 0.0166, &params, &kin);
        assert_eq!(next.q, state.q);
        assert_eq!(next.tau, JointVector::zeros());
    }

    #[test]
    fn large_errors_are_rate_limited() {
        let kin = hand();
        let params = ActuationParams::default();
        let mut state = HandState::at_rest(*kin.nominal());
        state.q_target_prev = *kin.upper();
        let dt = 0.0166;
        let next = step_joints(&state, dt, &params, &kin);
        for j in 0..NUM_JOINTS {
            assert!((next.q[j] - state.q[j]).abs() <= params.rate_limit * dt + 1e-15);
        }
    }

    #[test]
    fn tracking_error_contracts() {
        let kin = hand();
        let params = ActuationParams::default();
        let mut state = HandState::at_rest(*kin.nominal());
        state.q_target_prev = kin.clamp(&(state.q + JointVector::repeat(0.05)));
        let e0 = (state.q_target_prev - state.q).norm();
        let s1 = step_joints(&state, 0.0166, &params, &kin);
        let e1 = (s1.q_target_prev - s1.q).norm();
        let s2 = step_joints(&s1, 0.0166, &params, &kin);
        let e2 = (s2.q_target_prev - s2.q).norm();
        assert!(e1 < e0 && e2 < e1);
    }

    proptest! {
        #[test]
        fn joints_stay_within_limits(actions in proptest::collection::vec(-3.0f64..3.0, 22 * 40)) {
            let kin = hand();
            let params = ActuationParams::default();
            let mut state = HandState::at_rest(*kin.nominal());
            for chunk in actions.chunks(22) {
                let a = JointVector::from_column_slice(chunk);
                state = apply_action(&state, &a, &params, &kin).unwrap();
                state = step_joints(&state, 0.0166, &params, &kin);
                for j in 0..NUM_JOINTS {
                    prop_assert!(state.q[j] >= kin.lower()[j] && state.q[j] <= kin.upper()[j]);
                    prop_assert!(state.q_target_prev[j] >= kin.lower()[j]);
                    prop_assert!(state.q_target_prev[j] <= kin.upper()[j]);
                    prop_assert!(state.qdot[j].abs() <= params.rate_limit + 1e-9);
                }
            }
        }
    }
}
