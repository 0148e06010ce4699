//! The lid-twisting MDP: action processing, the fixed per-step pipeline,
//! domain randomisation, termination and a vectorised batch wrapper.
//!
//! Step order: action noise → EMA/target update → joint tracking →
//! forward kinematics → contact report → virtual torque and lid step →
//! rewards → termination → observation.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::contact_geometry::{
    compute_penetrations, make_lid_frames, normalize_and_grade, release_transitions, ContactFrameSet,
    ContactReport, LidShape, Point, ReleaseRule, NUM_FINGERS,
};
use crate::error::{Error, Result};
use crate::hand_model::{
    apply_action, builtin_profile, step_joints, ActuationParams, FingerKinematics, HandState, JointVector,
    NUM_JOINTS,
};
use crate::lid_dynamics::{calibrate_coupling, step_lid, virtual_torque, LidState};
use crate::reward_engine::{
    action_penalty, angle_penalty, compose, contact_pressure_reward, contact_release_reward, distance_shaping,
    gaiting_penalty, rotation_reward, work_penalty, RewardBreakdown, RewardSet, RewardWeights, WorkForm,
};
use crate::tactile_encoder::{TactileEncoder, TactileWindow};

/// Entries of every observation and privileged vector are clipped to this.
pub const OBS_CLIP: f64 = 10.0;
/// q, qdot, q^d_{t-1} and the lid centre.
pub const PROPRIOCEPTIVE_DIM: usize = 3 * NUM_JOINTS + 3;

/// Policy input: `[q, qdot, q^d_{t-1}, z, p]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation(pub Vec<f64>);

/// Critic input: the observation followed by `[wrapped lid angle, lid rate,
/// friction, raw penetrations / ε (5k), G / k (5)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivilegedState(pub Vec<f64>);

impl PrivilegedState {
    pub fn observation_part(&self, obs_dim: usize) -> &[f64] {
        &self.0[..obs_dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationCause {
    FingertipDistance,
    Timeout,
}

impl TerminationCause {
    pub fn as_str(self) -> &'static str {
        match self {
            TerminationCause::FingertipDistance => "fingertip_distance",
            TerminationCause::Timeout => "timeout",
        }
    }
}

/// Ends the episode when any sensor is at least `rho` from the nearest
/// contact frame, or when `step_count` reaches `max_steps`.
pub fn check_termination(
    report: &ContactReport,
    step_count: usize,
    rho: f64,
    max_steps: usize,
) -> (bool, Option<TerminationCause>) {
    if report.max_distance() >= rho {
        (true, Some(TerminationCause::FingertipDistance))
    } else if step_count >= max_steps {
        (true, Some(TerminationCause::Timeout))
    } else {
        (false, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomizationSpec {
    pub enabled: bool,
    pub action_noise_std: f64,
    pub joint_noise_std: f64,
    pub friction_min: f64,
    pub friction_max: f64,
}

impl RandomizationSpec {
    /// Friction used when randomisation is off: the middle of the range.
    pub fn nominal_friction(&self) -> f64 {
        0.5 * (self.friction_min + self.friction_max)
    }
}

/// One step of an episode as written to trace files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub lid_angle: f64,
    pub lid_delta: f64,
    pub reward: RewardBreakdown,
    pub contact: [bool; NUM_FINGERS],
    pub released: [bool; NUM_FINGERS],
    pub grasp: [f64; NUM_FINGERS],
    pub action: Vec<f64>,
    pub max_distance: f64,
    pub done: bool,
    pub cause: Option<TerminationCause>,
}

/// Full per-step record of one episode.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub friction: f64,
    pub records: Vec<TraceRecord>,
}

impl EpisodeTrace {
    pub fn lid_deltas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.lid_delta).collect()
    }
}

/// Compact end-of-episode summary, always collected.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub lid_deltas: Vec<f64>,
    pub total_reward: f64,
    pub friction: f64,
    pub cause: TerminationCause,
}

impl EpisodeSummary {
    pub fn len(&self) -> usize {
        self.lid_deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lid_deltas.is_empty()
    }

    pub fn rotation_score(&self) -> f64 {
        if self.lid_deltas.is_empty() {
            0.0
        } else {
            self.lid_deltas.iter().sum::<f64>() / self.lid_deltas.len() as f64
        }
    }
}

/// Immutable, shareable description of the simulated task.
#[derive(Debug, Clone)]
pub struct EnvSpec {
    pub kinematics: FingerKinematics,
    pub frames: ContactFrameSet,
    pub actuation: ActuationParams,
    pub epsilon: f64,
    pub termination_distance: f64,
    pub release_rule: ReleaseRule,
    pub max_episode_steps: usize,
    pub dt: f64,
    pub coupling_gain: f64,
    pub weights: RewardWeights,
    pub reward_set: RewardSet,
    pub work_form: WorkForm,
    pub desired_axis: Vector3<f64>,
    pub randomization: RandomizationSpec,
    pub lid_template: LidState,
    pub pregrasp: JointVector,
    pub init_jitter: f64,
    /// Frames kept in each environment's tactile window.
    pub tactile_window: usize,
    pub encoder: Arc<TactileEncoder>,
}

/// Pad-to-frame gap of the pre-grasp pose, as a multiple of ε.
const PREGRASP_GAP: f64 = 1.2;

impl EnvSpec {
    pub fn from_config(config: &RunConfig, encoder: TactileEncoder) -> Result<Self> {
        config.validate()?;
        let specs = config.hand.fingers.clone().unwrap_or_else(builtin_profile);
        let kinematics =
            FingerKinematics::from_specs(&specs, config.contact.sensors_per_finger, config.contact.cap_spread)?;
        if encoder.sensors_per_finger() != kinematics.sensors_per_finger() {
            return Err(Error::config(format!(
                "encoder expects {} sensors per finger, hand has {}",
                encoder.sensors_per_finger(),
                kinematics.sensors_per_finger()
            )));
        }
        if let TactileEncoder::Learned(p) = &encoder {
            if p.window != config.encoder.window {
                return Err(Error::config(format!(
                    "encoder was trained on {} frames, encoder.window is {}",
                    p.window, config.encoder.window
                )));
            }
        }
        let frames = make_lid_frames(config.lid.shape, config.lid.rim_radius, config.lid.frames)?;
        let r = &config.randomization;
        let coupling_gain = config.lid.coupling_gain.unwrap_or_else(|| {
            calibrate_coupling(
                kinematics.sensors_per_finger(),
                config.lid.calibration_speed,
                config.lid.rim_radius,
                r.friction_max,
                config.lid.torque_scale,
                config.lid.calibration_margin,
            )
        });
        let lid_template =
            LidState::at_rest(r.friction_min, config.lid.torque_scale, config.lid.damping, config.lid.inertia);
        let pregrasp = pregrasp_pose(&kinematics, &frames, PREGRASP_GAP * config.contact.epsilon);
        let axis = config.rewards.desired_axis;
        Ok(Self {
            kinematics,
            frames,
            actuation: config.hand.actuation(),
            epsilon: config.contact.epsilon,
            termination_distance: config.contact.termination_distance,
            release_rule: config.contact.release_rule,
            max_episode_steps: config.run.max_episode_steps,
            dt: config.run.dt,
            coupling_gain,
            weights: config.rewards.weights,
            reward_set: config.rewards.set,
            work_form: config.rewards.work_form,
            desired_axis: Vector3::new(axis[0], axis[1], axis[2]),
            randomization: RandomizationSpec {
                enabled: r.enabled,
                action_noise_std: r.action_noise_std,
                joint_noise_std: r.joint_noise_std,
                friction_min: r.friction_min,
                friction_max: r.friction_max,
            },
            lid_template,
            pregrasp,
            init_jitter: config.hand.init_jitter,
            tactile_window: config.encoder.window,
            encoder: Arc::new(encoder),
        })
    }

    pub fn shape(&self) -> LidShape {
        self.frames.shape()
    }

    pub fn sensors_per_finger(&self) -> usize {
        self.kinematics.sensors_per_finger()
    }

    pub fn obs_dim(&self) -> usize {
        PROPRIOCEPTIVE_DIM + self.encoder.embed_dim()
    }

    pub fn privileged_dim(&self) -> usize {
        self.obs_dim() + 3 + NUM_FINGERS * self.sensors_per_finger() + NUM_FINGERS
    }

    /// Frame point each finger grasps first: the one nearest its base heading.
    pub fn home_frame(&self, finger: usize) -> usize {
        home_frame(&self.kinematics, &self.frames, finger)
    }
}

fn home_frame(kin: &FingerKinematics, frames: &ContactFrameSet, finger: usize) -> usize {
    let tip = kin.fingertip(finger, kin.nominal());
    let heading = tip.y.atan2(tip.x);
    let mut best = (f64::INFINITY, 0);
    for (j, p) in frames.points().iter().enumerate() {
        let diff = angle_diff(p.y.atan2(p.x), heading).abs();
        if diff < best.0 {
            best = (diff, j);
        }
    }
    best.1
}

/// Signed smallest difference `a - b` wrapped to `(-π, π]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let mut d = (a - b) % (2.0 * PI);
    if d > PI {
        d -= 2.0 * PI;
    } else if d <= -PI {
        d += 2.0 * PI;
    }
    d
}

/// World point of the central pad sensor of `finger` at `q`.
pub fn pad_point(kin: &FingerKinematics, finger: usize, q: &JointVector) -> Point {
    let (tip, rot) = kin.tip_frame(finger, q);
    tip + rot * Vector3::x() * kin.cap_radius(finger)
}

/// Outward normal of the fingertip cap centre (the distal link's +x).
pub fn pad_direction(kin: &FingerKinematics, finger: usize, q: &JointVector) -> Vector3<f64> {
    kin.tip_frame(finger, q).1 * Vector3::x()
}

/// Fingertip target that places the pad centre at `pad`, given the current
/// pad orientation at `q`.
pub fn tip_target_for_pad(kin: &FingerKinematics, finger: usize, q: &JointVector, pad: &Point) -> Point {
    pad - pad_direction(kin, finger, q) * kin.cap_radius(finger)
}

/// Solves for a pose whose pad centres hover `gap` above each finger's home
/// frame.
pub fn pregrasp_pose(kin: &FingerKinematics, frames: &ContactFrameSet, gap: f64) -> JointVector {
    let mut q = *kin.nominal();
    for finger in 0..NUM_FINGERS {
        let target_pad = frames.points()[home_frame(kin, frames, finger)] + Vector3::new(0.0, 0.0, gap);
        for _ in 0..6 {
            let tip = tip_target_for_pad(kin, finger, &q, &target_pad);
            q = kin.solve_tip(finger, &q, &tip, 60);
        }
    }
    q
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observation: Observation,
    pub privileged: PrivilegedState,
    pub reward: RewardBreakdown,
    pub done: bool,
    pub cause: Option<TerminationCause>,
    pub lid_delta: f64,
}

/// One simulated hand-and-lid instance.
#[derive(Debug, Clone)]
pub struct Env {
    spec: Arc<EnvSpec>,
    rng: ChaCha8Rng,
    hand: HandState,
    lid: LidState,
    tips: [Point; NUM_FINGERS],
    previous_report: Option<ContactReport>,
    report: ContactReport,
    window: TactileWindow,
    step_count: usize,
    done: bool,
    friction_override: Option<f64>,
    record_trace: bool,
    trace: EpisodeTrace,
    deltas: Vec<f64>,
    episode_reward: f64,
}

impl Env {
    /// An environment drawing from stream `stream` of the seed's generator;
    /// call [`Env::reset`] before stepping.
    pub fn new(spec: Arc<EnvSpec>, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let k = spec.sensors_per_finger();
        let window = TactileWindow::zeroed(spec.tactile_window, k);
        let hand = HandState::at_rest(spec.pregrasp);
        let tips = spec.kinematics.forward_kinematics(&hand.q).tips;
        Self {
            lid: spec.lid_template.clone(),
            spec,
            rng,
            hand,
            tips,
            previous_report: None,
            report: ContactReport::empty(k),
            window,
            step_count: 0,
            done: true,
            friction_override: None,
            record_trace: false,
            trace: EpisodeTrace::default(),
            deltas: Vec::new(),
            episode_reward: 0.0,
        }
    }

    pub fn spec(&self) -> &Arc<EnvSpec> {
        &self.spec
    }

    pub fn hand(&self) -> &HandState {
        &self.hand
    }

    pub fn lid(&self) -> &LidState {
        &self.lid
    }

    pub fn report(&self) -> &ContactReport {
        &self.report
    }

    pub fn window(&self) -> &TactileWindow {
        &self.window
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Pins the friction drawn at the next resets (used for data collection).
    pub fn set_friction_override(&mut self, friction: Option<f64>) {
        self.friction_override = friction;
    }

    pub fn set_record_trace(&mut self, on: bool) {
        self.record_trace = on;
    }

    pub fn take_trace(&mut self) -> EpisodeTrace {
        std::mem::take(&mut self.trace)
    }

    pub fn reset(&mut self) -> (Observation, PrivilegedState) {
        let spec = self.spec.clone();
        let r = spec.randomization;
        let friction = match self.friction_override {
            Some(f) => f,
            None if r.enabled => {
                if r.friction_max > r.friction_min {
                    self.rng.random_range(r.friction_min..=r.friction_max)
                } else {
                    r.friction_min
                }
            }
            None => r.nominal_friction(),
        };
        let mut q = spec.pregrasp;
        if spec.init_jitter > 0.0 {
            for v in q.iter_mut() {
                *v += self.rng.random_range(-spec.init_jitter..=spec.init_jitter);
            }
        }
        let q = spec.kinematics.clamp(&q);
        self.hand = HandState::at_rest(q);
        self.lid = LidState {
            friction,
            ..spec.lid_template.clone()
        };
        let pose = spec.kinematics.forward_kinematics(&q);
        self.tips = pose.tips;
        let report = compute_penetrations(&pose.sensors, &spec.frames, spec.epsilon)
            .expect("frame set validated at construction");
        self.report = normalize_and_grade(report);
        self.previous_report = None;
        self.window.reset();
        self.step_count = 0;
        self.done = false;
        self.trace = EpisodeTrace {
            friction,
            records: Vec::new(),
        };
        self.deltas.clear();
        self.episode_reward = 0.0;
        self.observe()
    }

    pub fn step(&mut self, action: &JointVector) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Usage("step called on a finished episode; reset first".into()));
        }
        if let Some(bad) = action.iter().position(|a| !a.is_finite()) {
            return Err(Error::Input(format!("action component {bad} is not finite")));
        }
        let spec = self.spec.clone();
        let clip = spec.actuation.clip_action;
        let policy_action = action.map(|a| a.clamp(-clip, clip));

        // (1) action noise
        let mut noisy = policy_action;
        if spec.randomization.enabled && spec.randomization.action_noise_std > 0.0 {
            let normal = Normal::new(0.0, spec.randomization.action_noise_std).expect("validated std");
            for v in noisy.iter_mut() {
                *v += normal.sample(&mut self.rng);
            }
        }
        // (2) EMA / target update, (3) joint tracking
        let q_old = self.hand.q;
        let targeted = apply_action(&self.hand, &noisy, &spec.actuation, &spec.kinematics)?;
        self.hand = step_joints(&targeted, spec.dt, &spec.actuation, &spec.kinematics);
        // (4) forward kinematics
        let pose = spec.kinematics.forward_kinematics(&self.hand.q);
        let mut velocities = [Vector3::zeros(); NUM_FINGERS];
        for i in 0..NUM_FINGERS {
            velocities[i] = (pose.tips[i] - self.tips[i]) / spec.dt;
        }
        self.tips = pose.tips;
        // (5) contact against the frames at the current lid angle
        let frames = spec.frames.rotated(&self.lid.frame_rotation());
        let raw = compute_penetrations(&pose.sensors, &frames, spec.epsilon)?;
        let mut report = normalize_and_grade(raw);
        report.released = release_transitions(Some(&self.report), &report, spec.release_rule);
        // (6) virtual torque and lid dynamics
        let torque = virtual_torque(&report, &pose.tips, &velocities, &self.lid, spec.coupling_gain);
        let angle_before = self.lid.angle;
        self.lid = step_lid(&self.lid, torque, spec.dt);
        let lid_delta = self.lid.angle - angle_before;
        // (7) rewards
        let mut pad_distances = [0.0; NUM_FINGERS];
        for (i, d) in pad_distances.iter_mut().enumerate() {
            *d = report.raw_row(i).iter().copied().fold(f64::INFINITY, f64::min);
        }
        let mut reward = RewardBreakdown {
            cpr: contact_pressure_reward(&report),
            crr: contact_release_reward(&report.released),
            rr: rotation_reward(&report.grasp_quality, lid_delta),
            angle: angle_penalty(&self.lid.axis, &spec.desired_axis)?,
            action: action_penalty(&policy_action),
            work: work_penalty(&self.hand.tau, &(self.hand.q - q_old), spec.work_form),
            gaiting: gaiting_penalty(&report.grasp_quality, &velocities, &pose.tips, &self.lid.center),
            distance: distance_shaping(&pad_distances),
            lid_delta,
            composed: 0.0,
            total: 0.0,
        };
        let total = compose(&mut reward, &spec.weights, spec.reward_set);
        // (8) termination
        self.step_count += 1;
        let (done, cause) =
            check_termination(&report, self.step_count, spec.termination_distance, spec.max_episode_steps);
        self.done = done;
        // (9) observation
        self.window.push(&report.penetrations);
        self.previous_report = Some(std::mem::replace(&mut self.report, report));
        let (observation, privileged) = self.observe();

        self.deltas.push(lid_delta);
        self.episode_reward += total;
        if self.record_trace {
            self.trace.records.push(TraceRecord {
                step: self.step_count,
                lid_angle: self.lid.angle,
                lid_delta,
                reward,
                contact: self.report.contact_now,
                released: self.report.released,
                grasp: self.report.grasp_quality,
                action: policy_action.iter().copied().collect(),
                max_distance: self.report.max_distance(),
                done,
                cause,
            });
        }
        Ok(StepOutcome {
            observation,
            privileged,
            reward,
            done,
            cause,
            lid_delta,
        })
    }

    /// Summary of the episode that just finished.
    pub fn summary(&self, cause: TerminationCause) -> EpisodeSummary {
        EpisodeSummary {
            lid_deltas: self.deltas.clone(),
            total_reward: self.episode_reward,
            friction: self.lid.friction,
            cause,
        }
    }

    fn observe(&mut self) -> (Observation, PrivilegedState) {
        let spec = &self.spec;
        let r = spec.randomization;
        let noise_std = if r.enabled { r.joint_noise_std } else { 0.0 };
        let mut obs = Vec::with_capacity(spec.obs_dim());
        if noise_std > 0.0 {
            let normal = Normal::new(0.0, noise_std).expect("validated std");
            obs.extend(self.hand.q.iter().map(|v| v + normal.sample(&mut self.rng)));
            obs.extend(self.hand.qdot.iter().map(|v| v + normal.sample(&mut self.rng)));
        } else {
            obs.extend(self.hand.q.iter());
            obs.extend(self.hand.qdot.iter());
        }
        obs.extend(self.hand.q_target_prev.iter());
        let z = spec.encoder.encode(&self.window).expect("window shaped from the encoder");
        obs.extend(z.iter());
        obs.extend(self.lid.center.iter());
        clip_all(&mut obs);

        let mut privileged = Vec::with_capacity(spec.privileged_dim());
        privileged.extend_from_slice(&obs);
        privileged.push(angle_diff(self.lid.angle, 0.0));
        privileged.push(self.lid.rate);
        privileged.push(self.lid.friction);
        let eps = spec.epsilon;
        privileged.extend(
            self.report
                .raw_distances
                .iter()
                .map(|&d| if d <= eps { d / eps } else { 0.0 }),
        );
        let k = spec.sensors_per_finger() as f64;
        privileged.extend(self.report.grasp_quality.iter().map(|g| g / k));
        clip_all(&mut privileged);
        (Observation(obs), PrivilegedState(privileged))
    }
}

fn clip_all(values: &mut [f64]) {
    for v in values {
        *v = v.clamp(-OBS_CLIP, OBS_CLIP);
    }
}

/// Row-aligned outputs of [`VecEnv::batch_step`].
#[derive(Debug, Clone)]
pub struct BatchStep {
    /// Observation after the step, or of the fresh episode after an auto-reset.
    pub observations: Vec<Observation>,
    pub privileged: Vec<PrivilegedState>,
    pub rewards: Vec<f64>,
    pub breakdowns: Vec<RewardBreakdown>,
    pub dones: Vec<bool>,
    pub causes: Vec<Option<TerminationCause>>,
    /// Privileged state reached by the final step of a finished episode.
    pub terminal_privileged: Vec<Option<PrivilegedState>>,
    pub finished: Vec<Option<EpisodeSummary>>,
    pub lid_deltas: Vec<f64>,
}

/// `N` independent environments stepped together.
#[derive(Debug, Clone)]
pub struct VecEnv {
    envs: Vec<Env>,
}

struct RowOutput {
    observation: Observation,
    privileged: PrivilegedState,
    reward: RewardBreakdown,
    done: bool,
    cause: Option<TerminationCause>,
    terminal: Option<PrivilegedState>,
    finished: Option<EpisodeSummary>,
    lid_delta: f64,
}

impl VecEnv {
    /// Environment `i` uses stream `i` of `seed`.
    pub fn new(spec: Arc<EnvSpec>, n: usize, seed: u64) -> Self {
        Self {
            envs: (0..n).map(|i| Env::new(spec.clone(), seed, i as u64)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn envs(&self) -> &[Env] {
        &self.envs
    }

    pub fn envs_mut(&mut self) -> &mut [Env] {
        &mut self.envs
    }

    pub fn reset(&mut self) -> (Vec<Observation>, Vec<PrivilegedState>) {
        self.envs.iter_mut().map(|e| e.reset()).unzip()
    }

    /// Steps every environment; finished episodes are reset in the same call.
    pub fn batch_step(&mut self, actions: &[JointVector]) -> Result<BatchStep> {
        if actions.len() != self.envs.len() {
            return Err(Error::Input(format!(
                "got {} action rows for {} environments",
                actions.len(),
                self.envs.len()
            )));
        }
        let rows: Vec<Result<RowOutput>> = self
            .envs
            .par_iter_mut()
            .zip(actions.par_iter())
            .map(|(env, action)| {
                let out = env.step(action)?;
                if out.done {
                    let cause = out.cause.expect("finished episodes carry a cause");
                    let summary = env.summary(cause);
                    let (observation, privileged) = env.reset();
                    Ok(RowOutput {
                        observation,
                        privileged,
                        reward: out.reward,
                        done: true,
                        cause: out.cause,
                        terminal: Some(out.privileged),
                        finished: Some(summary),
                        lid_delta: out.lid_delta,
                    })
                } else {
                    Ok(RowOutput {
                        observation: out.observation,
                        privileged: out.privileged,
                        reward: out.reward,
                        done: false,
                        cause: None,
                        terminal: None,
                        finished: None,
                        lid_delta: out.lid_delta,
                    })
                }
            })
            .collect();
        let n = rows.len();
        let mut batch = BatchStep {
            observations: Vec::with_capacity(n),
            privileged: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            breakdowns: Vec::with_capacity(n),
            dones: Vec::with_capacity(n),
            causes: Vec::with_capacity(n),
            terminal_privileged: Vec::with_capacity(n),
            finished: Vec::with_capacity(n),
            lid_deltas: Vec::with_capacity(n),
        };
        for row in rows {
            let row = row?;
            batch.observations.push(row.observation);
            batch.privileged.push(row.privileged);
            batch.rewards.push(row.reward.total);
            batch.breakdowns.push(row.reward);
            batch.dones.push(row.done);
            batch.causes.push(row.cause);
            batch.terminal_privileged.push(row.terminal);
            batch.finished.push(row.finished);
            batch.lid_deltas.push(row.lid_delta);
        }
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn spec_with(edit: impl FnOnce(&mut RunConfig)) -> Arc<EnvSpec> {
        let mut cfg = RunConfig::default();
        edit(&mut cfg);
        let encoder = TactileEncoder::Passthrough {
            sensors_per_finger: cfg.contact.sensors_per_finger,
        };
        Arc::new(EnvSpec::from_config(&cfg, encoder).unwrap())
    }

    fn spec() -> Arc<EnvSpec> {
        spec_with(|_| {})
    }

    #[test]
    fn same_seed_same_initial_observation() {
        let s = spec();
        let mut a = Env::new(s.clone(), 11, 0);
        let mut b = Env::new(s, 11, 0);
        assert_eq!(a.reset(), b.reset());
    }

    #[test]
    fn reset_zeroes_lid_and_history() {
        let mut env = Env::new(spec(), 3, 0);
        env.reset();
        for _ in 0..5 {
            env.step(&JointVector::from_element(0.3)).unwrap();
        }
        env.reset();
        assert_eq!(env.lid().angle, 0.0);
        assert_eq!(env.lid().rate, 0.0);
        assert_eq!(env.hand().ema, JointVector::zeros());
        assert!(env.window().flatten().iter().all(|&v| v == 0.0));
        assert_eq!(env.step_count(), 0);
    }

    #[test]
    fn friction_draws_cover_the_range() {
        let mut env = Env::new(spec(), 5, 0);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| {
                env.reset();
                env.lid().friction
            })
            .collect();
        let min = draws.iter().copied().fold(f64::INFINITY, f64::min);
        let max = draws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!(min >= 0.9 && max <= 1.5);
        assert!((mean - 1.2).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn pregrasp_pads_start_near_the_rim() {
        let s = spec();
        let pose = s.kinematics.forward_kinematics(&s.pregrasp);
        for i in 0..NUM_FINGERS {
            let nearest = pose
                .sensors
                .finger(i)
                .iter()
                .map(|p| crate::contact_geometry::nearest_distance(p, &s.frames).unwrap())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest <= 1.5 * s.epsilon, "finger {i}: {nearest}");
        }
    }

    #[test]
    fn inert_step_moves_nothing() {
        let s = spec_with(|c| c.randomization.enabled = false);
        let mut env = Env::new(s, 1, 0);
        env.reset();
        let out = env.step(&JointVector::zeros()).unwrap();
        assert_eq!(out.lid_delta, 0.0);
        assert_eq!(out.reward.rr, 0.0);
        assert_eq!(out.reward.cpr, 0.0);
        assert!(!out.done);
    }

    #[test]
    fn retracting_fingers_terminates_on_distance() {
        let s = spec_with(|c| c.randomization.enabled = false);
        let mut env = Env::new(s.clone(), 1, 0);
        env.reset();
        // open every pitch joint: fingertips swing up and away from the lid
        let mut action = JointVector::zeros();
        for i in 0..NUM_FINGERS {
            let range = s.kinematics.joint_range(i);
            for j in range.end - 3..range.end {
                action[j] = -1.0;
            }
        }
        let mut last = None;
        for _ in 0..400 {
            let out = env.step(&action).unwrap();
            if out.done {
                last = out.cause;
                break;
            }
        }
        assert_eq!(last, Some(TerminationCause::FingertipDistance));
        assert!(env.step(&action).is_err());
    }

    #[test]
    fn timeout_after_max_steps() {
        let s = spec_with(|c| {
            c.randomization.enabled = false;
            c.run.max_episode_steps = 1000;
        });
        let mut env = Env::new(s, 1, 0);
        env.reset();
        let mut steps = 0;
        loop {
            let out = env.step(&JointVector::zeros()).unwrap();
            steps += 1;
            if out.done {
                assert_eq!(out.cause, Some(TerminationCause::Timeout));
                break;
            }
        }
        assert_eq!(steps, 1000);
    }

    #[test]
    fn termination_boundaries() {
        let mut raw = vec![0.03; 45];
        let report = ContactReport::from_distances(9, raw.clone(), 0.005).unwrap();
        assert_eq!(check_termination(&report, 10, 0.06, 1000), (false, None));
        raw[17] = 0.061;
        let report = ContactReport::from_distances(9, raw.clone(), 0.005).unwrap();
        assert_eq!(check_termination(&report, 10, 0.06, 1000).1, Some(TerminationCause::FingertipDistance));
        raw[17] = 0.06;
        let report = ContactReport::from_distances(9, raw, 0.005).unwrap();
        assert!(check_termination(&report, 10, 0.06, 1000).0);
        let calm = ContactReport::from_distances(9, vec![0.01; 45], 0.005).unwrap();
        assert_eq!(check_termination(&calm, 1000, 0.06, 1000).1, Some(TerminationCause::Timeout));
    }

    #[test]
    fn observations_are_clipped_and_sized() {
        let s = spec();
        let mut env = Env::new(s.clone(), 2, 0);
        let (obs, privileged) = env.reset();
        assert_eq!(obs.0.len(), s.obs_dim());
        assert_eq!(obs.0.len(), 69 + NUM_FINGERS * 9);
        assert_eq!(privileged.0.len(), s.privileged_dim());
        assert_eq!(privileged.observation_part(s.obs_dim()), &obs.0[..]);
        for _ in 0..50 {
            let out = env.step(&JointVector::from_element(1.0)).unwrap();
            assert!(out.observation.0.iter().all(|v| v.abs() <= OBS_CLIP && v.is_finite()));
            if out.done {
                break;
            }
        }
    }

    #[test]
    fn disabled_randomization_observes_true_joints() {
        let s = spec_with(|c| c.randomization.enabled = false);
        let mut env = Env::new(s, 9, 0);
        env.reset();
        let out = env.step(&JointVector::from_element(0.2)).unwrap();
        let q: Vec<f64> = env.hand().q.iter().copied().collect();
        assert_eq!(&out.observation.0[..NUM_JOINTS], &q[..]);
    }

    #[test]
    fn nan_action_is_an_input_error() {
        let mut env = Env::new(spec(), 1, 0);
        env.reset();
        let mut a = JointVector::zeros();
        a[4] = f64::NAN;
        assert!(matches!(env.step(&a), Err(Error::Input(_))));
    }

    #[test]
    fn single_env_batch_matches_plain_step() {
        let s = spec();
        let mut plain = Env::new(s.clone(), 21, 0);
        let mut batch = VecEnv::new(s, 1, 21);
        plain.reset();
        batch.reset();
        for t in 0..20 {
            let a = JointVector::from_fn(|j, _| ((j + t) as f64 * 0.37).sin());
            let single = plain.step(&a).unwrap();
            let rows = batch.batch_step(&[a]).unwrap();
            assert_eq!(rows.rewards[0], single.reward.total);
            if single.done {
                break;
            }
            assert_eq!(rows.observations[0], single.observation);
        }
    }

    #[test]
    fn identical_streams_give_identical_rows() {
        let s = spec();
        let mut a = VecEnv::new(s.clone(), 3, 4);
        let mut b = VecEnv::new(s, 3, 4);
        a.reset();
        b.reset();
        let actions = vec![JointVector::from_element(0.1); 3];
        for _ in 0..10 {
            let ra = a.batch_step(&actions).unwrap();
            let rb = b.batch_step(&actions).unwrap();
            assert_eq!(ra.observations, rb.observations);
            assert_eq!(ra.rewards, rb.rewards);
        }
    }

    #[test]
    fn wrong_row_count_is_rejected() {
        let mut v = VecEnv::new(spec(), 2, 0);
        v.reset();
        assert!(matches!(v.batch_step(&[JointVector::zeros()]), Err(Error::Input(_))));
    }

    #[test]
    fn terminated_row_is_reset_in_the_same_call() {
        let s = spec_with(|c| {
            c.randomization.enabled = false;
            c.hand.init_jitter = 0.0;
            c.run.max_episode_steps = 3;
        });
        let mut v = VecEnv::new(s, 2, 0);
        let (first, _) = v.reset();
        let actions = vec![JointVector::from_element(0.5); 2];
        v.batch_step(&actions).unwrap();
        v.batch_step(&actions).unwrap();
        let rows = v.batch_step(&actions).unwrap();
        assert!(rows.dones.iter().all(|&d| d));
        assert_eq!(rows.causes[0], Some(TerminationCause::Timeout));
        assert!(rows.terminal_privileged[0].is_some());
        assert_eq!(rows.finished[0].as_ref().unwrap().len(), 3);
        // the emitted observation belongs to the fresh episode
        assert_eq!(rows.observations[0], first[0]);
        assert_eq!(v.envs()[0].step_count(), 0);
    }

    #[test]
    fn angle_diff_wraps() {
        assert!((angle_diff(0.1, 2.0 * PI - 0.1) - 0.2).abs() < 1e-12);
        assert!((angle_diff(-3.0, 3.0) - (2.0 * PI - 6.0)).abs() < 1e-12);
    }
}
