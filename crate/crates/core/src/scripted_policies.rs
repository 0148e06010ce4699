//! Hand-coded finger gaiting: stance fingers press on the rim and sweep
//! tangentially, swing fingers lift, travel back and regrasp a guide box.
//!
//! Angles along the rim are measured in the lid's positive sense (clockwise
//! seen from `+z`), so `progress = -atan2(y, x)`.

use std::sync::Arc;

use nalgebra::{Rotation3, Vector3};
use rayon::prelude::*;

use crate::config::GaitConfig;
use crate::contact_geometry::{Point, NUM_FINGERS};
use crate::environment::{angle_diff, pad_point, tip_target_for_pad, Env, EnvSpec, EpisodeSummary};
use crate::error::{Error, Result};
use crate::hand_model::{HandState, JointVector};
use crate::lid_dynamics::LidState;

/// Fraction of a swing spent lifting, and the fraction where descent starts.
const LIFT_END: f64 = 0.25;
const DESCENT_START: f64 = 0.75;
/// Height of the pad centre above a guide box while pressing on it.
const PRESS_GAP: f64 = 0.0025;
/// Travel per step during the swing relative to the stance stroke.
const SWING_SPEEDUP: f64 = 3.5;
const IK_ITERATIONS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct GaitSchedule {
    pub period: usize,
    /// Phase offset of each finger, in steps.
    pub offsets: [usize; NUM_FINGERS],
    /// Steps of each period spent in swing.
    pub swing_steps: usize,
    pub stroke_speed: f64,
    pub lift_height: f64,
    pub direction: f64,
    pub gain: f64,
}

impl GaitSchedule {
    /// Offsets `i * period / 5`, with `swing_fingers` fingers airborne at once.
    pub fn from_config(config: &GaitConfig) -> Result<Self> {
        let schedule = Self {
            period: config.period,
            offsets: std::array::from_fn(|i| i * config.period / NUM_FINGERS),
            swing_steps: config.period * config.swing_fingers / NUM_FINGERS,
            stroke_speed: config.stroke_speed,
            lift_height: config.lift_height,
            direction: config.direction,
            gain: config.gain,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.period == 0 || self.swing_steps >= self.period {
            return Err(Error::config("gait swing must be shorter than its period"));
        }
        let mut phases: Vec<usize> = self.offsets.iter().map(|o| o % self.period).collect();
        phases.sort_unstable();
        phases.dedup();
        if phases.len() != NUM_FINGERS {
            return Err(Error::config("gait phase offsets must be distinct modulo the period"));
        }
        let min_stance = (0..self.period).map(|t| self.stance_count(t)).min().unwrap_or(0);
        if min_stance < 2 {
            return Err(Error::config("gait must keep at least two fingers in stance"));
        }
        if self.stroke_speed < 0.0 || self.lift_height <= 0.0 {
            return Err(Error::config("gait stroke speed must be >= 0 and lift height > 0"));
        }
        Ok(())
    }

    /// Position within the swing in `[0, 1)`, or `None` during stance.
    pub fn swing_progress(&self, finger: usize, t: usize) -> Option<f64> {
        let phase = (t + self.offsets[finger]) % self.period;
        (phase < self.swing_steps).then(|| phase as f64 / self.swing_steps as f64)
    }

    pub fn stance_count(&self, t: usize) -> usize {
        (0..NUM_FINGERS).filter(|&i| self.swing_progress(i, t).is_none()).count()
    }

    /// Rim angle swept by one stance at radius `radius`.
    pub fn stroke_arc(&self, dt: f64, radius: f64) -> f64 {
        self.stroke_speed * (self.period - self.swing_steps) as f64 * dt / radius
    }
}

fn progress_angle(p: &Point) -> f64 {
    -p.y.atan2(p.x)
}

/// Rotates `p` forward by `delta` in the lid's positive sense about `+z`.
fn advance(p: &Point, delta: f64) -> Point {
    Rotation3::from_axis_angle(&Vector3::z_axis(), -delta) * p
}

fn step_towards(from: &Point, to: &Point, max_step: f64) -> Point {
    let d = to - from;
    let n = d.norm();
    if n <= max_step {
        *to
    } else {
        from + d * (max_step / n)
    }
}

/// Desired pad position of one finger for step `t`.
pub fn pad_goal(
    spec: &EnvSpec,
    hand: &HandState,
    lid: &LidState,
    schedule: &GaitSchedule,
    finger: usize,
    t: usize,
) -> Point {
    let kin = &spec.kinematics;
    let pad = pad_point(kin, finger, &hand.q_target_prev);
    let boxes = spec.frames.rotated(&lid.frame_rotation());
    let rim = spec.frames.rim_radius();
    let press_z = lid.center.z + PRESS_GAP;
    let dt = spec.dt;
    match schedule.swing_progress(finger, t) {
        None => {
            // stance: keep the pad on the box ring and sweep forward
            let nearest = boxes
                .points()
                .iter()
                .min_by(|a, b| (*a - pad).norm().total_cmp(&(*b - pad).norm()))
                .expect("frame set is non-empty");
            let radius = Vector3::new(nearest.x, nearest.y, 0.0).norm();
            let flat = Vector3::new(pad.x, pad.y, 0.0);
            let on_ring = if flat.norm() > 1e-9 { flat * (radius / flat.norm()) } else { flat };
            let delta = schedule.direction * schedule.stroke_speed * dt / radius;
            let mut goal = advance(&on_ring, delta);
            goal.z = press_z;
            goal
        }
        Some(u) => {
            let home = spec.frames.points()[spec.home_frame(finger)];
            let arc = schedule.stroke_arc(dt, rim);
            let start = progress_angle(&home) - schedule.direction * arc / 2.0;
            let regrasp = boxes
                .points()
                .iter()
                .min_by(|a, b| {
                    angle_diff(progress_angle(a), start)
                        .abs()
                        .total_cmp(&angle_diff(progress_angle(b), start).abs())
                })
                .expect("frame set is non-empty");
            let max_step = SWING_SPEEDUP * schedule.stroke_speed * dt;
            let lifted = press_z + schedule.lift_height;
            if u < LIFT_END {
                Point::new(pad.x, pad.y, press_z + schedule.lift_height * (u + 1.0 / schedule.swing_steps as f64) / LIFT_END)
            } else if u < DESCENT_START {
                let mut above = *regrasp;
                above.z = lifted;
                step_towards(&Point::new(pad.x, pad.y, lifted), &above, max_step)
            } else {
                let remaining = (1.0 - u - 1.0 / schedule.swing_steps as f64).max(0.0) / (1.0 - DESCENT_START);
                let mut target = *regrasp;
                target.z = press_z + schedule.lift_height * remaining;
                let mut from = pad;
                from.z = target.z;
                step_towards(&from, &target, max_step)
            }
        }
    }
}

/// Relative joint action that drives every finger towards its pad goal.
pub fn gait_action(
    spec: &EnvSpec,
    hand: &HandState,
    lid: &LidState,
    schedule: &GaitSchedule,
    t: usize,
) -> JointVector {
    let kin = &spec.kinematics;
    let seed = hand.q_target_prev;
    let mut desired = seed;
    for finger in 0..NUM_FINGERS {
        let goal = pad_goal(spec, hand, lid, schedule, finger, t);
        let mut q = seed;
        for _ in 0..2 {
            let tip = tip_target_for_pad(kin, finger, &q, &goal);
            q = kin.solve_tip(finger, &q, &tip, IK_ITERATIONS);
        }
        for j in kin.joint_range(finger) {
            desired[j] = q[j];
        }
    }
    let per_unit = spec.actuation.eta * spec.actuation.action_scale;
    let clip = spec.actuation.clip_action;
    (desired - seed).map(|d| (schedule.gain * d / per_unit).clamp(-clip, clip))
}

/// Runs one scripted episode from a fresh reset until termination or
/// `max_steps`; returns the summary and, per step, the flattened tactile
/// window seen after that step.
pub fn run_scripted_episode(
    env: &mut Env,
    schedule: &GaitSchedule,
    max_steps: usize,
    collect_windows: bool,
) -> Result<(EpisodeSummary, Vec<Vec<f64>>)> {
    env.reset();
    let mut windows = Vec::new();
    for t in 0..max_steps {
        let action = gait_action(env.spec(), env.hand(), env.lid(), schedule, t);
        let out = env.step(&action)?;
        if collect_windows {
            windows.push(env.window().flatten());
        }
        if out.done || t + 1 == max_steps {
            let cause = out.cause.unwrap_or(crate::environment::TerminationCause::Timeout);
            return Ok((env.summary(cause), windows));
        }
    }
    Err(Error::Input("scripted episode needs at least one step".into()))
}

/// Tactile windows paired with the friction they were recorded under.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrictionDataset {
    pub windows: Vec<Vec<f64>>,
    pub frictions: Vec<f64>,
    /// Episode index of each sample, for grouped splits.
    pub episodes: Vec<usize>,
}

/// Scripted episodes, one per entry of `frictions`, keeping every
/// `stride`-th window after `warmup` steps. Action noise is switched off so
/// the windows reflect the lid's response rather than injected jitter.
pub fn friction_dataset(
    spec: &Arc<EnvSpec>,
    schedule: &GaitSchedule,
    frictions: &[f64],
    steps: usize,
    warmup: usize,
    stride: usize,
    seed: u64,
) -> Result<FrictionDataset> {
    let mut quiet = (**spec).clone();
    quiet.randomization.action_noise_std = 0.0;
    let spec = Arc::new(quiet);
    let per_episode: Vec<Result<Vec<Vec<f64>>>> = frictions
        .par_iter()
        .enumerate()
        .map(|(e, &friction)| {
            let mut env = Env::new(spec.clone(), seed, e as u64);
            env.set_friction_override(Some(friction));
            let (_, windows) = run_scripted_episode(&mut env, schedule, steps, true)?;
            Ok(windows.into_iter().skip(warmup).step_by(stride.max(1)).collect())
        })
        .collect();
    let mut data = FrictionDataset::default();
    for (e, windows) in per_episode.into_iter().enumerate() {
        for w in windows? {
            data.windows.push(w);
            data.frictions.push(frictions[e]);
            data.episodes.push(e);
        }
    }
    Ok(data)
}
