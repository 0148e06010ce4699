//! Run configuration: a TOML document with the sections `hand`, `lid`,
//! `contact`, `rewards`, `randomization`, `encoder`, `gait`, `ppo` and `run`.
//! Every key has a default, unknown keys are rejected, and
//! `section.key=value` overrides are applied on top of the parsed document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contact_geometry::{LidShape, ReleaseRule};
use crate::error::{Error, Result};
use crate::hand_model::{ActuationParams, FingerSpec, BUILTIN_PROFILE};
use crate::reward_engine::{RewardSet, RewardWeights, WorkForm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HandConfig {
    pub profile: String,
    /// Explicit chain geometry replacing the built-in profile.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fingers: Option<Vec<FingerSpec>>,
    pub eta: f64,
    pub action_scale: f64,
    pub clip_action: f64,
    pub ema_beta: f64,
    pub tracking_time_constant: f64,
    pub rate_limit: f64,
    pub torque_gain: f64,
    pub torque_damping: f64,
    /// Uniform joint-space jitter applied to the pre-grasp pose on reset.
    pub init_jitter: f64,
}

impl Default for HandConfig {
    fn default() -> Self {
        let a = ActuationParams::default();
        Self {
            profile: BUILTIN_PROFILE.to_string(),
            fingers: None,
            eta: a.eta,
            action_scale: a.action_scale,
            clip_action: a.clip_action,
            ema_beta: a.ema_beta,
            tracking_time_constant: a.tracking_time_constant,
            rate_limit: a.rate_limit,
            torque_gain: a.torque_gain,
            torque_damping: a.torque_damping,
            init_jitter: 0.01,
        }
    }
}

impl HandConfig {
    pub fn actuation(&self) -> ActuationParams {
        ActuationParams {
            eta: self.eta,
            action_scale: self.action_scale,
            clip_action: self.clip_action,
            ema_beta: self.ema_beta,
            tracking_time_constant: self.tracking_time_constant,
            rate_limit: self.rate_limit,
            torque_gain: self.torque_gain,
            torque_damping: self.torque_damping,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidConfig {
    pub shape: LidShape,
    pub rim_radius: f64,
    pub frames: usize,
    pub inertia: f64,
    pub damping: f64,
    /// Kept for reference; no restoring spring is applied.
    pub stiffness: f64,
    /// Breakaway torque per unit of the friction multiplier (N·m).
    pub torque_scale: f64,
    /// Virtual-torque gain; calibrated from the fields below when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coupling_gain: Option<f64>,
    pub calibration_speed: f64,
    pub calibration_margin: f64,
}

impl Default for LidConfig {
    fn default() -> Self {
        Self {
            shape: LidShape::Cylinder,
            rim_radius: 0.04,
            frames: 8,
            inertia: 2e-4,
            damping: 3.0,
            stiffness: 0.5,
            torque_scale: 1.0,
            coupling_gain: None,
            calibration_speed: 0.03,
            calibration_margin: 12.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContactConfig {
    pub epsilon: f64,
    pub sensors_per_finger: usize,
    /// Polar angle of the outer sensor ring on the fingertip cap (radians).
    pub cap_spread: f64,
    pub release_rule: ReleaseRule,
    pub termination_distance: f64,
}

impl Default for ContactConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.005,
            sensors_per_finger: 9,
            cap_spread: 0.5,
            release_rule: ReleaseRule::Transition,
            termination_distance: 0.06,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub set: RewardSet,
    pub weights: RewardWeights,
    pub work_form: WorkForm,
    pub desired_axis: [f64; 3],
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            set: RewardSet::Tac2motion,
            weights: RewardWeights::default(),
            work_form: WorkForm::PerJoint,
            desired_axis: [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomizationConfig {
    pub enabled: bool,
    pub action_noise_std: f64,
    pub joint_noise_std: f64,
    pub friction_min: f64,
    pub friction_max: f64,
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            action_noise_std: 0.2,
            joint_noise_std: 0.4,
            friction_min: 0.9,
            friction_max: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Frozen pre-trained encoder loaded from (or written to) `encoder.path`.
    Pretrained,
    /// Current flattened pressure matrix, no learning.
    Passthrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    /// Frozen encoder file; a run pre-trains one into its directory when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub window: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub pretrain_episodes: usize,
    pub pretrain_steps: usize,
    pub pretrain_epochs: usize,
    pub learning_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            mode: EncoderMode::Pretrained,
            path: None,
            window: 10,
            embed_dim: 16,
            hidden: vec![64, 64],
            pretrain_episodes: 128,
            pretrain_steps: 300,
            pretrain_epochs: 40,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaitConfig {
    pub period: usize,
    pub swing_fingers: usize,
    /// Tangential fingertip speed during stance (m/s).
    pub stroke_speed: f64,
    pub lift_height: f64,
    /// +1 sweeps in the opening direction, -1 reverses.
    pub direction: f64,
    pub gain: f64,
}

impl Default for GaitConfig {
    fn default() -> Self {
        Self {
            period: 60,
            swing_fingers: 2,
            stroke_speed: 0.05,
            lift_height: 0.012,
            direction: 1.0,
            gain: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub rollout_steps: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    /// Approximate KL above which the remaining epochs are skipped.
    pub kl_abort: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub init_log_std: f64,
    pub normalize_values: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            learning_rate: 3e-4,
            epochs: 5,
            minibatches: 4,
            rollout_steps: 32,
            entropy_coef: 1e-3,
            value_coef: 0.5,
            max_grad_norm: 1.0,
            kl_abort: 0.05,
            actor_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            init_log_std: -0.5,
            normalize_values: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub num_envs: usize,
    pub total_steps: usize,
    pub max_episode_steps: usize,
    pub dt: f64,
    /// Checkpoint every this many PPO updates (the final update always saves).
    pub checkpoint_interval: usize,
    pub eval_episodes: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            num_envs: 64,
            total_steps: 2_000_000,
            max_episode_steps: 1000,
            dt: 0.0166,
            checkpoint_interval: 100,
            eval_episodes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub hand: HandConfig,
    pub lid: LidConfig,
    pub contact: ContactConfig,
    pub rewards: RewardConfig,
    pub randomization: RandomizationConfig,
    pub encoder: EncoderConfig,
    pub gait: GaitConfig,
    pub ppo: PpoConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serialises to TOML")
    }

    /// Hex SHA-256 of the effective configuration text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies `section.key=value` overrides; values are parsed as TOML and
    /// fall back to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc: toml::Table = toml::from_str(&self.to_toml_string()).map_err(|e| Error::config(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {item:?} is not of the form section.key=value")))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
                return Err(Error::config(format!("override key {key:?} must be section.key")));
            }
            let value = parse_value(raw.trim());
            let mut table = &mut doc;
            for segment in &path[..path.len() - 1] {
                table = table
                    .entry(segment.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::config(format!("override key {key:?} descends into a non-table")))?;
            }
            table.insert(path[path.len() - 1].to_string(), value);
        }
        let text = toml::to_string(&doc).map_err(|e| Error::config(e.to_string()))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hand.eta", self.hand.eta),
            ("hand.action_scale", self.hand.action_scale),
            ("hand.clip_action", self.hand.clip_action),
            ("hand.tracking_time_constant", self.hand.tracking_time_constant),
            ("hand.rate_limit", self.hand.rate_limit),
            ("lid.rim_radius", self.lid.rim_radius),
            ("lid.inertia", self.lid.inertia),
            ("lid.torque_scale", self.lid.torque_scale),
            ("lid.calibration_speed", self.lid.calibration_speed),
            ("lid.calibration_margin", self.lid.calibration_margin),
            ("contact.epsilon", self.contact.epsilon),
            ("contact.termination_distance", self.contact.termination_distance),
            ("run.dt", self.run.dt),
            ("ppo.learning_rate", self.ppo.learning_rate),
            ("ppo.clip", self.ppo.clip),
            ("gait.lift_height", self.gait.lift_height),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.hand.ema_beta) {
            return Err(Error::config(format!("hand.ema_beta must lie in [0, 1), got {}", self.hand.ema_beta)));
        }
        if self.lid.damping < 0.0 {
            return Err(Error::config("lid.damping must be non-negative"));
        }
        if let Some(k) = self.lid.coupling_gain {
            if !(k > 0.0 && k.is_finite()) {
                return Err(Error::config(format!("lid.coupling_gain must be positive, got {k}")));
            }
        }
        if self.lid.frames < 3 {
            return Err(Error::config(format!("lid.frames must be at least 3, got {}", self.lid.frames)));
        }
        let r = &self.randomization;
        if !(0.0 < r.friction_min && r.friction_min <= r.friction_max) {
            return Err(Error::config("randomization friction range must satisfy 0 < min <= max"));
        }
        if r.action_noise_std < 0.0 || r.joint_noise_std < 0.0 {
            return Err(Error::config("randomization noise levels must be non-negative"));
        }
        self.rewards.weights.validate()?;
        let axis = self.rewards.desired_axis;
        if axis.iter().map(|v| v * v).sum::<f64>() == 0.0 {
            return Err(Error::config("rewards.desired_axis must be non-zero"));
        }
        if self.encoder.window == 0 || self.encoder.embed_dim == 0 {
            return Err(Error::config("encoder window and embedding size must be positive"));
        }
        if self.gait.period < 5 || self.gait.swing_fingers >= 5 {
            return Err(Error::config("gait needs period >= 5 and fewer than 5 swinging fingers"));
        }
        if self.gait.direction.abs() != 1.0 {
            return Err(Error::config("gait.direction must be +1 or -1"));
        }
        if self.ppo.epochs == 0 || self.ppo.minibatches == 0 || self.ppo.rollout_steps == 0 {
            return Err(Error::config("ppo epochs, minibatches and rollout_steps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ppo.gamma) || !(0.0..=1.0).contains(&self.ppo.gae_lambda) {
            return Err(Error::config("ppo.gamma and ppo.gae_lambda must lie in [0, 1]"));
        }
        if self.run.num_envs == 0 || self.run.max_episode_steps == 0 {
            return Err(Error::config("run.num_envs and run.max_episode_steps must be positive"));
        }
        if self.hand.profile != BUILTIN_PROFILE && self.hand.fingers.is_none() {
            return Err(Error::config(format!(
                "unknown hand.profile {:?}; use {BUILTIN_PROFILE:?} or supply hand.fingers",
                self.hand.profile
            )));
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
