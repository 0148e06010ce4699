//! Clipped PPO with generalised advantage estimation and an asymmetric
//! actor-critic: the actor sees the observation, the critic the privileged
//! state. Inputs are standardised with running statistics, and the critic
//! regresses standardised returns (value-target normalisation; rewards
//! themselves are never rescaled).

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::PpoConfig;
use crate::environment::{EpisodeSummary, TerminationCause, VecEnv};
use crate::error::{Error, Result};
use crate::hand_model::{JointVector, NUM_JOINTS};
use crate::nn::{clip_global_norm, read_f64s, read_u32, Activation, Adam, Mlp};

pub const ACTION_DIM: usize = NUM_JOINTS;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LTCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const LOG_2PI: f64 = 1.837_877_066_409_345_3;

/// Per-feature running mean and variance (parallel Welford merge).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
    pub count: f64,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            var: DVector::from_element(dim, 1.0),
            count: 0.0,
        }
    }

    /// Merges a batch stored column-wise (`dim × n`).
    pub fn update(&mut self, batch: &DMatrix<f64>) {
        let n = batch.ncols() as f64;
        if n == 0.0 {
            return;
        }
        let batch_mean = batch.column_mean();
        let mut batch_var = DVector::zeros(batch.nrows());
        for col in batch.column_iter() {
            let d = col - &batch_mean;
            batch_var += d.component_mul(&d);
        }
        batch_var /= n;
        if self.count == 0.0 {
            self.mean = batch_mean;
            self.var = batch_var;
            self.count = n;
            return;
        }
        let total = self.count + n;
        let delta = &batch_mean - &self.mean;
        self.mean += &delta * (n / total);
        self.var = (&self.var * self.count + batch_var * n + delta.component_mul(&delta) * (self.count * n / total))
            / total;
        self.count = total;
    }

    pub fn std(&self, i: usize) -> f64 {
        self.var[i].sqrt().max(1e-4)
    }

    /// Standardises each column in place, clipping to ±10.
    pub fn normalize(&self, batch: &mut DMatrix<f64>) {
        for mut col in batch.column_iter_mut() {
            for (i, v) in col.iter_mut().enumerate() {
                *v = ((*v - self.mean[i]) / self.std(i)).clamp(-10.0, 10.0);
            }
        }
    }

    fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(&(self.mean.len() as u32).to_le_bytes())?;
        for v in self.mean.iter().chain(self.var.iter()).chain(std::iter::once(&self.count)) {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    fn read_from(input: &mut impl Read) -> std::io::Result<Self> {
        let dim = read_u32(input)? as usize;
        let mean = DVector::from_vec(read_f64s(input, dim)?);
        let var = DVector::from_vec(read_f64s(input, dim)?);
        let count = read_f64s(input, 1)?[0];
        Ok(Self { mean, var, count })
    }
}

/// Actor, state-independent log standard deviation, critic and the input /
/// return statistics they are trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub actor: Mlp,
    pub log_std: DVector<f64>,
    pub critic: Mlp,
    pub obs_stats: RunningStats,
    pub privileged_stats: RunningStats,
    /// Statistics of the scalar returns; the critic predicts standardised values.
    pub return_stats: RunningStats,
    pub normalize_values: bool,
}

impl PolicyParams {
    pub fn new(obs_dim: usize, privileged_dim: usize, config: &PpoConfig, rng: &mut impl Rng) -> Self {
        let mut actor_sizes = vec![obs_dim];
        actor_sizes.extend_from_slice(&config.actor_hidden);
        actor_sizes.push(ACTION_DIM);
        let mut critic_sizes = vec![privileged_dim];
        critic_sizes.extend_from_slice(&config.critic_hidden);
        critic_sizes.push(1);
        Self {
            actor: Mlp::new(&actor_sizes, Activation::Tanh, 0.01, rng),
            log_std: DVector::from_element(ACTION_DIM, config.init_log_std),
            critic: Mlp::new(&critic_sizes, Activation::Identity, 1.0, rng),
            obs_stats: RunningStats::new(obs_dim),
            privileged_stats: RunningStats::new(privileged_dim),
            return_stats: RunningStats::new(1),
            normalize_values: config.normalize_values,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn privileged_dim(&self) -> usize {
        self.critic.input_dim()
    }

    fn value_scale(&self) -> (f64, f64) {
        if self.normalize_values && self.return_stats.count > 0.0 {
            (self.return_stats.mean[0], self.return_stats.std(0))
        } else {
            (0.0, 1.0)
        }
    }

    /// Action means for a batch of standardised observations (`obs_dim × n`).
    pub fn action_mean(&self, obs: &DMatrix<f64>) -> DMatrix<f64> {
        self.actor.forward(obs)
    }

    /// Values in return units for standardised privileged states.
    pub fn values(&self, privileged: &DMatrix<f64>) -> Vec<f64> {
        let (mu, sigma) = self.value_scale();
        self.critic.forward(privileged).iter().map(|v| mu + sigma * v).collect()
    }

    /// Log-density of `actions` (columns) under the Gaussian at `mean`.
    pub fn log_prob(&self, mean: &DMatrix<f64>, actions: &DMatrix<f64>) -> Vec<f64> {
        let log_norm: f64 = self.log_std.iter().sum::<f64>() + 0.5 * LOG_2PI * ACTION_DIM as f64;
        (0..actions.ncols())
            .map(|c| {
                let mut quad = 0.0;
                for j in 0..ACTION_DIM {
                    let z = (actions[(j, c)] - mean[(j, c)]) / self.log_std[j].exp();
                    quad += z * z;
                }
                -0.5 * quad - log_norm
            })
            .collect()
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().sum::<f64>() + 0.5 * (1.0 + LOG_2PI) * ACTION_DIM as f64
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.actor.param_slices();
        out.push(self.log_std.as_slice());
        out.extend(self.critic.param_slices());
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.actor.param_slices_mut();
        out.push(self.log_std.as_mut_slice());
        out.extend(self.critic.param_slices_mut());
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for slot in self.param_slices_mut() {
            slot.copy_from_slice(&flat[offset..offset + slot.len()]);
            offset += slot.len();
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        self.actor.write_to(out)?;
        out.write_all(&(self.log_std.len() as u32).to_le_bytes())?;
        for v in self.log_std.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        self.critic.write_to(out)?;
        self.obs_stats.write_to(out)?;
        self.privileged_stats.write_to(out)?;
        self.return_stats.write_to(out)?;
        out.write_all(&[self.normalize_values as u8])
    }

    pub fn read_from(input: &mut impl Read) -> std::io::Result<Self> {
        let actor = Mlp::read_from(input)?;
        let n = read_u32(input)? as usize;
        let log_std = DVector::from_vec(read_f64s(input, n)?);
        let critic = Mlp::read_from(input)?;
        let obs_stats = RunningStats::read_from(input)?;
        let privileged_stats = RunningStats::read_from(input)?;
        let return_stats = RunningStats::read_from(input)?;
        let mut flag = [0u8; 1];
        input.read_exact(&mut flag)?;
        let params = Self {
            actor,
            log_std,
            critic,
            obs_stats,
            privileged_stats,
            return_stats,
            normalize_values: flag[0] != 0,
        };
        let consistent = params.log_std.len() == ACTION_DIM
            && params.actor.output_dim() == ACTION_DIM
            && params.critic.output_dim() == 1
            && params.obs_stats.mean.len() == params.actor.input_dim()
            && params.privileged_stats.mean.len() == params.critic.input_dim();
        if !consistent {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "inconsistent policy shapes"));
        }
        Ok(params)
    }
}

/// One batched transition of a vectorised task.
#[derive(Debug, Clone)]
pub struct TaskStep {
    /// Next observations (fresh-episode observations where an episode ended).
    pub observations: Vec<Vec<f64>>,
    pub privileged: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Final privileged state of episodes cut by the time limit, to bootstrap from.
    pub truncated: Vec<Option<Vec<f64>>>,
    pub finished: Vec<Option<EpisodeSummary>>,
    /// Per-row progress signal logged alongside returns (lid increment).
    pub progress: Vec<f64>,
}

/// Anything PPO can collect from: `N` auto-resetting environments.
pub trait VectorTask {
    fn num_envs(&self) -> usize;
    fn reset_all(&mut self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>);
    fn step_all(&mut self, actions: &[JointVector]) -> Result<TaskStep>;
}

impl VectorTask for VecEnv {
    fn num_envs(&self) -> usize {
        self.len()
    }

    fn reset_all(&mut self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let (o, p) = self.reset();
        (o.into_iter().map(|x| x.0).collect(), p.into_iter().map(|x| x.0).collect())
    }

    fn step_all(&mut self, actions: &[JointVector]) -> Result<TaskStep> {
        let b = self.batch_step(actions)?;
        let truncated = b
            .terminal_privileged
            .into_iter()
            .zip(&b.causes)
            .map(|(p, c)| match c {
                Some(TerminationCause::Timeout) => p.map(|s| s.0),
                _ => None,
            })
            .collect();
        Ok(TaskStep {
            observations: b.observations.into_iter().map(|x| x.0).collect(),
            privileged: b.privileged.into_iter().map(|x| x.0).collect(),
            rewards: b.rewards,
            dones: b.dones,
            truncated,
            finished: b.finished,
            progress: b.lid_deltas,
        })
    }
}

/// Stateless 22-dimensional task: one-step episodes rewarded with
/// `-||a - target||²`. Used to smoke-test the learner.
#[derive(Debug, Clone)]
pub struct TargetActionTask {
    pub target: JointVector,
    pub n: usize,
}

impl TargetActionTask {
    pub const OBS: [f64; 1] = [1.0];
}

impl VectorTask for TargetActionTask {
    fn num_envs(&self) -> usize {
        self.n
    }

    fn reset_all(&mut self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (vec![Self::OBS.to_vec(); self.n], vec![Self::OBS.to_vec(); self.n])
    }

    fn step_all(&mut self, actions: &[JointVector]) -> Result<TaskStep> {
        if actions.len() != self.n {
            return Err(Error::Input("action row count mismatch".into()));
        }
        let rewards: Vec<f64> = actions
            .iter()
            .map(|a| -(a.map(|v| v.clamp(-1.0, 1.0)) - self.target).norm_squared())
            .collect();
        Ok(TaskStep {
            observations: vec![Self::OBS.to_vec(); self.n],
            privileged: vec![Self::OBS.to_vec(); self.n],
            finished: rewards
                .iter()
                .map(|&r| {
                    Some(EpisodeSummary {
                        lid_deltas: vec![0.0],
                        total_reward: r,
                        friction: 0.0,
                        cause: TerminationCause::Timeout,
                    })
                })
                .collect(),
            rewards,
            dones: vec![true; self.n],
            truncated: vec![None; self.n],
            progress: vec![0.0; self.n],
        })
    }
}

/// Samples of `N` environments over `T` steps, index `t * N + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer {
    pub num_envs: usize,
    pub steps: usize,
    /// Standardised observations, `obs_dim × NT`.
    pub observations: DMatrix<f64>,
    /// Standardised privileged states, `privileged_dim × NT`.
    pub privileged: DMatrix<f64>,
    /// Raw inputs, kept to refresh the running statistics.
    pub raw_observations: DMatrix<f64>,
    pub raw_privileged: DMatrix<f64>,
    pub actions: DMatrix<f64>,
    pub log_probs: Vec<f64>,
    /// Rewards, with `γ V(s_T)` added on time-limit truncation.
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Values of the states following the last step.
    pub last_values: Vec<f64>,
    pub progress: Vec<f64>,
    pub finished: Vec<EpisodeSummary>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Rolling collector state: the current inputs of every environment.
#[derive(Debug, Clone)]
pub struct Collector {
    observations: Vec<Vec<f64>>,
    privileged: Vec<Vec<f64>>,
}

fn columns(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let dim = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(dim, rows.len(), |r, c| rows[c][r])
}

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{name} entry {i} is {}", values[i])));
    }
    Ok(())
}

impl Collector {
    pub fn start(task: &mut impl VectorTask) -> Self {
        let (observations, privileged) = task.reset_all();
        Self {
            observations,
            privileged,
        }
    }

    /// Runs `steps` policy steps on every environment. With `deterministic`
    /// the action mean is executed.
    pub fn collect(
        &mut self,
        policy: &PolicyParams,
        task: &mut impl VectorTask,
        steps: usize,
        gamma: f64,
        deterministic: bool,
        rng: &mut impl Rng,
    ) -> Result<RolloutBuffer> {
        let n = task.num_envs();
        let total = n * steps;
        let mut buf = RolloutBuffer {
            num_envs: n,
            steps,
            observations: DMatrix::zeros(policy.obs_dim(), total),
            privileged: DMatrix::zeros(policy.privileged_dim(), total),
            raw_observations: DMatrix::zeros(policy.obs_dim(), total),
            raw_privileged: DMatrix::zeros(policy.privileged_dim(), total),
            actions: DMatrix::zeros(ACTION_DIM, total),
            log_probs: Vec::with_capacity(total),
            rewards: Vec::with_capacity(total),
            values: Vec::with_capacity(total),
            dones: Vec::with_capacity(total),
            last_values: Vec::new(),
            progress: Vec::with_capacity(total),
            finished: Vec::new(),
        };
        let std: Vec<f64> = policy.log_std.iter().map(|l| l.exp()).collect();
        for t in 0..steps {
            let raw_obs = columns(&self.observations);
            let raw_priv = columns(&self.privileged);
            let mut obs = raw_obs.clone();
            policy.obs_stats.normalize(&mut obs);
            let mut privileged = raw_priv.clone();
            policy.privileged_stats.normalize(&mut privileged);
            let mean = policy.action_mean(&obs);
            let values = policy.values(&privileged);
            check_finite("action mean", mean.as_slice())?;
            check_finite("value", &values)?;
            let mut actions = mean.clone();
            if !deterministic {
                for j in 0..ACTION_DIM {
                    for c in 0..n {
                        actions[(j, c)] += std[j] * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            let log_probs = policy.log_prob(&mean, &actions);
            let rows: Vec<JointVector> =
                (0..n).map(|c| JointVector::from_iterator(actions.column(c).iter().copied())).collect();
            let out = task.step_all(&rows)?;

            let base = t * n;
            buf.observations.columns_mut(base, n).copy_from(&obs);
            buf.privileged.columns_mut(base, n).copy_from(&privileged);
            buf.raw_observations.columns_mut(base, n).copy_from(&raw_obs);
            buf.raw_privileged.columns_mut(base, n).copy_from(&raw_priv);
            buf.actions.columns_mut(base, n).copy_from(&actions);
            buf.log_probs.extend(log_probs);
            buf.values.extend(values);
            let mut rewards = out.rewards.clone();
            let cut: Vec<usize> = (0..n).filter(|&i| out.truncated[i].is_some()).collect();
            if !cut.is_empty() {
                let states: Vec<Vec<f64>> = cut.iter().map(|&i| out.truncated[i].clone().expect("filtered")).collect();
                let mut m = columns(&states);
                policy.privileged_stats.normalize(&mut m);
                for (k, v) in policy.values(&m).into_iter().enumerate() {
                    rewards[cut[k]] += gamma * v;
                }
            }
            check_finite("reward", &rewards)?;
            buf.rewards.extend(rewards);
            buf.dones.extend(out.dones.iter().copied());
            buf.progress.extend(out.progress.iter().copied());
            buf.finished.extend(out.finished.into_iter().flatten());
            self.observations = out.observations;
            self.privileged = out.privileged;
        }
        let mut last = columns(&self.privileged);
        policy.privileged_stats.normalize(&mut last);
        buf.last_values = policy.values(&last);
        Ok(buf)
    }
}

/// Raw (un-normalised) GAE advantages and the matching returns.
pub fn gae_raw(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_values: &[f64],
    num_envs: usize,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let total = rewards.len();
    let steps = total / num_envs;
    let mut adv = vec![0.0; total];
    for i in 0..num_envs {
        let mut running = 0.0;
        for t in (0..steps).rev() {
            let idx = t * num_envs + i;
            let nonterminal = if dones[idx] { 0.0 } else { 1.0 };
            let next_value = if t + 1 == steps { last_values[i] } else { values[idx + num_envs] };
            let delta = rewards[idx] + gamma * next_value * nonterminal - values[idx];
            running = delta + gamma * lambda * nonterminal * running;
            adv[idx] = running;
        }
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Standardises to zero mean and unit variance; a constant batch maps to zeros.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = if std > 1e-8 { (*a - mean) / std } else { 0.0 };
    }
}

/// Normalised advantages and raw returns for a buffer.
pub fn gae(buffer: &RolloutBuffer, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let (mut adv, returns) = gae_raw(
        &buffer.rewards,
        &buffer.values,
        &buffer.dones,
        &buffer.last_values,
        buffer.num_envs,
        gamma,
        lambda,
    );
    normalize_advantages(&mut adv);
    (adv, returns)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCoefficients {
    pub clip: f64,
    pub entropy: f64,
    pub value: f64,
}

/// A minibatch view used by the loss.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub observations: DMatrix<f64>,
    pub privileged: DMatrix<f64>,
    pub actions: DMatrix<f64>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Critic targets in the critic's (standardised) output units.
    pub value_targets: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub total: f64,
}

/// PPO loss `-surrogate + c_v * value_loss - c_e * entropy` and its gradient
/// with respect to [`PolicyParams::flat_params`].
pub fn loss_and_gradient(policy: &PolicyParams, batch: &Minibatch, coef: &LossCoefficients) -> (LossTerms, Vec<f64>) {
    let b = batch.actions.ncols() as f64;
    let actor_cache = policy.actor.forward_cached(&batch.observations);
    let mean = actor_cache.output();
    let new_log_probs = policy.log_prob(mean, &batch.actions);
    let inv_var: Vec<f64> = policy.log_std.iter().map(|l| (-2.0 * l).exp()).collect();

    let mut terms = LossTerms::default();
    let mut d_logp = vec![0.0; new_log_probs.len()];
    for (i, (&lp, &old)) in new_log_probs.iter().zip(&batch.old_log_probs).enumerate() {
        let ratio = (lp - old).exp();
        let a = batch.advantages[i];
        let clipped = ratio.clamp(1.0 - coef.clip, 1.0 + coef.clip);
        let unclipped_obj = ratio * a;
        let clipped_obj = clipped * a;
        terms.policy -= unclipped_obj.min(clipped_obj) / b;
        if unclipped_obj <= clipped_obj {
            d_logp[i] = -ratio * a / b;
        }
        terms.approx_kl += ((ratio - 1.0) - (lp - old)) / b;
        if (ratio - 1.0).abs() > coef.clip {
            terms.clip_fraction += 1.0 / b;
        }
    }
    terms.entropy = policy.entropy();

    let mut grad_mean = DMatrix::zeros(ACTION_DIM, batch.actions.ncols());
    let mut grad_log_std = DVector::from_element(ACTION_DIM, -coef.entropy);
    for c in 0..batch.actions.ncols() {
        for j in 0..ACTION_DIM {
            let diff = batch.actions[(j, c)] - mean[(j, c)];
            grad_mean[(j, c)] = d_logp[c] * diff * inv_var[j];
            grad_log_std[j] += d_logp[c] * (diff * diff * inv_var[j] - 1.0);
        }
    }
    let actor_grads = policy.actor.backward(&actor_cache, &grad_mean);

    let critic_cache = policy.critic.forward_cached(&batch.privileged);
    let predictions = critic_cache.output();
    let mut grad_value = DMatrix::zeros(1, predictions.ncols());
    for c in 0..predictions.ncols() {
        let err = predictions[(0, c)] - batch.value_targets[c];
        terms.value += 0.5 * err * err / b;
        grad_value[(0, c)] = coef.value * err / b;
    }
    let critic_grads = policy.critic.backward(&critic_cache, &grad_value);

    terms.total = terms.policy + coef.value * terms.value - coef.entropy * terms.entropy;
    let mut flat = actor_grads.slices().concat();
    flat.extend(grad_log_std.iter());
    flat.extend(critic_grads.slices().concat());
    (terms, flat)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub epochs_completed: usize,
    pub early_stopped: bool,
}

/// Optimiser state that persists across updates.
#[derive(Debug, Clone)]
pub struct Learner {
    pub config: PpoConfig,
    adam: Adam,
}

impl Learner {
    pub fn new(config: PpoConfig, policy: &PolicyParams) -> Self {
        let adam = Adam::for_slices(config.learning_rate, &policy.param_slices());
        Self { config, adam }
    }

    /// Refreshes the running statistics from a buffer's raw inputs and its
    /// returns. Called after the update so stored inputs stay consistent.
    pub fn refresh_statistics(policy: &mut PolicyParams, buffer: &RolloutBuffer) {
        policy.obs_stats.update(&buffer.raw_observations);
        policy.privileged_stats.update(&buffer.raw_privileged);
    }

    /// Clipped-surrogate optimisation over `epochs` passes of shuffled minibatches.
    pub fn update(&mut self, policy: &mut PolicyParams, buffer: &RolloutBuffer, rng: &mut impl Rng) -> UpdateStats {
        let cfg = &self.config;
        let (advantages, returns) = gae(buffer, cfg.gamma, cfg.gae_lambda);
        if policy.normalize_values {
            policy
                .return_stats
                .update(&DMatrix::from_row_slice(1, returns.len(), &returns));
        }
        let (mu, sigma) = policy.value_scale();
        let targets: Vec<f64> = returns.iter().map(|r| (r - mu) / sigma).collect();
        let coef = LossCoefficients {
            clip: cfg.clip,
            entropy: cfg.entropy_coef,
            value: cfg.value_coef,
        };
        let total = buffer.len();
        let mb_size = total.div_ceil(cfg.minibatches).max(1);
        let mut order: Vec<usize> = (0..total).collect();
        let mut stats = UpdateStats::default();
        let mut batches = 0usize;
        'epochs: for _ in 0..cfg.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(mb_size) {
                let batch = Minibatch {
                    observations: select_columns(&buffer.observations, chunk),
                    privileged: select_columns(&buffer.privileged, chunk),
                    actions: select_columns(&buffer.actions, chunk),
                    old_log_probs: chunk.iter().map(|&i| buffer.log_probs[i]).collect(),
                    advantages: chunk.iter().map(|&i| advantages[i]).collect(),
                    value_targets: chunk.iter().map(|&i| targets[i]).collect(),
                };
                let (terms, mut grad) = loss_and_gradient(policy, &batch, &coef);
                let norm = clip_global_norm(&mut [grad.as_mut_slice()], cfg.max_grad_norm);
                let mut offset = 0;
                let shaped: Vec<&[f64]> = policy
                    .param_slices()
                    .iter()
                    .map(|s| {
                        let g = &grad[offset..offset + s.len()];
                        offset += s.len();
                        g
                    })
                    .collect();
                self.adam.step(&mut policy.param_slices_mut(), &shaped);
                batches += 1;
                stats.policy_loss += terms.policy;
                stats.value_loss += terms.value;
                stats.entropy += terms.entropy;
                stats.approx_kl += terms.approx_kl;
                stats.clip_fraction += terms.clip_fraction;
                stats.grad_norm += norm;
                if terms.approx_kl > cfg.kl_abort {
                    stats.early_stopped = true;
                    break 'epochs;
                }
            }
            stats.epochs_completed += 1;
        }
        let k = batches.max(1) as f64;
        stats.policy_loss /= k;
        stats.value_loss /= k;
        stats.entropy /= k;
        stats.approx_kl /= k;
        stats.clip_fraction /= k;
        stats.grad_norm /= k;
        stats
    }
}

fn select_columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])])
}

/// Policy snapshot with the hash of the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: u64,
    pub policy: PolicyParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_hash.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_hash.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        self.policy.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(origin, reason);
        let mut input = bytes;
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a policy checkpoint".into()));
        }
        let version = read_u32(&mut input).map_err(|e| bad(e.to_string()))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hash_len = read_u32(&mut input).map_err(|e| bad(e.to_string()))? as usize;
        if hash_len > 256 || input.len() < hash_len {
            return Err(bad("corrupt config hash".into()));
        }
        let config_hash = String::from_utf8(input[..hash_len].to_vec()).map_err(|e| bad(e.to_string()))?;
        input = &input[hash_len..];
        let mut step = [0u8; 8];
        input.read_exact(&mut step).map_err(|e| bad(e.to_string()))?;
        let policy = PolicyParams::read_from(&mut input).map_err(|e| bad(e.to_string()))?;
        if !input.is_empty() {
            return Err(bad("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            config_hash,
            step: u64::from_le_bytes(step),
            policy,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
