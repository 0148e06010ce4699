//! Run orchestration shared by the command-line tool and the acceptance suite:
//! encoder pre-training, PPO training runs, evaluation, ablation sweeps and
//! trace export. Every run directory holds the effective configuration, the
//! seed, the build identifier and all outputs.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EncoderMode, RunConfig};
use crate::contact_geometry::LidShape;
use crate::environment::{Env, EnvSpec, VecEnv};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, format_table, write_episode_csv, write_report_csv, EpisodeMetrics, MetricReport};
use crate::hand_model::JointVector;
use crate::ppo_learner::{Checkpoint, Collector, Learner, PolicyParams, UpdateStats};
use crate::reward_engine::RewardSet;
use crate::scripted_policies::{friction_dataset, gait_action, GaitSchedule};
use crate::tactile_encoder::{pretrain, EncoderParams, FrictionHead, PretrainSettings, TactileEncoder};
use crate::trace::{read_trace, write_trace, TraceHeader};

/// Steps skipped at the start of each pre-training rollout (grasp settling).
pub const PRETRAIN_WARMUP: usize = 20;
pub const PRETRAIN_STRIDE: usize = 2;
const PRETRAIN_BATCH: usize = 64;
const ENCODER_FILE: &str = "encoder.bin";

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn passthrough(cfg: &RunConfig) -> TactileEncoder {
    TactileEncoder::Passthrough {
        sensors_per_finger: cfg.contact.sensors_per_finger,
    }
}

/// Evenly spaced frictions spanning the configured randomisation range.
pub fn friction_sweep(cfg: &RunConfig, n: usize) -> Vec<f64> {
    let (lo, hi) = (cfg.randomization.friction_min, cfg.randomization.friction_max);
    if n <= 1 {
        return vec![0.5 * (lo + hi); n];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Trains a tactile encoder (plus its friction head) on scripted rollouts
/// spanning the friction range.
pub fn pretrain_encoder(cfg: &RunConfig, seed: u64) -> Result<(EncoderParams, FrictionHead)> {
    let spec = Arc::new(EnvSpec::from_config(cfg, passthrough(cfg))?);
    let schedule = GaitSchedule::from_config(&cfg.gait)?;
    let frictions = friction_sweep(cfg, cfg.encoder.pretrain_episodes);
    let data = friction_dataset(
        &spec,
        &schedule,
        &frictions,
        cfg.encoder.pretrain_steps,
        PRETRAIN_WARMUP,
        PRETRAIN_STRIDE,
        seed,
    )?;
    let settings = PretrainSettings {
        window: cfg.encoder.window,
        sensors_per_finger: cfg.contact.sensors_per_finger,
        embed_dim: cfg.encoder.embed_dim,
        epochs: cfg.encoder.pretrain_epochs,
        batch_size: PRETRAIN_BATCH,
        learning_rate: cfg.encoder.learning_rate,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pretrain(&data.windows, &data.frictions, &cfg.encoder.hidden, &settings, &mut rng)
}

/// Fraction of held-out scripted windows whose predicted friction falls on the
/// correct side of `threshold`.
pub fn friction_probe_accuracy(
    cfg: &RunConfig,
    encoder: &EncoderParams,
    head: &FrictionHead,
    frictions: &[f64],
    threshold: f64,
    seed: u64,
) -> Result<f64> {
    let spec = Arc::new(EnvSpec::from_config(cfg, passthrough(cfg))?);
    let schedule = GaitSchedule::from_config(&cfg.gait)?;
    let data = friction_dataset(&spec, &schedule, frictions, cfg.encoder.pretrain_steps, PRETRAIN_WARMUP, 1, seed)?;
    let x = DMatrix::from_fn(encoder.input_dim(), data.windows.len(), |r, c| data.windows[c][r]);
    let predicted = head.predict(encoder, &x);
    let correct = predicted
        .iter()
        .zip(&data.frictions)
        .filter(|(p, f)| (**p >= threshold) == (**f >= threshold))
        .count();
    Ok(correct as f64 / predicted.len().max(1) as f64)
}

/// Loads the configured encoder, pre-training one into `run_dir` when the
/// configuration names none. Returns the encoder and the configuration with
/// the encoder path made explicit.
pub fn resolve_encoder(cfg: &RunConfig, run_dir: &Path) -> Result<(TactileEncoder, RunConfig)> {
    let mut effective = cfg.clone();
    match cfg.encoder.mode {
        EncoderMode::Passthrough => Ok((passthrough(cfg), effective)),
        EncoderMode::Pretrained => {
            let path = match &cfg.encoder.path {
                Some(p) => p.clone(),
                None => {
                    let (params, _) = pretrain_encoder(cfg, cfg.run.seed)?;
                    let path = run_dir.join(ENCODER_FILE);
                    params.save(&path)?;
                    path
                }
            };
            let params = EncoderParams::load(&path)?;
            effective.encoder.path = Some(path);
            Ok((TactileEncoder::Learned(params), effective))
        }
    }
}

fn write_run_metadata(dir: &Path, cfg: &RunConfig, build_id: &str) -> Result<()> {
    write_file(&dir.join("config.toml"), cfg.to_toml_string())?;
    write_file(&dir.join("seed.txt"), format!("{}\n", cfg.run.seed))?;
    write_file(&dir.join("build.txt"), format!("{build_id}\n"))
}

/// One row of the training curve, written once per PPO update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub update: usize,
    pub env_steps: u64,
    /// Mean per-step reward over the rollout.
    pub mean_reward: f64,
    /// Mean lid increment per step over the rollout.
    pub rollout_rs: f64,
    pub episodes_finished: usize,
    /// Mean return / RS of episodes finished during the rollout, if any.
    pub episode_return: Option<f64>,
    pub episode_rs: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub epochs: usize,
}

impl TrainingRow {
    fn new(update: usize, env_steps: u64, buf: &crate::ppo_learner::RolloutBuffer, stats: &UpdateStats) -> Self {
        let n = buf.len().max(1) as f64;
        let finished = buf.finished.len();
        let (episode_return, episode_rs) = if finished == 0 {
            (None, None)
        } else {
            let k = finished as f64;
            (
                Some(buf.finished.iter().map(|e| e.total_reward).sum::<f64>() / k),
                Some(buf.finished.iter().map(|e| e.rotation_score()).sum::<f64>() / k),
            )
        };
        Self {
            update,
            env_steps,
            mean_reward: buf.rewards.iter().sum::<f64>() / n,
            rollout_rs: buf.progress.iter().sum::<f64>() / n,
            episodes_finished: finished,
            episode_return,
            episode_rs,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            approx_kl: stats.approx_kl,
            clip_fraction: stats.clip_fraction,
            epochs: stats.epochs_completed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub config: RunConfig,
    pub final_checkpoint: PathBuf,
    pub curve: Vec<TrainingRow>,
    /// Checksums of the frozen encoder before and after training (`None` for passthrough).
    pub encoder_checksum_before: Option<String>,
    pub encoder_checksum_after: Option<String>,
}

pub fn num_updates(cfg: &RunConfig) -> usize {
    let per_update = cfg.run.num_envs * cfg.ppo.rollout_steps;
    cfg.run.total_steps.div_ceil(per_update).max(1)
}

/// Full PPO training run into `run_dir`. `progress` sees each curve row.
pub fn train(
    cfg: &RunConfig,
    run_dir: &Path,
    build_id: &str,
    mut progress: impl FnMut(&TrainingRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.run.num_envs == 0 || cfg.ppo.rollout_steps == 0 {
        return Err(Error::config("run.num_envs and ppo.rollout_steps must be positive"));
    }
    create_dir(run_dir)?;
    let (encoder, effective) = resolve_encoder(cfg, run_dir)?;
    write_run_metadata(run_dir, &effective, build_id)?;
    let checkpoint_dir = run_dir.join("checkpoints");
    create_dir(&checkpoint_dir)?;

    let checksum_before = encoder.checksum();
    let spec = Arc::new(EnvSpec::from_config(&effective, encoder)?);
    let mut envs = VecEnv::new(spec.clone(), effective.run.num_envs, effective.run.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(effective.run.seed);
    rng.set_stream(u64::MAX);
    let mut policy = PolicyParams::new(spec.obs_dim(), spec.privileged_dim(), &effective.ppo, &mut rng);
    let mut learner = Learner::new(effective.ppo.clone(), &policy);
    let mut collector = Collector::start(&mut envs);
    let config_hash = effective.hash();

    let csv_path = run_dir.join("training.csv");
    let mut writer = csv::Writer::from_path(&csv_path).map_err(|e| Error::format(&csv_path, e.to_string()))?;
    let updates = num_updates(&effective);
    let per_update = (effective.run.num_envs * effective.ppo.rollout_steps) as u64;
    let mut curve = Vec::with_capacity(updates);
    let mut final_checkpoint = checkpoint_dir.join("final.ckpt");
    for update in 1..=updates {
        let buf = collector.collect(
            &policy,
            &mut envs,
            effective.ppo.rollout_steps,
            effective.ppo.gamma,
            false,
            &mut rng,
        )?;
        let stats = learner.update(&mut policy, &buf, &mut rng);
        Learner::refresh_statistics(&mut policy, &buf);
        if policy.flat_params().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("policy parameters after update {update}")));
        }
        let row = TrainingRow::new(update, update as u64 * per_update, &buf, &stats);
        writer.serialize(&row).map_err(|e| Error::format(&csv_path, e.to_string()))?;
        writer.flush().map_err(|e| Error::io(&csv_path, e))?;
        progress(&row);
        curve.push(row);
        let last = update == updates;
        if last || (effective.run.checkpoint_interval > 0 && update % effective.run.checkpoint_interval == 0) {
            let ck = Checkpoint {
                config_hash: config_hash.clone(),
                step: update as u64 * per_update,
                policy: policy.clone(),
            };
            let name = if last {
                "final.ckpt".to_owned()
            } else {
                format!("update_{update:06}.ckpt")
            };
            final_checkpoint = checkpoint_dir.join(name);
            ck.save(&final_checkpoint)?;
        }
    }
    Ok(TrainOutcome {
        run_dir: run_dir.to_owned(),
        config: effective,
        final_checkpoint,
        curve,
        encoder_checksum_before: checksum_before,
        encoder_checksum_after: spec.encoder.checksum(),
    })
}

/// What drives the hand during evaluation.
#[derive(Debug, Clone)]
pub enum Controller {
    /// Deterministic (mean-action) rollout of a trained policy.
    Policy(Box<PolicyParams>),
    Scripted(GaitSchedule),
    /// Uniform actions in [-1, 1].
    Random,
}

impl Controller {
    fn action(&self, env: &Env, obs: &[f64], rng: &mut ChaCha8Rng) -> JointVector {
        match self {
            Controller::Policy(policy) => {
                let mut x = DMatrix::from_column_slice(obs.len(), 1, obs);
                policy.obs_stats.normalize(&mut x);
                let mean = policy.action_mean(&x);
                JointVector::from_iterator(mean.iter().copied())
            }
            Controller::Scripted(schedule) => {
                gait_action(env.spec(), env.hand(), env.lid(), schedule, env.step_count())
            }
            Controller::Random => JointVector::from_fn(|_, _| rng.random_range(-1.0..=1.0)),
        }
    }
}

/// Per-episode metrics and, when `trace_dir` is given, one trace file per episode.
pub fn evaluate(
    cfg: &RunConfig,
    encoder: TactileEncoder,
    controller: &Controller,
    method: &str,
    episodes: usize,
    trace_dir: Option<&Path>,
) -> Result<Vec<EpisodeMetrics>> {
    let spec = Arc::new(EnvSpec::from_config(cfg, encoder)?);
    if let Controller::Policy(p) = controller {
        if p.obs_dim() != spec.obs_dim() {
            return Err(Error::config(format!(
                "policy expects {}-dim observations, environment produces {}",
                p.obs_dim(),
                spec.obs_dim()
            )));
        }
    }
    if let Some(dir) = trace_dir {
        create_dir(dir)?;
    }
    let shape = cfg.lid.shape;
    // evaluation streams are disjoint from the training streams
    let eval_seed = cfg.run.seed ^ 0xe7a1_0000_0000_0000;
    (0..episodes)
        .into_par_iter()
        .map(|episode| {
            let mut env = Env::new(spec.clone(), eval_seed, episode as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(eval_seed.wrapping_add(episode as u64));
            env.set_record_trace(true);
            let (mut obs, _) = env.reset();
            let cause = loop {
                let action = controller.action(&env, &obs.0, &mut rng);
                let out = env.step(&action)?;
                obs = out.observation;
                if out.done {
                    break out.cause.expect("finished episodes carry a cause");
                }
            };
            let summary = env.summary(cause);
            let trace = env.take_trace();
            if let Some(dir) = trace_dir {
                let header = TraceHeader::new(method, shape.as_str(), episode, summary.friction, spec.dt);
                write_trace(&dir.join(format!("episode_{episode:04}.jsonl")), &header, &trace)?;
            }
            EpisodeMetrics::compute(
                method,
                shape,
                episode,
                summary.friction,
                summary.total_reward,
                &summary.lid_deltas,
                spec.dt,
            )
        })
        .collect()
}

/// Writes `episodes.csv`, `report.csv` and `table.txt` into `dir`.
pub fn write_metric_outputs(dir: &Path, episodes: &[EpisodeMetrics]) -> Result<Vec<MetricReport>> {
    create_dir(dir)?;
    let reports = aggregate(episodes)?;
    write_episode_csv(&dir.join("episodes.csv"), episodes)?;
    write_report_csv(&dir.join("report.csv"), &reports)?;
    write_file(&dir.join("table.txt"), format_table(&reports))?;
    Ok(reports)
}

/// Evaluation run with metadata, traces and metric files in `out_dir`.
pub fn run_eval(
    cfg: &RunConfig,
    controller: &Controller,
    method: &str,
    episodes: usize,
    out_dir: &Path,
    build_id: &str,
) -> Result<Vec<MetricReport>> {
    if episodes == 0 {
        return Err(Error::config("evaluation needs at least one episode"));
    }
    create_dir(out_dir)?;
    let (encoder, effective) = resolve_encoder(cfg, out_dir)?;
    write_run_metadata(out_dir, &effective, build_id)?;
    let metrics = evaluate(&effective, encoder, controller, method, episodes, Some(&out_dir.join("traces")))?;
    write_metric_outputs(out_dir, &metrics)
}

/// Loads a checkpoint, rejecting one produced under a different configuration
/// shape (observation size).
pub fn load_policy(path: &Path) -> Result<PolicyParams> {
    if !path.exists() {
        return Err(Error::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?.policy)
}

/// Trains and evaluates every reward set on every shape, sequentially, with a
/// shared frozen encoder. Returns the combined table text.
pub fn ablate(
    cfg: &RunConfig,
    sets: &[RewardSet],
    shapes: &[LidShape],
    out_dir: &Path,
    build_id: &str,
    mut progress: impl FnMut(&str, &TrainingRow),
) -> Result<String> {
    create_dir(out_dir)?;
    let (_, base) = resolve_encoder(cfg, out_dir)?;
    let mut all = Vec::new();
    for &shape in shapes {
        for &set in sets {
            let tag = format!("{}_{}", set.as_str(), shape.as_str());
            let mut run_cfg = base.clone();
            run_cfg.rewards.set = set;
            run_cfg.lid.shape = shape;
            let run_dir = out_dir.join(&tag);
            let outcome = train(&run_cfg, &run_dir, build_id, |row| progress(&tag, row))?;
            let policy = load_policy(&outcome.final_checkpoint)?;
            let (encoder, _) = resolve_encoder(&outcome.config, &run_dir)?;
            let metrics = evaluate(
                &outcome.config,
                encoder,
                &Controller::Policy(Box::new(policy)),
                set.as_str(),
                outcome.config.run.eval_episodes,
                Some(&run_dir.join("eval").join("traces")),
            )?;
            write_metric_outputs(&run_dir.join("eval"), &metrics)?;
            all.extend(metrics);
        }
    }
    write_metric_outputs(out_dir, &all)?;
    Ok(format_table(&aggregate(&all)?))
}

/// Recomputes per-episode metrics from a directory of trace files (sorted by
/// name) and writes the metric outputs into `out_dir`.
pub fn export_traces(trace_dir: &Path, out_dir: &Path) -> Result<Vec<MetricReport>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(trace_dir)
        .map_err(|e| Error::io(trace_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Usage(format!("no trace files in {}", trace_dir.display())));
    }
    let mut episodes = Vec::with_capacity(files.len());
    for path in &files {
        let (header, trace) = read_trace(path)?;
        let shape: LidShape = header.shape.parse()?;
        let deltas = trace.lid_deltas();
        let total_reward = trace.records.iter().map(|r| r.reward.total).sum();
        episodes.push(EpisodeMetrics::compute(
            &header.method,
            shape,
            header.episode,
            header.friction,
            total_reward,
            &deltas,
            header.dt,
        )?);
    }
    write_metric_outputs(out_dir, &episodes)
}
