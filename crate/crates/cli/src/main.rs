//! `lidtwist`: train, evaluate, ablate, pre-train the tactile encoder and
//! export metrics from trace files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lidtwist::config::RunConfig;
use lidtwist::contact_geometry::LidShape;
use lidtwist::harness::{self, Controller, TrainingRow};
use lidtwist::reward_engine::RewardSet;
use lidtwist::scripted_policies::GaitSchedule;
use lidtwist::Result;

const BUILD_ID: &str = env!("LIDTWIST_BUILD_ID");

#[derive(Parser)]
#[command(name = "lidtwist", version, about = "Tactile-reward lid twisting: training and evaluation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file (TOML, sections hand/lid/contact/rewards/randomization/encoder/gait/ppo/run).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set ppo.epochs=4`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Reward set: tac2motion, baseline, cpr_rr or crr_rr.
    #[arg(long)]
    reward_set: Option<RewardSet>,
    /// Lid shape: cylinder, square or hexagon.
    #[arg(long)]
    shape: Option<LidShape>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output root (overrides run.output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.overrides)?;
        if let Some(set) = self.reward_set {
            cfg.rewards.set = set;
        }
        if let Some(shape) = self.shape {
            cfg.lid.shape = shape;
        }
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.run.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a PPO policy; writes config, seed, build id, training.csv and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Suppress per-update progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Roll out a checkpoint (or the scripted / random controller) and report metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Policy checkpoint to evaluate.
        #[arg(long, conflicts_with_all = ["scripted", "random"])]
        checkpoint: Option<PathBuf>,
        /// Use the scripted gaiting controller.
        #[arg(long, conflicts_with = "random")]
        scripted: bool,
        /// Use uniformly random actions.
        #[arg(long)]
        random: bool,
        /// Number of episodes (defaults to run.eval_episodes).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train and evaluate every reward set on the requested shapes; prints one table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Reward sets to compare.
        #[arg(long, value_delimiter = ',', default_values = ["tac2motion", "cpr_rr", "crr_rr", "baseline"])]
        sets: Vec<RewardSet>,
        /// Shapes to train on (defaults to the configured shape).
        #[arg(long, value_delimiter = ',')]
        shapes: Vec<LidShape>,
    },
    /// Pre-train and freeze the tactile encoder.
    PretrainEncoder {
        #[command(flatten)]
        common: Common,
        /// Destination file (defaults to <out>/encoder.bin).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Recompute metrics from a directory of trace files.
    Export {
        /// Directory containing episode_*.jsonl traces.
        #[arg(long)]
        traces: PathBuf,
        /// Destination for episodes.csv, report.csv and table.txt.
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_row(tag: &str, row: &TrainingRow) {
    let episode_rs = row.episode_rs.map_or("-".to_owned(), |v| format!("{v:+.5}"));
    eprintln!(
        "{tag}update {:>5}  steps {:>9}  rs {:+.5}  episode_rs {episode_rs}  reward {:+.4}  kl {:.4}",
        row.update, row.env_steps, row.rollout_rs, row.mean_reward, row.approx_kl
    );
}

fn run_dir(cfg: &RunConfig, kind: &str, method: &str) -> PathBuf {
    cfg.run
        .output_dir
        .join(format!("{kind}-{method}-{}-seed{}", cfg.lid.shape, cfg.run.seed))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, quiet } => {
            let cfg = common.load()?;
            let dir = run_dir(&cfg, "train", cfg.rewards.set.as_str());
            let outcome = harness::train(&cfg, &dir, BUILD_ID, |row| {
                if !quiet {
                    print_row("", row);
                }
            })?;
            println!("{}", outcome.run_dir.display());
        }
        Command::Eval {
            common,
            checkpoint,
            scripted,
            random,
            episodes,
        } => {
            let cfg = common.load()?;
            let (controller, method) = if scripted {
                (Controller::Scripted(GaitSchedule::from_config(&cfg.gait)?), "scripted".to_owned())
            } else if random {
                (Controller::Random, "random".to_owned())
            } else {
                let path = checkpoint.ok_or_else(|| {
                    lidtwist::Error::Usage("eval needs --checkpoint, --scripted or --random".into())
                })?;
                let policy = harness::load_policy(&path)?;
                (Controller::Policy(Box::new(policy)), cfg.rewards.set.as_str().to_owned())
            };
            let dir = run_dir(&cfg, "eval", &method);
            let episodes = episodes.unwrap_or(cfg.run.eval_episodes);
            let reports = harness::run_eval(&cfg, &controller, &method, episodes, &dir, BUILD_ID)?;
            print!("{}", lidtwist::evaluation::format_table(&reports));
            println!("{}", dir.display());
        }
        Command::Ablate { common, sets, shapes } => {
            let cfg = common.load()?;
            let shapes = if shapes.is_empty() { vec![cfg.lid.shape] } else { shapes };
            let dir = cfg.run.output_dir.join(format!("ablate-seed{}", cfg.run.seed));
            let table = harness::ablate(&cfg, &sets, &shapes, &dir, BUILD_ID, |tag, row| {
                if row.update % 50 == 0 {
                    print_row(&format!("[{tag}] "), row);
                }
            })?;
            print!("{table}");
            println!("{}", dir.display());
        }
        Command::PretrainEncoder { common, output } => {
            let cfg = common.load()?;
            let path = output.unwrap_or_else(|| cfg.run.output_dir.join("encoder.bin"));
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
            }
            let (params, _) = harness::pretrain_encoder(&cfg, cfg.run.seed)?;
            params.save(&path)?;
            println!("{}  {}", params.checksum(), path.display());
        }
        Command::Export { traces, out } => {
            let reports = harness::export_traces(&traces, &out)?;
            print!("{}", lidtwist::evaluation::format_table(&reports));
        }
    }
    Ok(())
}

fn io_error(path: &Path, e: std::io::Error) -> lidtwist::Error {
    lidtwist::Error::Io {
        path: path.to_owned(),
        source: e,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
