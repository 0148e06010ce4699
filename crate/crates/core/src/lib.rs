//! Tactile-reward lid-twisting simulator: contact sensing, a kinematic
//! five-finger hand, stick-slip lid dynamics, reward terms, a frozen tactile
//! encoder, a vectorised environment, PPO and evaluation tooling.

pub mod config;
pub mod contact_geometry;
pub mod environment;
pub mod evaluation;
pub mod error;
pub mod hand_model;
pub mod harness;
pub mod lid_dynamics;
pub mod nn;
pub mod ppo_learner;
pub mod reward_engine;
pub mod scripted_policies;
pub mod tactile_encoder;
pub mod trace;

pub use error::{Error, Result};
