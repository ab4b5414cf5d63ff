//! Frequency plan design as a sequential decision process.
//!
//! The crate models the assignment of frequency groups and slot runs to
//! satellite beams under interference constraints, exposes it as a
//! reinforcement-learning environment with two action spaces and three reward
//! functions, and ships from-scratch DQN/PPO learners plus the experiment
//! harness (training, evaluation, sweeps, significance tests) and a CLI.

pub mod scenario;

pub mod env;
pub mod nn;

pub mod agents;
pub mod harness;

pub mod cli;
