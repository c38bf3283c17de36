//! Numerical solver for commodity price formation under a randomly supplied
//! market.
//!
//! A population of rational agents trades a commodity whose supply follows an
//! SDE driven by a Brownian motion common to all agents; the price is the
//! Lagrange multiplier of the market-clearing constraint. Two small recurrent
//! networks — one for the price, one for the agents' trading rate — are
//! trained adversarially on a particle approximation of the game, and
//! convergence is monitored through computable mean-square residuals of the
//! discrete optimality system. A linear-quadratic instance with an affine
//! closed-form price serves as the analytic benchmark.

pub mod adversarial_trainer;
pub mod config;
pub mod diffgraph;
pub mod error;
pub mod lq_benchmark;
pub mod market_model;
pub mod matrix;
pub mod particle_system;
pub mod posterior_estimator;
pub mod rng;
pub mod rnn_policy;
pub mod runner;

pub use error::{Error, Result};
