//! Adaptive LPV-MPC toolkit for coupled longitudinal and lateral vehicle
//! control.
//!
//! The crate contains a nonlinear single-track plant with Pacejka tires
//! ([`vehicle`]), the LPV prediction model ([`lpv`]), a condensed MPC with an
//! internal dense QP solver ([`mpc`], [`qp`]), a genetic algorithm mixing
//! roulette-wheel and tournament selection ([`ga`]), a small MLP that predicts
//! cornering stiffness ([`nn`]), the test track and disturbance profiles
//! ([`track`]) and the closed-loop experiment harness ([`harness`]).

pub mod error;
pub mod ga;
pub mod harness;
pub mod lpv;
pub mod mpc;
pub mod nn;
pub mod qp;
pub mod track;
pub mod vehicle;

pub use error::{Error, Result};
