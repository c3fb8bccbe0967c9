//! Safe decentralized reinforcement learning for feeder voltage control.
//!
//! The crate covers a linearized radial feeder model ([`grid_model`]), a
//! closed-loop stability certificate ([`stability`]), per-bus Lipschitz bound
//! design ([`bound_opt`]), monotone stacked-ReLU controllers ([`controller`]),
//! the closed-loop plant ([`env`]) and policy-gradient training ([`trainer`]).

// Negated comparisons such as `!(x > 0.0)` are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bound_opt;
pub mod controller;
pub mod env;
pub mod grid_model;
pub mod linalg;
pub mod rng;
pub mod stability;
pub mod trainer;
