//! Compositional finite abstractions for networks of linear stochastic
//! control subsystems.
//!
//! The pipeline builds a finite MDP per subsystem, certifies each with a
//! quadratic storage function, checks the network-level compositionality
//! conditions, bounds the output mismatch between the concrete network and
//! its abstraction, synthesizes bounded-horizon safety controllers on the
//! abstractions and validates everything by coupled Monte-Carlo simulation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod certificate;
pub mod composition;
pub mod config;
pub mod error;
pub mod fmt;
pub mod grid;
pub mod linalg;
pub mod mdp;
pub mod model;
pub mod pipeline;
pub mod sim;
pub mod synthesis;

pub use error::{Error, Result};
