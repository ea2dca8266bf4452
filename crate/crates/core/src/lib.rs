//! Simulation library for communicating neural-network learners: gossip
//! training with collective inference, teacher-driven hard-example curricula,
//! and a learned discrete message channel.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod curriculum;
pub mod dataio;
pub mod ensemble;
pub mod gossip;
pub mod harness;
pub mod language;
pub mod numcore;

pub use error::{Error, Result};
