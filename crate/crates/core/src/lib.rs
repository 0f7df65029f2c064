// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod gru;
pub mod linalg;
pub mod metrics;
pub mod narrator;
pub mod resbrnn;
pub mod retrieval;
pub mod seeding;

pub use error::{Error, Result};
