#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod bnn;
pub mod config;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod metrics;
pub mod mpc;
pub mod nlp;
pub mod plant;
pub mod plot;
pub mod residual;
pub mod smpc;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
