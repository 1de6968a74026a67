//! Inhibitor attention in a small trainable encoder.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cost_model;
pub mod counters;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod gradcheck;
pub mod error;
pub mod ops;
pub mod optim;
pub mod seeds;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Sign, Tape, Var};
pub use tensor::Tensor;
