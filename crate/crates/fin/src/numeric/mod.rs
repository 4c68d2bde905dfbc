//! Dense matrices, a reverse-mode tape, parameter storage, and Adam.

pub mod matrix;
pub mod params;
pub mod tape;

pub use matrix::{softmax_masked, DenseMatrix};
pub use params::{grad_check, AdamConfig, ParamStore};
pub use tape::{NodeId, Tape};
