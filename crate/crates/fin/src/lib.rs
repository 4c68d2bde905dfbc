//! Fragment and Integrate Network: CTR prediction over long spatial-temporal
//! behavior sequences.
//!
//! The pipeline: derive spatial-temporal retrieval keys ([`stkeys`]), extract
//! four sub-sequences from a lifelong behavior log ([`store`]), model each
//! fragment with simplified and multi-head target attention ([`fragment`]),
//! cross and integrate the fragments ([`integrate`]), and train a CTR head
//! end to end ([`model`]) on ingested or synthetic data ([`dataio`]).

pub mod config;
pub mod dataio;
pub mod error;
pub mod fragment;
pub mod integrate;
pub mod model;
pub mod numeric;
pub mod stkeys;
pub mod store;

pub use error::{FinError, Result};
