//! Self-supervised online distillation for speech emotion representations:
//! a waveform extractor and transformer student trained against an EMA
//! teacher, with frozen-feature probing and cross-validation tools.

pub mod cli;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod model;
pub mod probe;
pub mod seed;

pub use error::{Error, ErrorCategory, Result};
