//! Sequential recommenders debiased against system exposure with a
//! closed-form KL distributionally robust objective, plus the exposure
//! simulator, propensity baselines, SNIPS evaluation and a synthetic
//! feedback-loop world to verify it all against known ground truth.

pub mod baselines;
pub mod datamodel;
pub mod dro;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod exposure;
pub mod pipeline;
pub mod synthworld;
pub mod trainer;

pub use error::{Error, Result};
