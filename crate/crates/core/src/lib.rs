//! Doubly robust estimation of average causal effects with inverse
//! probability of treatment weighted GLMs and AIPW.

pub mod error;
pub mod estimators;
pub mod exec;
pub mod formula;
pub mod glm;
pub mod inference;
pub mod propensity;
pub mod simlab;
pub mod tabular;

pub use error::{Error, Result};
pub use exec::Execution;
