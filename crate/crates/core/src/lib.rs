//! Knowledge-entropy laboratory.
//!
//! A desk-scale decoder-only transformer with gated feed-forward blocks, the
//! instrumentation needed to measure how broadly it uses its feed-forward
//! memory, surgery that re-activates dormant memory positions, and a
//! continual-learning harness that scores knowledge acquisition and
//! forgetting.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod data;
pub mod entropy;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod resuscitation;
pub mod training;
