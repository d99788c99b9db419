//! Text matching with local mutual-information maximization.
//!
//! A sequence-pair matching network produces a pooled global representation
//! for each text. A critic scores that representation against local feature
//! maps cut from the same text (real pairs) and from another text in the
//! batch (fake pairs), and the Donsker-Varadhan bound built from those scores
//! is maximized jointly with the task loss.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod graph;
pub mod infomax;
pub mod model;
pub mod params;
pub mod sanity;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
