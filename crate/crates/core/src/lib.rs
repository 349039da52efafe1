//! Behavioral pattern re-identification on event-sequence panels.
//!
//! A recurrent encoder is trained with a triplet objective so that different
//! weeks of one subject embed close together. Nearest-neighbor search in that
//! space links subjects across disjoint observation periods, and the same
//! space is used to test whether perturbed or synthetic releases sit closer to
//! their training subjects than to an unseen holdout.

pub mod attack;
pub mod corpusgen;
pub mod embednet;
pub mod error;
pub mod pipeline;
pub mod privacy;
pub mod report;
pub mod seqdata;
pub mod trainer;

pub use error::{Error, Result};
