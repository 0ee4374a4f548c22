//! Membership-inference detection and defense for retrieval-augmented
//! generation.
//!
//! A query whose maximum similarity against the document store is an
//! extreme outlier relative to a Gumbel model of the score maximum is
//! flagged as a membership probe; the defense then hides the identified
//! target document from that request's retrieval. The crate also ships a
//! synthetic evaluation harness that measures detection quality, attack
//! success before/after the defense, and response indistinguishability.

pub mod attacksim;
pub mod config;
pub mod corpus;
pub mod defense;
pub mod detector;
pub mod error;
pub mod index;
pub mod stats;

pub use error::{Error, Result};
