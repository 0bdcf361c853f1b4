//! Pseudo-label selection for semi-supervised object detection across
//! several unlabeled domains.
//!
//! The crate is detector-agnostic: it consumes per-image prediction records
//! and decides which boxes become pseudo-labels. Two curricula drive the
//! decision:
//!
//! * [`dec`] scores each unlabeled domain (or image) by the mean max class
//!   score of its predicted boxes and introduces data in phases, most
//!   similar first.
//! * [`dmc`] estimates each domain's class distribution from box counts and
//!   raises a class's threshold in proportion to how over-represented it is
//!   among the pseudo-labels accepted so far.
//!
//! [`filter`] runs the closed loop, [`ema`] tracks teacher parameters, and
//! [`sim`] provides a synthetic multi-domain world with ground truth for
//! verifying all of the above.

pub mod dec;
pub mod distribution;
pub mod dmc;
pub mod ema;
mod error;
pub mod filter;
pub mod numeric;
pub mod pipeline;
pub mod records;
pub mod sim;

pub use distribution::ClassDistribution;
pub use error::{Error, Result};
