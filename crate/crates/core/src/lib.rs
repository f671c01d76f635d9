//! Two-server secure inference over additive secret shares.

pub mod beaver;
pub mod compare;
pub mod cost;
pub mod dcf;
pub mod error;
pub mod graph;
pub mod nn;
pub mod ot;
pub mod ring;
pub mod runtime;
pub mod sharing;
pub mod transport;

pub use error::{Error, Result};
