//! Open-set graph domain adaptation by dual reprogramming.
//!
//! A masked GCN is trained on a labeled source graph while the unlabeled
//! target graph is refined with a learnable feature offset and a budget of
//! edge flips. Target nodes are split into known and unknown groups by a
//! two-component Beta mixture over prediction entropies, and a three-way
//! domain discriminator behind a gradient-reversal node aligns source with
//! target-known while pushing target-unknown away.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod prune;
pub mod rewire;
pub mod separation;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
