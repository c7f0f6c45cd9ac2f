//! Graph storage, file formats, open-set relabeling and synthetic domains.

mod csr;
pub mod io;
mod openset;
pub mod synth;

pub use csr::CsrAdjacency;
pub use openset::{relabel_openset, split_source, DomainPair, LabeledGraph, SplitIndices};
