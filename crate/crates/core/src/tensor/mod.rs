//! Dense matrices and a reverse-mode tape over them.

mod matrix;
mod tape;

pub use matrix::DenseMatrix;
pub use tape::{NodeId, Op, Tape, ValueNode};
