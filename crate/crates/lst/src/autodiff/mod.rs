//! Reverse-mode automatic differentiation over dense f64 matrices.

pub mod array;
pub mod check;
pub mod tape;

pub use array::Array;
pub use check::{grad_check, GradCheckConfig, GradCheckReport};
pub use tape::{NodeId, Tape};
