//! Dataset IO, training, robustness evaluation and report export.

pub mod data;
pub mod eval;
pub mod images;
pub mod train;
