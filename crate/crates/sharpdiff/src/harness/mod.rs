//! Datasets, evaluation statistics, experiment runners and output files.

pub mod data;
pub mod emit;
pub mod eval;
pub mod idx;
pub mod experiments;
pub mod spec;
