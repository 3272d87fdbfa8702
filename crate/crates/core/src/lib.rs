// negated comparisons are the NaN-rejecting form of range checks
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod constraints;
pub mod datagen;
pub mod error;
pub mod io;
pub mod model;
pub mod recovery;
pub mod report;
pub mod solver;
pub mod trim;

pub use error::{Error, Result};
