//! Two-phase training toolkit for image aesthetics assessment: align a
//! backbone's features to a frozen teacher encoder, then train a student on
//! mixed labeled and unlabeled batches against ground truth and teacher
//! pseudo labels.

pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod score_dist;
pub mod seed;
pub mod synthetic;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use score_dist::{BinSpec, Discretization, Mos, ScoreDistribution};
