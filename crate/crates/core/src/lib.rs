//! MeanFlow training laboratory: average-velocity flow models on small
//! synthetic distributions, with a self-contained autodiff engine and exact
//! optimal-transport evaluation.

pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod net;
pub mod sample_eval;
pub mod schedules;
pub mod studies;
pub mod tensor_ad;
pub mod train;

pub use error::{Error, Result};
