//! Windstorm insurance loss classification: ingestion and join of event,
//! meteorological and resilience tables, quartile and loss-level labeling,
//! CART and random-forest classifiers, grid search, evaluation and feature
//! importance.

pub mod cart;
pub mod cli;
pub mod data_model;
pub mod error;
pub mod forest;
pub mod labeling;
pub mod metrics;
pub mod stats;
pub mod synth;
pub mod tuning;

pub use error::{Error, Result};
