//! Federated averaging with TV-stable sampling and certified unlearning.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod error;
pub mod lab;
pub mod objective;
pub mod params;
pub mod rng;
pub mod stats;
pub mod store;
pub mod unlearning;

pub use error::{Error, Result};
