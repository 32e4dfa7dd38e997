//! Backlit image enhancement guided by embedding-space directions.

pub mod backend;
pub mod data;
pub mod enhance;
pub mod error;
pub mod fsutil;
pub mod guidance;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod resample;
pub mod residual;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
