//! Temporal estimation of objects from images and deep features.

pub mod analysis;
pub mod dates;
pub mod error;
pub mod influence;
pub mod ingest;
pub mod linear;
pub mod net;
pub mod persist;
pub mod synthetic;

pub use error::{Error, Result};
