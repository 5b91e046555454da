//! Teacher-facing session service: incidents in, streamed analysis events
//! and reports out, with every session persisted on disk.

pub mod api;
pub mod model;
pub mod store;

pub use api::{ApiError, Service};
