//! Files, model resolution, sessions, the command line and the HTTP
//! service around `imprint-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
mod error;
pub mod io;
pub mod job;
pub mod models;
pub mod service;
pub mod session;
pub mod sweep;

pub use error::{Error, Result};
