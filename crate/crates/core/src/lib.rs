pub mod builtins;
pub mod cli;
pub mod error;
pub mod extension;
pub mod flow;
pub mod kinetic;
pub mod legendre;
pub mod particles;
pub mod report;
pub mod sampling;
mod serde_ext;
pub mod structure;

pub use error::{Error, Result};
pub use report::{CheckReport, Location, Verdict};
