//! File formats, run configuration and the `dosekit` command line on top
//! of `dosekit-core`.

pub mod cli;
pub mod config;
pub mod dkpt;
pub mod dvol;
pub mod error;
pub mod export;
pub mod fsutil;
pub mod pipeline;
pub mod store;

pub use error::{ErrorKind, ErrorRecord, FormatError, KitError, KitResult};
