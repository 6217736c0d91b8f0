//! File formats and commands of the `nplds` binary.

pub mod error;
pub mod io;
pub mod pipeline;
pub mod presets;
