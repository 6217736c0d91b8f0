use std::fmt;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const IO: u8 = 2;
    pub const SCHEMA: u8 = 3;
    pub const FIT: u8 = 4;
    pub const MANIFEST: u8 = 5;
    pub const THRESHOLD: u8 = 6;
}

/// A failed command: exit code, the pipeline stage it failed in, and a message.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub stage: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, stage: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            stage,
            message: message.into(),
        }
    }

    pub fn schema(stage: &'static str, message: impl Into<String>) -> Self {
        Self::new(exit::SCHEMA, stage, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.message)
    }
}

impl std::error::Error for CliError {}

/// Exit code for a library error: I/O, schema and manifest problems keep their
/// own codes, everything else is a fit failure.
pub fn code_for(e: &nplds::Error) -> u8 {
    match e {
        nplds::Error::Io { .. } => exit::IO,
        nplds::Error::Schema(_) => exit::SCHEMA,
        nplds::Error::Manifest(_) => exit::MANIFEST,
        _ => exit::FIT,
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Tags a library result with the stage it ran in.
pub trait Stage<T> {
    fn stage(self, stage: &'static str) -> CliResult<T>;
}

impl<T> Stage<T> for nplds::Result<T> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|e| CliError::new(code_for(&e), stage, e.to_string()))
    }
}
