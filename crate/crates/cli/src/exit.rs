//! Exit codes and small file helpers shared by the subcommands.

use std::fs;
use std::path::Path;

use lumina_core::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const IO: u8 = 1;
pub const USAGE: u8 = 2;
pub const DEGENERATE: u8 = 3;
pub const VERIFICATION: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: USAGE,
            message: message.into(),
        }
    }

    pub fn verification(message: impl Into<String>) -> Self {
        Self {
            code: VERIFICATION,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => IO,
            Error::Degenerate { .. } | Error::NonFinite { .. } => DEGENERATE,
            Error::Format(_) | Error::Shape(_) | Error::Domain(_) | Error::Precondition(_) | Error::Manifest(_) => USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

pub fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: IO,
        message: format!("cannot access {}: {e}", path.display()),
    }
}

pub fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

/// Strictly parsed JSON; a missing file or bad content is a usage error.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Failure::usage(format!("missing file {}", path.display())))
        }
        Err(e) => return Err(io_failure(path, e)),
    };
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}
