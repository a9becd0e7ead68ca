use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const PASS: i32 = 0;
    pub const CHECKS_FAILED: i32 = 2;
    pub const DIVERGED: i32 = 3;
    pub const CONFIG: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] multilevel_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => exit::CONFIG,
            _ => exit::CHECKS_FAILED,
        }
    }
}
