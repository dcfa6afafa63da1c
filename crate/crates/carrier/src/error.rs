use std::path::Path;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] carrier_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("embedding service: {0}")]
    Http(String),
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, AppError>;

impl AppError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io { path: path.display().to_string(), source }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        AppError::Format { path: path.display().to_string(), message: message.into() }
    }

    pub fn kind(&self) -> String {
        match self {
            AppError::Core(e) => format!("core.{}", snake_variant(e)),
            AppError::Io { .. } => "io".into(),
            AppError::Format { .. } => "format".into(),
            AppError::Json(_) => "json".into(),
            AppError::Http(_) => "http".into(),
            AppError::Usage(_) => "usage".into(),
            AppError::Config(_) => "config".into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) | AppError::Config(_) => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({ "error": { "kind": self.kind(), "message": self.to_string() } })
    }
}

fn snake_variant(e: &carrier_core::Error) -> String {
    let debug = format!("{e:?}");
    let name: String = debug.chars().take_while(|c| c.is_ascii_alphanumeric()).collect();
    let mut out = String::new();
    for (i, c) in name.chars().enumerate() {
        if c.is_ascii_uppercase() {
            if i > 0 {
                out.push('_');
            }
            out.push(c.to_ascii_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}
