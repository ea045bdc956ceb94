// SPDX-License-Identifier: Apache-2.0

use std::path::Path;

use serde_json::{json, Value};
use thiserror::Error;

pub const EXIT_DATA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("unknown method id {0:?}")]
    UnknownMethod(String),
    #[error("{message}")]
    Data {
        kind: &'static str,
        message: String,
        details: Value,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn data(kind: &'static str, message: impl Into<String>) -> Self {
        CliError::Data {
            kind,
            message: message.into(),
            details: Value::Null,
        }
    }

    pub fn with_details(kind: &'static str, message: impl Into<String>, details: Value) -> Self {
        CliError::Data {
            kind,
            message: message.into(),
            details,
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::UnknownMethod(_) => EXIT_USAGE,
            CliError::Data { .. } | CliError::Io { .. } => EXIT_DATA,
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        let mut v = match self {
            CliError::Usage(m) => json!({"error": "usage", "message": m}),
            CliError::UnknownMethod(id) => {
                json!({"error": "unknown_method", "message": self.to_string(), "method_id": id})
            }
            CliError::Data { kind, message, details } => {
                let mut v = json!({"error": kind, "message": message});
                if !details.is_null() {
                    v["details"] = details.clone();
                }
                v
            }
            CliError::Io { path, source } => json!({"error": "io", "message": source.to_string(), "path": path}),
        };
        v["exit_code"] = json!(self.exit_code());
        serde_json::to_string(&v).expect("error line serializes")
    }
}

impl From<attnuq::registry::RegistryError> for CliError {
    fn from(e: attnuq::registry::RegistryError) -> Self {
        use attnuq::registry::RegistryError::*;
        match e {
            UnknownMethod(id) => CliError::UnknownMethod(id),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<attnuq::corpus::CorpusError> for CliError {
    fn from(e: attnuq::corpus::CorpusError) -> Self {
        CliError::data("corpus", e.to_string())
    }
}

impl From<attnuq::synth::SynthError> for CliError {
    fn from(e: attnuq::synth::SynthError) -> Self {
        use attnuq::synth::SynthError::*;
        match e {
            Invalid(m) => CliError::Usage(format!("invalid synthetic spec: {m}")),
            other => CliError::data("synth", other.to_string()),
        }
    }
}

impl From<attnuq::metrics::MetricError> for CliError {
    fn from(e: attnuq::metrics::MetricError) -> Self {
        use attnuq::metrics::MetricError::*;
        let message = e.to_string();
        match e {
            Unjoined { ids, .. } => CliError::with_details("join", message, json!({ "trace_ids": ids })),
            Config(m) => CliError::Usage(m),
            _ => CliError::data("metric", message),
        }
    }
}
