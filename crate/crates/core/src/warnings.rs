//! Structured, non-fatal diagnostics collected along the pipeline.
//!
//! Each warning serializes to one JSON object; a list of them is emitted as
//! JSON lines by the CLI.

use serde::{Deserialize, Serialize};

use crate::error::Module;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warning {
    pub module: String,
    pub kind: String,
    pub message: String,
}

impl Warning {
    pub fn new(module: Module, kind: &str, message: impl Into<String>) -> Self {
        Warning { module: module.to_string(), kind: kind.to_string(), message: message.into() }
    }
}

/// Render warnings as newline-delimited JSON.
pub fn to_json_lines(warnings: &[Warning]) -> String {
    let mut out = String::new();
    for w in warnings {
        out.push_str(&serde_json::to_string(w).expect("warning serializes"));
        out.push('\n');
    }
    out
}
