use std::path::PathBuf;

use thiserror::Error;

use crate::netmodel::Violation;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}, column {column} (field `{field}`): {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        field: String,
        message: String,
    },

    #[error("invalid case: {}", format_violations(.0))]
    Validation(Vec<Violation>),

    #[error("feeder topology error: {0}")]
    Topology(String),

    #[error("branch {from}-{to} has zero impedance")]
    ZeroImpedance { from: u32, to: u32 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("zero load direction: no load grows with lambda")]
    ZeroLoadDirection,

    #[error("did not converge: {0}")]
    NonConvergence(String),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;
