//! Coupled transmission and distribution power flow with voltage stability
//! margin tracing.

pub mod case;
pub mod cli;
pub mod cosim;
pub mod cvr;
pub mod dpf;
pub mod error;
pub mod margin;
pub mod netmodel;
pub mod tpf;
pub mod zipload;

pub use error::{Error, Result};
