//! File-based tooling around `dad-core`: dataset and artifact formats, the
//! CLI verbs, the staged experiment harness and report generation.

pub mod artifacts;
pub mod bench;
pub mod commands;
pub mod dataset;
pub mod harness;
pub mod io;
pub mod params;
pub mod report;
