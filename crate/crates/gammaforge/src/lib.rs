//! Batch front door: job documents in, deterministic reports out.

pub mod job;
pub mod report;
pub mod run;
