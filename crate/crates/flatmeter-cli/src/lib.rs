//! Library half of the `flatmeter` command-line tool: experiment
//! configuration, dataset resolution, the train/measure/reparam/correlate
//! pipeline, and the verification suites. The binary in `main.rs` is a thin
//! argument-parsing layer over these functions, which keeps every pipeline
//! stage callable from integration tests.

pub mod config;
pub mod dataset;
pub mod pipeline;
pub mod verify;
