//! On-disk formats and the synthetic dataset generator.

pub(crate) mod bin;
pub mod checkpoint;
pub mod fseb;
pub mod manifest;
pub mod report;
pub mod synth;
