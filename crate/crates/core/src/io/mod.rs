//! File formats: the IGT1 tensor archive, run configuration, checkpoints and
//! CSV reports.

pub mod checkpoint;
pub mod config;
pub mod csv;
pub mod igt1;
