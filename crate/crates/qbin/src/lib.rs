//! File formats, checkpoints, the experiment pipeline and reports on top of
//! `qbin-core`.

pub mod archive;
pub mod checkpoint;
pub mod fieldio;
pub mod pipeline;
pub mod report;
