//! Scenario files, pipelines and output tables of the `starnoma` tool.

pub mod output;
pub mod pipeline;
pub mod scenario;
