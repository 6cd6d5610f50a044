//! HTTP sessions for the elicitation workbench and the `prior-loom`
//! command-line workflows.

pub mod api;
pub mod cli;
pub mod registry;
