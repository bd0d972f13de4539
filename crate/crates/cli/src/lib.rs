//! Library side of the `vitrm` command-line tool.

pub mod fetch;
pub mod run;
pub mod settings;
