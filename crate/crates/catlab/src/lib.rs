//! Filesystem formats, experiment workdirs and the `catlab` command line
//! on top of `catlab-core`.

pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod report;
pub mod tsv;
pub mod vocab;
pub mod workdir;
