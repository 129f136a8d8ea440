//! File formats, corpus loaders and the command-line pipeline around
//! `enclab-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod loaders;
pub mod manifest;
pub mod reports;
pub mod vocab_file;
