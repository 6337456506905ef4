//! `evstream` command-line workflow: synthesize, build, pretrain, generate,
//! evaluate, inspect and bench.

pub mod args;
pub mod commands;
pub mod manifest;

pub use args::{Cli, Command};
pub use commands::{run, Outcome};
