//! Command-line driver around the `csoe` library: experiment configuration,
//! artifact formats, and the subcommand implementations behind the `csoe`
//! binary. Kept as a library so integration tests can exercise the pieces
//! directly.

pub mod commands;
pub mod config;
