//! Library half of the `fmod` binary: experiment presets and the
//! subcommand implementations, kept callable so integration tests can
//! drive them without spawning processes.

pub mod commands;
pub mod presets;
