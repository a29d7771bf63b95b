//! Library side of the `patchsae` binary. Every subcommand is a plain
//! function so tests can drive it without spawning a process.

pub mod args;
pub mod commands;
pub mod exhibits;
pub mod record;

use std::path::{Path, PathBuf};

pub use args::{Cli, Command};
pub use record::RunRecord;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] patchsae::Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(patchsae::Error::InvalidConfig(_)) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(patchsae::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub(crate) fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub(crate) fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

pub(crate) fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

/// Accepts either a dataset directory or its `manifest.toml`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.toml")
    } else {
        path.to_path_buf()
    }
}

/// Dispatches a parsed command line.
pub fn run(cli: Cli) -> CliResult<()> {
    let global = args::Global {
        seed: cli.seed,
        out: cli.out,
    };
    match cli.command {
        Command::Synth(a) => commands::synth(&global, &a).map(|_| ()),
        Command::Extract(a) => commands::extract(&global, &a),
        Command::Train(a) => commands::train(&global, &a).map(|_| ()),
        Command::Sweep(a) => commands::sweep(&global, &a).map(|_| ()),
        Command::Eval(a) => commands::eval(&global, &a).map(|_| ()),
        Command::Exhibits(a) => exhibits::exhibits(&global, &a).map(|_| ()),
        Command::Report(a) => commands::report(&global, &a).map(|_| ()),
    }
}
