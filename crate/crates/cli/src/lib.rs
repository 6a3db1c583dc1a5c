//! The `avt` command-line pipeline: synthesize data, train, evaluate,
//! predict, export attention maps and check gradients.

pub mod args;
mod commands;
mod run;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use avtransformer::model::parse_kv;
use avtransformer::Error;

pub use args::{Cli, Command};
pub use run::{RunConfig, RunDir};

pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// A command failure carrying its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } => EXIT_DIVERGED,
            _ => EXIT_INPUT,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

/// Executes one parsed command, writing its report to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a, out),
        Command::Train(a) => commands::train(&a, out),
        Command::Eval(a) => commands::eval(&a, out),
        Command::Predict(a) => commands::predict(&a, out),
        Command::Attention(a) => commands::attention(&a, out),
        Command::Gradcheck(a) => commands::gradcheck(&a, out),
    }
}

/// Settings from an optional config file, overridden by any flags given.
pub fn merge_settings(
    file: Option<&Path>,
    flags: Vec<(&'static str, Option<String>)>,
) -> CliResult<BTreeMap<String, String>> {
    let mut map = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
            parse_kv(&text)?
        }
        None => BTreeMap::new(),
    };
    for (k, v) in flags {
        if let Some(v) = v {
            map.insert(k.to_string(), v);
        }
    }
    Ok(map)
}
