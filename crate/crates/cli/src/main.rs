use std::process::ExitCode;

use avt_cli::{run, Cli};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    match run(cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("avt: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
