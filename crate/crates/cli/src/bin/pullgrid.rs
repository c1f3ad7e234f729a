use std::io;
use std::process::ExitCode;

use clap::Parser;
use pullgrid_cli::args::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match pullgrid_cli::commands::run(cli, &mut io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
