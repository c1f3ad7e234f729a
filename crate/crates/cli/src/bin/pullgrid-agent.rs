use std::io;
use std::process::ExitCode;

use clap::Parser;
use pullgrid_cli::args::AgentCli;

fn main() -> ExitCode {
    let cli = AgentCli::parse();
    match pullgrid_cli::daemon::run(cli, &mut io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
