use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = jzig_cli::Cli::parse();
    match jzig_cli::init_threads().and_then(|_| jzig_cli::run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", jzig_cli::error_line(&e));
            ExitCode::FAILURE
        }
    }
}
