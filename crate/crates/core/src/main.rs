use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use gedi::cli::{run, Cli};
use gedi::io::report::ErrorReport;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GEDI_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(json) => {
            // a closed pipe (`| head`) is not a failure of the command
            match writeln!(std::io::stdout(), "{json}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => ExitCode::FAILURE,
                _ => ExitCode::SUCCESS,
            }
        }
        Err(err) => {
            let report = serde_json::to_string(&ErrorReport::new(&err)).expect("error report serializes");
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
