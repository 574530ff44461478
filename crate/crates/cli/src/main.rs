use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use reserve_lab_cli::error::{ErrorBody, ErrorObject};
use reserve_lab_cli::Cli;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let object = ErrorObject {
                error: ErrorBody {
                    kind: "usage",
                    message: e.to_string().trim_end().to_string(),
                },
            };
            eprintln!("{}", serde_json::to_string(&object).expect("error object serializes"));
            return ExitCode::from(2);
        }
    };
    match reserve_lab_cli::run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e.to_object()).expect("error object serializes"));
            ExitCode::FAILURE
        }
    }
}
