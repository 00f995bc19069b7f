use std::process::ExitCode;

use clap::Parser;
use knnbox_cli::args::Cli;
use knnbox_cli::commands;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            let code = commands::exit_code(&err);
            let report = serde_json::json!({ "error": format!("{err:#}"), "exit_code": code });
            eprintln!("{report}");
            ExitCode::from(code as u8)
        }
    }
}
