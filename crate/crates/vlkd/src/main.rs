use std::process::ExitCode;

use clap::Parser;
use vlkd::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::from(match e.class() {
                "UsageError" => 2,
                "IoError" => 3,
                "FormatError" => 4,
                "ConfigError" => 5,
                _ => 1,
            })
        }
    }
}
