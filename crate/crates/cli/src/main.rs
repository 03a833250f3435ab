use std::io::Write;

use clap::error::ErrorKind;
use clap::Parser;
use magfuse_cli::{Cli, ErrorClass};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments");
            let first = first.trim_start_matches("error:").trim();
            eprintln!("error[{}]: {first}", ErrorClass::Config.tag());
            std::process::exit(ErrorClass::Config.exit_code());
        }
    };
    match magfuse_cli::run(cli) {
        Ok(doc) => {
            let text = serde_json::to_string_pretty(&doc).expect("JSON values serialize");
            // a closed pipe on stdout is not a failure of the command
            let _ = writeln!(std::io::stdout().lock(), "{text}");
        }
        Err(e) => {
            eprintln!("{}", e.line());
            std::process::exit(e.exit_code());
        }
    }
}
