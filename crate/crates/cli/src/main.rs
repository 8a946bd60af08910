use clap::Parser;
use soars_cli::error::CliError;
use soars_cli::{run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            let err = CliError::Config(first.trim_start_matches("error: ").to_string());
            eprintln!("{}", err.to_json_line());
            std::process::exit(err.exit_code());
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("{}", e.to_json_line());
        std::process::exit(e.exit_code());
    }
}
