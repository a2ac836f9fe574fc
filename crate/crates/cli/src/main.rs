use aerograph_cli::{run, Cli, CliError};
use clap::error::ErrorKind;
use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first).to_json());
            std::process::exit(2);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("{}", e.to_json());
        std::process::exit(e.code);
    }
}
