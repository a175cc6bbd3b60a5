use clap::Parser;
use odorwatch_cli::{main_with, Cli, CliError};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("{}", CliError::new("usage", e.to_string().trim_end()).to_json());
            std::process::exit(2);
        }
    };
    std::process::exit(main_with(cli, std::env::vars()));
}
