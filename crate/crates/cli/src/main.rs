use std::process::ExitCode;

use clap::Parser;
use shapegrasp_cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command, &cli.args) {
        Ok(o) => {
            println!("{}", o.summary);
            println!("report: {}", o.report.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
