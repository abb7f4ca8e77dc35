use std::path::PathBuf;
use std::process::ExitCode;

use bcfnet::cli::{run, Args, DATA_DIR_ENV};
use clap::Parser;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let data_dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
    let result = args.resolve(data_dir.as_deref()).and_then(|cfg| run(&cfg));
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
