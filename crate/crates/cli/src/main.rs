mod commands;
mod config;
mod error;

use clap::Parser;
use serde_json::Map;

fn main() {
    let cli = config::Cli::parse();
    let result = match &cli.config {
        Some(path) => config::load_file(path),
        None => Ok(Map::new()),
    }
    .and_then(|file| commands::run(cli.command, &file));
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}
