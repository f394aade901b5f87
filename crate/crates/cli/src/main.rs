use clap::Parser;

use crowdagg_cli::args::Cli;
use crowdagg_cli::commands;

fn main() {
    let cli = Cli::parse();
    if let Err(err) = commands::run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
