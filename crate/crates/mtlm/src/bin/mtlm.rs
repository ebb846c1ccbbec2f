use clap::Parser;
use mtlm::cli::{error_line, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(&cli.command) {
        eprintln!("{}", error_line(&err));
        std::process::exit(1);
    }
}
