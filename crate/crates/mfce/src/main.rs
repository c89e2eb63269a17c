use clap::Parser;

use mfce::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
