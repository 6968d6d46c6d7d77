use clap::Parser;
use dialogue_sid::cli::{main_with, Cli};

fn main() {
    std::process::exit(main_with(Cli::parse()));
}
