use clap::Parser;

use asgk::pipeline::commands::{run, Cli};

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("asgk: {e}");
        std::process::exit(e.exit_code());
    }
}
