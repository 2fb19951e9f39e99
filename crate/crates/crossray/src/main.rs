use clap::Parser;

use crossray::cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    run(Cli::parse())
}
