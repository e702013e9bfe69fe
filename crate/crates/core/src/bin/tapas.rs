use clap::Parser;

use tapas_core::cli::{self, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = cli::init_threads().and_then(|()| cli::run(cli)) {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}
