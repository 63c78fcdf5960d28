use clap::Parser;

use saecount_cli::error::EXIT_OK;
use saecount_cli::{logging, run, Cli};

fn main() {
    let cli = Cli::parse();
    logging::init();
    let code = match run(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
