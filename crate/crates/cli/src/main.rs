use clap::Parser;
use viewcon_cli::commands::{run, Cli};
use viewcon_cli::exit_code;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
