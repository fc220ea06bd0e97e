use clap::Parser;
use cotrain_cli::commands::{run, Command};

#[derive(Parser, Debug)]
#[command(name = "cotrain", version, about = "Joint self-supervised and supervised training for dense prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
