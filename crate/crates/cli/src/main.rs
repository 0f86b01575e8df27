use clap::Parser;

use ganuq_cli::{exit_code, run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GANUQ_LOG", "warn")).init();
    let cli = Cli::parse();
    let (name, flags) = cli.command.name_and_flags();
    if let Err(e) = run(name, flags) {
        eprintln!("ganuq {name}: {e}");
        std::process::exit(exit_code(&e));
    }
}
