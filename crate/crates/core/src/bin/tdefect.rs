use clap::Parser;
use temporal_defects::cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        let msg = e.to_string().replace('\n', " ");
        eprintln!("error: {}: {msg}", e.kind());
        std::process::exit(1);
    }
}
