use clap::Parser;

use pdsr::cli::{self, Cli};
use pdsr::Error;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = cli::run(Cli::parse()) {
        eprintln!("error: {e}");
        if let Error::Divergence { snapshot: Some(p), .. } = &e {
            eprintln!("snapshot written to {}", p.display());
        }
        std::process::exit(cli::exit_code(&e));
    }
}
