use clap::Parser;

use patchsae_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).init();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
