use std::io::Write;

use clap::Parser;
use flagforge::cli::{run, Cli};
use tracing_subscriber::EnvFilter;

fn main() {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("FLAGFORGE_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    let mut stdout = std::io::stdout();
    let code = rt.block_on(run(cli, &mut stdout));
    let _ = stdout.flush();
    drop(rt);
    std::process::exit(code);
}
