//! Test replica: greets every connection with `<replica_id> <version>`
//! and echoes what it receives.

use std::net::IpAddr;

use clap::Parser;
use flagforge::fixture::serve_identity_echo;
use flagforge::supervisor::{ENV_REPLICA_ID, ENV_VERSION};

#[derive(Parser)]
#[command(name = "identity-echo")]
struct Args {
    #[arg(long)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: IpAddr,
    /// Defaults to the replica id the supervisor puts in the environment.
    #[arg(long)]
    id: Option<String>,
    #[arg(long)]
    version: Option<String>,
}

#[tokio::main(flavor = "current_thread")]
async fn main() {
    let args = Args::parse();
    let id = args
        .id
        .or_else(|| std::env::var(ENV_REPLICA_ID).ok())
        .unwrap_or_else(|| "replica".into());
    let version = args
        .version
        .or_else(|| std::env::var(ENV_VERSION).ok())
        .unwrap_or_else(|| "0".into());
    let listener = match tokio::net::TcpListener::bind((args.bind, args.port)).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("identity-echo: cannot bind {}:{}: {e}", args.bind, args.port);
            std::process::exit(1);
        }
    };
    println!("{id} {version} listening on {}", listener.local_addr().unwrap());
    serve_identity_echo(listener, id, version).await;
}
