//! Identity-echo replica: greets each connection with
//! `<replica_id> <version>\n`, then echoes every byte back.

use tokio::io::AsyncWriteExt;
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinSet;

pub fn greeting(replica_id: &str, version: &str) -> String {
    format!("{replica_id} {version}\n")
}

/// Runs until the future is dropped; dropping it also tears down every
/// open connection, like a process exiting.
pub async fn serve_identity_echo(listener: TcpListener, replica_id: String, version: String) {
    let hello = greeting(&replica_id, &version);
    let mut conns = JoinSet::new();
    loop {
        tokio::select! {
            accepted = listener.accept() => {
                let Ok((stream, _)) = accepted else {
                    continue;
                };
                let hello = hello.clone();
                conns.spawn(async move {
                    let _ = echo(stream, hello.as_bytes()).await;
                });
            }
            Some(_) = conns.join_next(), if !conns.is_empty() => {}
        }
    }
}

async fn echo(mut stream: TcpStream, hello: &[u8]) -> std::io::Result<()> {
    stream.write_all(hello).await?;
    let (mut rd, mut wr) = stream.split();
    tokio::io::copy(&mut rd, &mut wr).await?;
    wr.shutdown().await
}
