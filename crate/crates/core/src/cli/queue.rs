//! File-based requests to a running `serve` process: the client drops
//! `<id>.req` into the node's request directory and waits for `<id>.resp`,
//! whose first line is `<exit code> <changes> <failed>`.

use std::io;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use crate::fsutil::write_atomic;
use crate::platform::StateDir;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub code: i32,
    pub changes: usize,
    pub failed: usize,
    pub lines: Vec<String>,
}

impl Response {
    pub fn encode(&self) -> String {
        let mut out = format!("{} {} {}\n", self.code, self.changes, self.failed);
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        out
    }

    pub fn decode(text: &str) -> Option<Response> {
        let mut lines = text.lines();
        let mut head = lines.next()?.split_whitespace().map(|t| t.parse::<i64>().ok());
        let code = head.next()??;
        let changes = head.next()??;
        let failed = head.next()??;
        Some(Response {
            code: code as i32,
            changes: changes as usize,
            failed: failed as usize,
            lines: lines.map(str::to_string).collect(),
        })
    }
}

fn request_id() -> String {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .unwrap_or_default()
        .as_nanos();
    format!("{}-{nanos}", std::process::id())
}

/// Sends `body` to the server of `node` and waits for its answer.
pub async fn send(state: &StateDir, node: &str, body: &str, timeout: Duration) -> io::Result<Response> {
    let dir = state.requests(node);
    let id = request_id();
    let req = dir.join(format!("{id}.req"));
    let resp = dir.join(format!("{id}.resp"));
    write_atomic(&req, body.as_bytes())?;
    let deadline = Instant::now() + timeout;
    loop {
        if let Ok(text) = std::fs::read_to_string(&resp) {
            let _ = std::fs::remove_file(&resp);
            return Response::decode(&text)
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "malformed response"));
        }
        if Instant::now() >= deadline || state.live_server(node).is_none() {
            let _ = std::fs::remove_file(&req);
            return Err(io::Error::new(
                io::ErrorKind::TimedOut,
                format!("no answer from the server of {node}"),
            ));
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

/// Pending requests, oldest first.
pub fn pending(state: &StateDir, node: &str) -> Vec<(PathBuf, String)> {
    let Ok(entries) = std::fs::read_dir(state.requests(node)) else {
        return Vec::new();
    };
    let mut out: Vec<(PathBuf, String)> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension().is_some_and(|x| x == "req")
                && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.'))
        })
        .filter_map(|p| std::fs::read_to_string(&p).ok().map(|body| (p, body)))
        .collect();
    out.sort();
    out
}

pub fn answer(request: &std::path::Path, response: &Response) -> io::Result<()> {
    write_atomic(&request.with_extension("resp"), response.encode().as_bytes())?;
    std::fs::remove_file(request)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_round_trip() {
        let r = Response {
            code: 2,
            changes: 3,
            failed: 1,
            lines: vec!["ok      start_replica be1/web".into(), "FAILED  x: y".into()],
        };
        assert_eq!(Response::decode(&r.encode()), Some(r));
        assert_eq!(Response::decode("x"), None);
    }

    #[tokio::test]
    async fn request_is_answered() {
        let dir = tempfile::tempdir().unwrap();
        let state = StateDir::new(dir.path());
        std::fs::create_dir_all(state.node_dir("be1")).unwrap();
        // Pretend our parent process is the server.
        let parent = unsafe { libc::getppid() };
        std::fs::write(state.pid_file("be1"), parent.to_string()).unwrap();
        let server = {
            let state = state.clone();
            tokio::spawn(async move {
                loop {
                    if let Some((path, body)) = pending(&state, "be1").into_iter().next() {
                        let r = Response {
                            code: 0,
                            changes: 0,
                            failed: 0,
                            lines: vec![format!("echo {body}")],
                        };
                        answer(&path, &r).unwrap();
                        return;
                    }
                    tokio::time::sleep(Duration::from_millis(10)).await;
                }
            })
        };
        let r = send(&state, "be1", "scale web 2", Duration::from_secs(5))
            .await
            .unwrap();
        assert_eq!(r.lines, vec!["echo scale web 2"]);
        server.await.unwrap();
        assert!(pending(&state, "be1").is_empty());
    }
}
