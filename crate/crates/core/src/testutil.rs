use std::collections::HashSet;
use std::net::TcpListener;
use std::sync::{Mutex, OnceLock};

use rand::Rng;

/// First port of the kernel's ephemeral range; outgoing connections take
/// ports from there, so test blocks stay below it.
fn ephemeral_floor() -> u16 {
    std::fs::read_to_string("/proc/sys/net/ipv4/ip_local_port_range")
        .ok()
        .and_then(|s| s.split_whitespace().next()?.parse().ok())
        .filter(|&p| p > 21_000)
        .unwrap_or(32_768)
}

/// A block of `n` free ports not handed out to any other test in this process.
pub fn port_block(n: u16) -> (u16, u16) {
    static TAKEN: OnceLock<Mutex<HashSet<u16>>> = OnceLock::new();
    let taken = TAKEN.get_or_init(|| Mutex::new(HashSet::new()));
    let top = ephemeral_floor() - n;
    let mut rng = rand::thread_rng();
    loop {
        let lo: u16 = rng.gen_range(20_000..top);
        let mut t = taken.lock().unwrap();
        if (lo..lo + n).any(|p| t.contains(&p)) {
            continue;
        }
        if (lo..lo + n).all(|p| TcpListener::bind(("127.0.0.1", p)).is_ok()) {
            t.extend(lo..lo + n);
            return (lo, lo + n - 1);
        }
    }
}
