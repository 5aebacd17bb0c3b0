//! Process and socket scans over `/proc`, used to check that environments
//! leave nothing behind. Linux only.

use std::collections::BTreeSet;
use std::fs;

/// Parent pid and state letter from `/proc/<pid>/stat`.
fn stat_of(pid: u32) -> Option<(u32, char)> {
    let text = fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    // comm may contain spaces and parentheses; fields resume after the last ')'
    let rest = &text[text.rfind(')')? + 1..];
    let mut fields = rest.split_whitespace();
    let state = fields.next()?.chars().next()?;
    let ppid = fields.next()?.parse().ok()?;
    Some((ppid, state))
}

/// Live (non-zombie) processes whose parent is `parent`.
pub fn child_pids(parent: u32) -> Vec<u32> {
    let Ok(entries) = fs::read_dir("/proc") else {
        return Vec::new();
    };
    let mut out: Vec<u32> = entries
        .filter_map(|e| e.ok()?.file_name().to_str()?.parse::<u32>().ok())
        .filter(|&pid| matches!(stat_of(pid), Some((pp, state)) if pp == parent && state != 'Z'))
        .collect();
    out.sort_unstable();
    out
}

/// Whether `pid` exists and has not exited. A zombie counts as alive: it
/// still needs reaping.
pub fn pid_exists(pid: u32) -> bool {
    stat_of(pid).is_some()
}

/// TCP ports in LISTEN state on any local address (IPv4 and IPv6).
pub fn listening_ports() -> BTreeSet<u16> {
    let mut ports = BTreeSet::new();
    for table in ["/proc/net/tcp", "/proc/net/tcp6"] {
        let Ok(text) = fs::read_to_string(table) else {
            continue;
        };
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split_whitespace().collect();
            // sl local_address rem_address st ...
            if cols.len() < 4 || cols[3] != "0A" {
                continue;
            }
            if let Some(port) = cols[1]
                .rsplit(':')
                .next()
                .and_then(|hex| u16::from_str_radix(hex, 16).ok())
            {
                ports.insert(port);
            }
        }
    }
    ports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sees_own_listener() {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let port = l.local_addr().unwrap().port();
        assert!(listening_ports().contains(&port));
        drop(l);
        assert!(!listening_ports().contains(&port));
    }

    #[test]
    fn sees_and_forgets_child() {
        let mut child = std::process::Command::new("sleep").arg("5").spawn().unwrap();
        let pid = child.id();
        assert!(child_pids(std::process::id()).contains(&pid));
        child.kill().unwrap();
        child.wait().unwrap();
        assert!(!pid_exists(pid));
        assert!(!child_pids(std::process::id()).contains(&pid));
    }
}
