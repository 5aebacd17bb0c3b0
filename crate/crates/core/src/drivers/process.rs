use std::io::{self, BufRead, BufReader, Read, Write};
use std::os::fd::AsRawFd;
use std::os::unix::process::CommandExt;
use std::process::{Child, Command};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

const STDERR_TAIL: usize = 16 * 1024;
const TERM_GRACE: Duration = Duration::from_secs(2);

/// Children die with the thread that spawned them, so a killed harness does
/// not leave workers behind.
pub(super) fn die_with_parent(cmd: &mut Command) {
    // SAFETY: prctl is async-signal-safe and touches no shared state.
    unsafe {
        cmd.pre_exec(|| {
            if libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGKILL) != 0 {
                return Err(io::Error::last_os_error());
            }
            Ok(())
        });
    }
}

fn push_tail(buf: &Mutex<Vec<u8>>, chunk: &[u8]) {
    let mut b = buf.lock().unwrap_or_else(|e| e.into_inner());
    b.extend_from_slice(chunk);
    if b.len() > STDERR_TAIL {
        let cut = b.len() - STDERR_TAIL;
        b.drain(..cut);
    }
}

/// A long-lived child with its output drained on background threads.
pub(super) struct ManagedChild {
    pub(super) name: String,
    child: Child,
    stderr: Arc<Mutex<Vec<u8>>>,
    threads: Vec<JoinHandle<()>>,
    first_line: Option<mpsc::Receiver<io::Result<String>>>,
}

impl ManagedChild {
    /// `child` must have been spawned with piped stdout and stderr.
    pub(super) fn adopt(name: String, mut child: Child) -> Self {
        let stderr = Arc::new(Mutex::new(Vec::new()));
        let mut threads = Vec::new();
        if let Some(mut err) = child.stderr.take() {
            let tail = Arc::clone(&stderr);
            threads.push(std::thread::spawn(move || {
                let mut chunk = [0u8; 4096];
                while let Ok(n) = err.read(&mut chunk) {
                    if n == 0 {
                        break;
                    }
                    push_tail(&tail, &chunk[..n]);
                }
            }));
        }
        let mut first_line = None;
        if let Some(out) = child.stdout.take() {
            let (tx, rx) = mpsc::channel();
            first_line = Some(rx);
            threads.push(std::thread::spawn(move || {
                let mut reader = BufReader::new(out);
                let mut line = String::new();
                let _ = tx.send(reader.read_line(&mut line).map(|_| line));
                let _ = io::copy(&mut reader, &mut io::sink());
            }));
        }
        Self {
            name,
            child,
            stderr,
            threads,
            first_line,
        }
    }

    pub(super) fn pid(&self) -> u32 {
        self.child.id()
    }

    /// First stdout line, waiting until `deadline`. `None` on timeout or if
    /// the child closed stdout without writing a line.
    pub(super) fn first_line(&mut self, deadline: Instant) -> Option<String> {
        let rx = self.first_line.take()?;
        let wait = deadline.saturating_duration_since(Instant::now());
        match rx.recv_timeout(wait) {
            Ok(Ok(line)) if !line.is_empty() => Some(line.trim_end().to_owned()),
            _ => None,
        }
    }

    pub(super) fn has_exited(&mut self) -> bool {
        matches!(self.child.try_wait(), Ok(Some(_)))
    }

    /// Stderr captured so far, lossily decoded.
    pub(super) fn stderr_tail(&self) -> String {
        let b = self.stderr.lock().unwrap_or_else(|e| e.into_inner());
        String::from_utf8_lossy(&b).trim_end().to_owned()
    }

    /// SIGTERM, then SIGKILL after a grace period. Always reaps.
    pub(super) fn terminate(mut self) -> io::Result<()> {
        if self.child.try_wait()?.is_none() {
            // SAFETY: the pid belongs to an unreaped child of ours.
            unsafe {
                libc::kill(self.child.id() as libc::pid_t, libc::SIGTERM);
            }
            let deadline = Instant::now() + TERM_GRACE;
            loop {
                if self.child.try_wait()?.is_some() {
                    break;
                }
                if Instant::now() >= deadline {
                    log::warn!("{} ignored SIGTERM; killing", self.name);
                    let _ = self.child.kill();
                    self.child.wait()?;
                    break;
                }
                std::thread::sleep(Duration::from_millis(5));
            }
        }
        // drain threads end once every holder of the pipes is gone; a
        // grandchild may keep them open, so they are not joined
        self.threads.clear();
        Ok(())
    }
}

/// Output of a finished one-shot child.
pub(super) struct Finished {
    pub(super) stdout: Vec<u8>,
    pub(super) stderr: Vec<u8>,
    pub(super) success: bool,
    pub(super) status: String,
}

/// Feeds `input` to a freshly spawned child, closes its stdin and collects
/// stdout and stderr until both close. On deadline the child is killed and
/// reaped and `Ok(None)` is returned.
pub(super) fn communicate(
    mut child: Child,
    input: &[u8],
    deadline: Instant,
) -> io::Result<Option<Finished>> {
    if let Some(mut stdin) = child.stdin.take() {
        match stdin.write_all(input) {
            Ok(()) => {}
            // the child died early; its stderr says why
            Err(e) if e.kind() == io::ErrorKind::BrokenPipe => {}
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(e);
            }
        }
    }
    let mut streams: [(Option<Box<dyn ReadFd>>, Vec<u8>); 2] = [
        (child.stdout.take().map(|s| Box::new(s) as Box<dyn ReadFd>), Vec::new()),
        (child.stderr.take().map(|s| Box::new(s) as Box<dyn ReadFd>), Vec::new()),
    ];
    let mut chunk = [0u8; 8192];
    while streams.iter().any(|(s, _)| s.is_some()) {
        let remaining = deadline.saturating_duration_since(Instant::now());
        if remaining.is_zero() {
            let _ = child.kill();
            child.wait()?;
            return Ok(None);
        }
        let mut fds: Vec<libc::pollfd> = Vec::with_capacity(2);
        let mut owners = Vec::with_capacity(2);
        for (i, (s, _)) in streams.iter().enumerate() {
            if let Some(s) = s {
                fds.push(libc::pollfd {
                    fd: s.fd(),
                    events: libc::POLLIN,
                    revents: 0,
                });
                owners.push(i);
            }
        }
        let ms = remaining.as_millis().clamp(1, i32::MAX as u128) as i32;
        // SAFETY: `fds` is a valid, initialized slice for the duration of the call.
        let rc = unsafe { libc::poll(fds.as_mut_ptr(), fds.len() as libc::nfds_t, ms) };
        if rc < 0 {
            let e = io::Error::last_os_error();
            if e.kind() == io::ErrorKind::Interrupted {
                continue;
            }
            let _ = child.kill();
            let _ = child.wait();
            return Err(e);
        }
        for (pfd, &i) in fds.iter().zip(&owners) {
            if pfd.revents == 0 {
                continue;
            }
            let (slot, buf) = &mut streams[i];
            let stream = slot.as_mut().expect("polled streams are open");
            match stream.read(&mut chunk) {
                Ok(0) => *slot = None,
                Ok(n) => buf.extend_from_slice(&chunk[..n]),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(_) => *slot = None,
            }
        }
    }
    let status = child.wait()?;
    let [(_, stdout), (_, stderr)] = streams;
    Ok(Some(Finished {
        stdout,
        stderr,
        success: status.success(),
        status: status.to_string(),
    }))
}

trait ReadFd: Read {
    fn fd(&self) -> i32;
}

impl<T: Read + AsRawFd> ReadFd for T {
    fn fd(&self) -> i32 {
        self.as_raw_fd()
    }
}
