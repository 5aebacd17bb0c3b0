//! Execution environments: where a solve runs and how a call reaches it.
//!
//! A handle is provisioned once, invoked any number of times and torn down
//! exactly once (explicitly or on drop). Round trips are measured on the
//! monotonic clock from just before the request leaves until the response
//! is fully read; request encoding happens before the clock starts and
//! response decoding after it stops.

pub mod container;
mod process;

use std::fmt;
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use thiserror::Error;

use self::process::{communicate, die_with_parent, ManagedChild};
use crate::clock::WallAnchor;
use crate::service::{solve_request, ErrorBody, Health, ServiceError, READY_PREFIX};
use crate::stats::{confidence_filter, FilterConfig};
use crate::systems::SystemRegistry;
use crate::wire::{decode_response, encode_request, CallRecord, WireError, WireRequest, WireResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvironmentKind {
    /// Direct function call in the harness process.
    InProcess,
    /// A fresh worker process per call, request on stdin.
    SpawnProcess,
    /// A fresh container per call, request on stdin.
    SpawnContainer,
    PersistentServiceLocal,
    PersistentServiceContainer,
    /// `depth` relays in front of a solver; the harness talks to the
    /// outermost relay.
    NestedRelay { depth: u32, containerized: bool },
}

impl EnvironmentKind {
    pub fn label(&self) -> String {
        match self {
            EnvironmentKind::InProcess => "in-process".into(),
            EnvironmentKind::SpawnProcess => "spawn-process".into(),
            EnvironmentKind::SpawnContainer => "spawn-container".into(),
            EnvironmentKind::PersistentServiceLocal => "persistent-local".into(),
            EnvironmentKind::PersistentServiceContainer => "persistent-container".into(),
            EnvironmentKind::NestedRelay {
                depth,
                containerized: false,
            } => format!("nested-relay-{depth}"),
            EnvironmentKind::NestedRelay {
                depth,
                containerized: true,
            } => format!("nested-relay-container-{depth}"),
        }
    }

    pub fn needs_container_runtime(&self) -> bool {
        matches!(
            self,
            EnvironmentKind::SpawnContainer
                | EnvironmentKind::PersistentServiceContainer
                | EnvironmentKind::NestedRelay {
                    containerized: true,
                    ..
                }
        )
    }

    /// Parses a label. `nested-relay` and `nested-relay-container` take
    /// `default_depth`; a numeric suffix overrides it.
    pub fn parse(name: &str, default_depth: u32) -> Result<Self, String> {
        let nested = |rest: &str, containerized: bool| -> Result<Self, String> {
            let depth = match rest {
                "" => default_depth,
                r => r
                    .strip_prefix('-')
                    .and_then(|d| d.parse().ok())
                    .ok_or_else(|| format!("bad relay depth in `{name}`"))?,
            };
            if depth == 0 {
                return Err("relay depth must be at least 1".into());
            }
            Ok(EnvironmentKind::NestedRelay {
                depth,
                containerized,
            })
        };
        match name {
            "in-process" => Ok(EnvironmentKind::InProcess),
            "spawn-process" => Ok(EnvironmentKind::SpawnProcess),
            "spawn-container" => Ok(EnvironmentKind::SpawnContainer),
            "persistent-local" => Ok(EnvironmentKind::PersistentServiceLocal),
            "persistent-container" => Ok(EnvironmentKind::PersistentServiceContainer),
            _ => {
                if let Some(rest) = name.strip_prefix("nested-relay-container") {
                    nested(rest, true)
                } else if let Some(rest) = name.strip_prefix("nested-relay") {
                    nested(rest, false)
                } else {
                    Err(format!(
                        "unknown environment `{name}` (expected in-process, spawn-process, \
                         spawn-container, persistent-local, persistent-container, \
                         nested-relay or nested-relay-container)"
                    ))
                }
            }
        }
    }
}

impl fmt::Display for EnvironmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for EnvironmentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s, 1)
    }
}

#[derive(Debug, Clone)]
pub struct DriverConfig {
    /// Executable providing the `serve` and `worker` subcommands.
    pub worker_exe: PathBuf,
    pub runtime_cmd: String,
    pub image: String,
    /// First port of a contiguous block; ephemeral ports when unset.
    pub port_base: Option<u16>,
    /// Name under which containers reach services on the host.
    pub container_host_alias: String,
    pub startup_timeout: Duration,
    pub call_timeout: Duration,
    pub registry: SystemRegistry,
    pub filter: FilterConfig,
}

impl Default for DriverConfig {
    fn default() -> Self {
        Self {
            worker_exe: std::env::current_exe().unwrap_or_else(|_| PathBuf::from("bbench")),
            runtime_cmd: "docker".into(),
            image: "bbench:latest".into(),
            port_base: None,
            container_host_alias: container::DOCKER_HOST_ALIAS.into(),
            startup_timeout: Duration::from_secs(30),
            call_timeout: Duration::from_secs(120),
            registry: SystemRegistry::builtin(),
            filter: FilterConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("container runtime `{0}` not found; install it or pass --runtime-cmd")]
    Capability(String),
    #[error("cannot provision {env}: {reason}")]
    Provision { env: String, reason: String },
    #[error("{worker} failed to start: {reason}{}", fmt_output(.output))]
    Startup {
        worker: String,
        reason: String,
        output: String,
    },
    #[error("cannot start worker: {0}")]
    Spawn(#[source] std::io::Error),
    #[error("worker exited with {status}{}", fmt_output(.stderr))]
    WorkerFailed { status: String, stderr: String },
    #[error("call timed out after {0:?}")]
    Timeout(Duration),
    #[error("protocol error: {0}")]
    Protocol(#[from] WireError),
    #[error("service returned {status}: {body}")]
    Service { status: u16, body: ErrorBody },
    #[error("in-process solve failed: {0}")]
    InProcess(#[source] ServiceError),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("environment is not ready (torn down or never provisioned)")]
    NotReady,
    #[error("teardown incomplete: {0}")]
    Teardown(String),
}

fn fmt_output(out: &str) -> String {
    if out.is_empty() {
        String::new()
    } else {
        format!("\n--- worker stderr ---\n{out}")
    }
}

enum Endpoint {
    InProcess,
    Spawn { container: bool },
    Http { url: String, agent: ureq::Agent },
    Closed,
}

/// A provisioned environment.
pub struct EnvironmentHandle {
    kind: EnvironmentKind,
    label: String,
    config: DriverConfig,
    endpoint: Endpoint,
    children: Vec<ManagedChild>,
    containers: Vec<String>,
    ports: Vec<u16>,
}

static NAME_SEQ: AtomicU64 = AtomicU64::new(0);

fn unique_name(prefix: &str) -> String {
    format!(
        "bbench-{prefix}-{}-{}",
        std::process::id(),
        NAME_SEQ.fetch_add(1, Ordering::Relaxed)
    )
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(timeout))
        .build()
        .new_agent()
}

fn free_port() -> std::io::Result<u16> {
    Ok(TcpListener::bind("127.0.0.1:0")?.local_addr()?.port())
}

/// Polls `GET /healthz` until the service reports ready.
fn wait_healthy(
    base: &str,
    deadline: Instant,
    mut alive: impl FnMut() -> bool,
) -> Result<(), String> {
    let probe = agent(Duration::from_secs(2));
    let url = format!("{base}/healthz");
    let mut last;
    loop {
        match probe.get(&url).call() {
            Ok(mut resp) => {
                let body = resp.body_mut().read_to_vec().unwrap_or_default();
                match serde_json::from_slice::<Health>(&body) {
                    Ok(h) if h.ready => return Ok(()),
                    Ok(h) => last = h.detail.unwrap_or_else(|| "not ready".into()),
                    Err(e) => last = format!("bad health payload: {e}"),
                }
            }
            Err(e) => last = e.to_string(),
        }
        if !alive() {
            return Err(format!("exited before becoming healthy ({last})"));
        }
        if Instant::now() >= deadline {
            return Err(format!("not healthy before timeout ({last})"));
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

/// Starts the environment and blocks until it accepts calls.
pub fn provision(kind: EnvironmentKind, config: &DriverConfig) -> Result<EnvironmentHandle, DriverError> {
    if kind.needs_container_runtime() && !container::runtime_available(&config.runtime_cmd) {
        return Err(DriverError::Capability(config.runtime_cmd.clone()));
    }
    let mut handle = EnvironmentHandle {
        kind,
        label: kind.label(),
        config: config.clone(),
        endpoint: Endpoint::Closed,
        children: Vec::new(),
        containers: Vec::new(),
        ports: Vec::new(),
    };
    let depth = match kind {
        EnvironmentKind::InProcess => {
            handle.endpoint = Endpoint::InProcess;
            return Ok(handle);
        }
        EnvironmentKind::SpawnProcess | EnvironmentKind::SpawnContainer => {
            handle.endpoint = Endpoint::Spawn {
                container: kind == EnvironmentKind::SpawnContainer,
            };
            return Ok(handle);
        }
        EnvironmentKind::PersistentServiceLocal | EnvironmentKind::PersistentServiceContainer => 0,
        EnvironmentKind::NestedRelay { depth, .. } => depth,
    };
    // on any error below, dropping `handle` tears down what was started
    let url = handle.start_chain(depth, kind.needs_container_runtime())?;
    handle.endpoint = Endpoint::Http {
        url: if depth == 0 {
            format!("{url}/solve")
        } else {
            format!("{url}/relay")
        },
        agent: agent(config.call_timeout),
    };
    Ok(handle)
}

impl EnvironmentHandle {
    pub fn kind(&self) -> EnvironmentKind {
        self.kind
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn is_ready(&self) -> bool {
        !matches!(self.endpoint, Endpoint::Closed)
    }

    /// URL calls are posted to, for service environments.
    pub fn endpoint_url(&self) -> Option<&str> {
        match &self.endpoint {
            Endpoint::Http { url, .. } => Some(url),
            _ => None,
        }
    }

    /// Long-lived child processes (services) currently owned.
    pub fn child_pids(&self) -> Vec<u32> {
        self.children.iter().map(ManagedChild::pid).collect()
    }

    pub fn container_ids(&self) -> &[String] {
        &self.containers
    }

    /// Host ports the environment's services listen on.
    pub fn ports(&self) -> &[u16] {
        &self.ports
    }

    fn port_for(&self, slot: u16) -> Result<u16, DriverError> {
        match self.config.port_base {
            Some(base) => base.checked_add(slot).ok_or_else(|| DriverError::Provision {
                env: self.label.clone(),
                reason: format!("port base {base} leaves no room for {} services", slot + 1),
            }),
            None => free_port().map_err(|e| DriverError::Provision {
                env: self.label.clone(),
                reason: format!("no free port: {e}"),
            }),
        }
    }

    /// Starts the solver and `depth` relays innermost first. Returns the
    /// base URL of the outermost service. Worker ids are `solver` and
    /// `relay-1` (outermost) through `relay-<depth>`.
    fn start_chain(&mut self, depth: u32, containerized: bool) -> Result<String, DriverError> {
        let deadline = Instant::now() + self.config.startup_timeout;
        let mut next: Option<(String, u16)> = None;
        for level in (0..=depth).rev() {
            let worker_id = if level == depth {
                "solver".to_owned()
            } else {
                format!("relay-{}", level + 1)
            };
            let port = self.port_for((depth - level) as u16)?;
            let started = if containerized {
                let hop = next
                    .as_ref()
                    .map(|(_, p)| format!("http://{}:{p}", self.config.container_host_alias));
                self.start_container(&worker_id, port, hop.as_deref(), deadline)?
            } else {
                let hop = next.as_ref().map(|(url, _)| url.clone());
                self.start_process(&worker_id, port, hop.as_deref(), deadline)?
            };
            next = Some(started);
        }
        Ok(next.expect("at least the solver was started").0)
    }

    fn start_process(
        &mut self,
        worker_id: &str,
        port: u16,
        next_hop: Option<&str>,
        deadline: Instant,
    ) -> Result<(String, u16), DriverError> {
        let mut cmd = Command::new(&self.config.worker_exe);
        cmd.arg("serve")
            .env("BB_PORT", port.to_string())
            .env("BB_BIND", "127.0.0.1")
            .env("BB_WORKER_ID", worker_id)
            .env("BB_MODE", if next_hop.is_some() { "relay" } else { "solve" })
            .env_remove("BB_NEXT_HOP")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        if let Some(hop) = next_hop {
            cmd.env("BB_NEXT_HOP", hop);
        }
        die_with_parent(&mut cmd);
        let child = cmd.spawn().map_err(DriverError::Spawn)?;
        self.children.push(ManagedChild::adopt(worker_id.to_owned(), child));
        let child = self.children.last_mut().expect("just pushed");

        let startup_failure = |child: &mut ManagedChild, reason: String| {
            // give a dying child a moment to flush its stderr
            let grace = Instant::now() + Duration::from_millis(200);
            while !child.has_exited() && Instant::now() < grace {
                std::thread::sleep(Duration::from_millis(10));
            }
            DriverError::Startup {
                worker: child.name.clone(),
                reason,
                output: child.stderr_tail(),
            }
        };
        let line = match child.first_line(deadline) {
            Some(line) => line,
            None => {
                let reason = if child.has_exited() {
                    "exited before listening".to_owned()
                } else {
                    "no ready line before timeout".to_owned()
                };
                return Err(startup_failure(child, reason));
            }
        };
        let Some(addr) = line.strip_prefix(READY_PREFIX) else {
            return Err(startup_failure(child, format!("unexpected output `{line}`")));
        };
        let base = format!("http://{addr}");
        let port = addr
            .rsplit(':')
            .next()
            .and_then(|p| p.parse().ok())
            .unwrap_or(port);
        self.ports.push(port);
        let child = self.children.last_mut().expect("just pushed");
        if let Err(reason) = wait_healthy(&base, deadline, || !child.has_exited()) {
            return Err(startup_failure(child, reason));
        }
        log::debug!("{worker_id} ready at {base}");
        Ok((base, port))
    }

    fn start_container(
        &mut self,
        worker_id: &str,
        port: u16,
        next_hop: Option<&str>,
        deadline: Instant,
    ) -> Result<(String, u16), DriverError> {
        let name = unique_name(worker_id);
        let args = container::service_args(
            &self.config.image,
            &name,
            worker_id,
            port,
            next_hop,
            &self.config.container_host_alias,
        );
        let out = Command::new(&self.config.runtime_cmd)
            .args(&args)
            .stdin(Stdio::null())
            .output()
            .map_err(DriverError::Spawn)?;
        if !out.status.success() {
            return Err(DriverError::Startup {
                worker: worker_id.to_owned(),
                reason: format!("`{} run` exited with {}", self.config.runtime_cmd, out.status),
                output: String::from_utf8_lossy(&out.stderr).trim_end().to_owned(),
            });
        }
        let id = String::from_utf8_lossy(&out.stdout).trim().to_owned();
        self.containers.push(if id.is_empty() { name } else { id });
        self.ports.push(port);
        let base = format!("http://127.0.0.1:{port}");
        if let Err(reason) = wait_healthy(&base, deadline, || true) {
            return Err(DriverError::Startup {
                worker: worker_id.to_owned(),
                reason,
                output: String::new(),
            });
        }
        Ok((base, port))
    }

    fn accepted(&self, system_id: &str, output: &[f64]) -> bool {
        let Some(exact) = self
            .config
            .registry
            .get(system_id)
            .and_then(|s| s.known_solution())
        else {
            return false;
        };
        if exact.len() != output.len() {
            return false;
        }
        let err: Vec<f64> = output.iter().zip(exact).map(|(o, x)| o - x).collect();
        confidence_filter(&[err], &self.config.filter)
            .map(|p| p.rejected.is_empty())
            .unwrap_or(false)
    }

    /// Performs one call and returns its record.
    pub fn invoke(&mut self, req: &WireRequest) -> Result<CallRecord, DriverError> {
        let (resp, round_trip) = match &self.endpoint {
            Endpoint::Closed => return Err(DriverError::NotReady),
            Endpoint::InProcess => {
                let start = Instant::now();
                let resp = solve_request(&self.config.registry, "in-process", req, WallAnchor::now());
                let rt = start.elapsed();
                (resp.map_err(DriverError::InProcess)?, rt)
            }
            Endpoint::Spawn { container } => self.invoke_spawn(req, *container)?,
            Endpoint::Http { url, agent } => invoke_http(agent, url, req, self.config.call_timeout)?,
        };
        let accepted = self.accepted(&req.system_id, &resp.result);
        Ok(CallRecord::from_exchange(
            &self.label,
            req,
            resp,
            round_trip,
            accepted,
        ))
    }

    fn invoke_spawn(
        &self,
        req: &WireRequest,
        container: bool,
    ) -> Result<(WireResponse, Duration), DriverError> {
        let body = encode_request(req)?;
        let worker_id = format!("spawn-{}", req.call_index);
        let name = unique_name("spawn");
        let mut cmd = if container {
            let mut c = Command::new(&self.config.runtime_cmd);
            c.args(container::spawn_args(&self.config.image, &name, &worker_id));
            c
        } else {
            let mut c = Command::new(&self.config.worker_exe);
            c.arg("worker").env("BB_WORKER_ID", &worker_id);
            c
        };
        cmd.stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        die_with_parent(&mut cmd);

        let start = Instant::now();
        let child = cmd.spawn().map_err(DriverError::Spawn)?;
        let done = communicate(child, &body, start + self.config.call_timeout)
            .map_err(|e| DriverError::Transport(e.to_string()))?;
        let rt = start.elapsed();

        let Some(done) = done else {
            if container {
                let _ = Command::new(&self.config.runtime_cmd)
                    .args(container::remove_args(&name))
                    .stdout(Stdio::null())
                    .stderr(Stdio::null())
                    .status();
            }
            return Err(DriverError::Timeout(self.config.call_timeout));
        };
        let stderr = String::from_utf8_lossy(&done.stderr).trim_end().to_owned();
        if !done.success {
            return Err(DriverError::WorkerFailed {
                status: done.status,
                stderr,
            });
        }
        let resp = decode_response(&done.stdout)?;
        Ok((resp, rt))
    }

    /// Stops everything the environment started. Safe to call repeatedly.
    pub fn teardown(&mut self) -> Result<(), DriverError> {
        // close pooled connections before the services go away
        self.endpoint = Endpoint::Closed;
        let mut problems = Vec::new();
        while let Some(child) = self.children.pop() {
            let name = child.name.clone();
            if let Err(e) = child.terminate() {
                problems.push(format!("{name}: {e}"));
            }
        }
        while let Some(id) = self.containers.pop() {
            match Command::new(&self.config.runtime_cmd)
                .args(container::remove_args(&id))
                .stdin(Stdio::null())
                .stdout(Stdio::null())
                .stderr(Stdio::piped())
                .output()
            {
                Ok(out) if out.status.success() => {}
                Ok(out) => problems.push(format!(
                    "removing container {id}: {}",
                    String::from_utf8_lossy(&out.stderr).trim_end()
                )),
                Err(e) => problems.push(format!("removing container {id}: {e}")),
            }
        }
        self.ports.clear();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DriverError::Teardown(problems.join("; ")))
        }
    }
}

fn invoke_http(
    agent: &ureq::Agent,
    url: &str,
    req: &WireRequest,
    timeout: Duration,
) -> Result<(WireResponse, Duration), DriverError> {
    let body = encode_request(req)?;
    let transport = |e: ureq::Error| match e {
        ureq::Error::Timeout(_) => DriverError::Timeout(timeout),
        other => DriverError::Transport(other.to_string()),
    };

    let start = Instant::now();
    let mut resp = agent
        .post(url)
        .header("content-type", "application/json")
        .send(&body[..])
        .map_err(transport)?;
    let status = resp.status().as_u16();
    let bytes = resp.body_mut().read_to_vec().map_err(transport)?;
    let rt = start.elapsed();

    if status != 200 {
        let body = serde_json::from_slice::<ErrorBody>(&bytes).unwrap_or_else(|_| ErrorBody {
            kind: "http".into(),
            error: String::from_utf8_lossy(&bytes).into_owned(),
            worker_id: "unknown".into(),
            iteration: None,
            hops: Vec::new(),
        });
        return Err(DriverError::Service { status, body });
    }
    Ok((decode_response(&bytes)?, rt))
}

impl Drop for EnvironmentHandle {
    fn drop(&mut self) {
        if let Err(e) = self.teardown() {
            log::warn!("{}: {e}", self.label);
        }
    }
}
