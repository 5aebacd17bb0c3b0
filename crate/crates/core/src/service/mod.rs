//! The workload process: an HTTP service that either solves requests
//! locally or relays them to a next hop, and the one-shot stdio worker used
//! by per-call spawn environments.

mod http;
mod relay;
mod worker;

pub use self::http::{run_until_signal, spawn_service, ServiceHandle, READY_PREFIX};
pub use self::worker::run_stdio_worker;

use std::net::SocketAddr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::WallAnchor;
use crate::linsolve::{gauss_seidel_solve, LinsolveError};
use crate::systems::SystemRegistry;
use crate::wire::{WireError, WireRequest, WireResponse};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServiceMode {
    Solve,
    /// Forward every request to `next_hop` (`http://host:port`).
    Relay { next_hop: String },
}

impl ServiceMode {
    pub fn name(&self) -> &'static str {
        match self {
            ServiceMode::Solve => "solve",
            ServiceMode::Relay { .. } => "relay",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub mode: ServiceMode,
    pub registry: SystemRegistry,
    pub worker_id: String,
    /// How long a relay waits for its next hop to report ready at startup.
    pub startup_timeout: Duration,
}

impl ServiceConfig {
    pub fn solver(worker_id: impl Into<String>) -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 0)),
            mode: ServiceMode::Solve,
            registry: SystemRegistry::builtin(),
            worker_id: worker_id.into(),
            startup_timeout: Duration::from_secs(30),
        }
    }

    pub fn relay(worker_id: impl Into<String>, next_hop: impl Into<String>) -> Self {
        Self {
            mode: ServiceMode::Relay {
                next_hop: next_hop.into(),
            },
            ..Self::solver(worker_id)
        }
    }

    /// Reads `BB_PORT`, `BB_MODE`, `BB_NEXT_HOP`, `BB_WORKER_ID` (and
    /// `BB_BIND`, default `127.0.0.1`).
    pub fn from_env() -> Result<Self, ServiceError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let port: u16 = match var("BB_PORT") {
            Some(p) => p
                .parse()
                .map_err(|_| ServiceError::Config(format!("BB_PORT={p} is not a port")))?,
            None => 0,
        };
        let host = var("BB_BIND").unwrap_or_else(|| "127.0.0.1".into());
        let listen: SocketAddr = format!("{host}:{port}")
            .parse()
            .map_err(|_| ServiceError::Config(format!("cannot bind to {host}:{port}")))?;
        let worker_id = var("BB_WORKER_ID").unwrap_or_else(|| format!("worker-{}", std::process::id()));
        let mode = match var("BB_MODE").as_deref() {
            None | Some("solve") => ServiceMode::Solve,
            Some("relay") => ServiceMode::Relay {
                next_hop: var("BB_NEXT_HOP").ok_or_else(|| {
                    ServiceError::Config("BB_MODE=relay requires BB_NEXT_HOP".into())
                })?,
            },
            Some(other) => {
                return Err(ServiceError::Config(format!(
                    "BB_MODE must be `solve` or `relay`, not `{other}`"
                )))
            }
        };
        Ok(Self {
            listen,
            mode,
            registry: SystemRegistry::builtin(),
            worker_id,
            startup_timeout: Duration::from_secs(30),
        })
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid service configuration: {0}")]
    Config(String),
    #[error("bad request: {0}")]
    BadRequest(#[from] WireError),
    #[error("unknown system `{0}`")]
    UnknownSystem(String),
    #[error("initial guess has {actual} components, system `{system_id}` needs {expected}")]
    Dimension {
        system_id: String,
        expected: usize,
        actual: usize,
    },
    #[error("{0}")]
    Diverged(LinsolveError),
    #[error("busy: another request is in flight")]
    Busy,
    #[error("this endpoint is not served in {0} mode")]
    WrongMode(&'static str),
    #[error("next hop {next_hop} ({downstream}) unreachable: {reason}")]
    NextHopUnreachable {
        next_hop: String,
        downstream: String,
        reason: String,
    },
    #[error("downstream error (status {status}): {body}")]
    Downstream { status: u16, body: ErrorBody },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::BadRequest(_) | ServiceError::Dimension { .. } => 400,
            ServiceError::WrongMode(_) => 400,
            ServiceError::UnknownSystem(_) => 404,
            ServiceError::Diverged(_) => 422,
            ServiceError::Busy => 503,
            ServiceError::NextHopUnreachable { .. } => 502,
            ServiceError::Downstream { status, .. } => *status,
            ServiceError::Config(_) | ServiceError::Io(_) => 500,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::Config(_) => "config",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::UnknownSystem(_) => "unknown_system",
            ServiceError::Dimension { .. } => "dimension",
            ServiceError::Diverged(_) => "diverged",
            ServiceError::Busy => "busy",
            ServiceError::WrongMode(_) => "wrong_mode",
            ServiceError::NextHopUnreachable { .. } => "next_hop_unreachable",
            ServiceError::Downstream { body, .. } => match body.kind.as_str() {
                "next_hop_unreachable" => "next_hop_unreachable",
                _ => "downstream",
            },
            ServiceError::Io(_) => "io",
        }
    }

    /// The JSON body returned to the caller. `hops` is filled in by relays
    /// as the error travels back out.
    pub fn to_body(&self, worker_id: &str) -> ErrorBody {
        match self {
            ServiceError::Downstream { body, .. } => body.clone(),
            other => ErrorBody {
                kind: other.kind().to_owned(),
                error: other.to_string(),
                worker_id: worker_id.to_owned(),
                iteration: match other {
                    ServiceError::Diverged(LinsolveError::Diverged { iteration, .. }) => {
                        Some(*iteration as u64)
                    }
                    _ => None,
                },
                hops: Vec::new(),
            },
        }
    }
}

/// Error payload of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub error: String,
    /// Worker that produced the error.
    pub worker_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<u64>,
    /// Relays the error passed through, outermost first.
    #[serde(default)]
    pub hops: Vec<String>,
}

impl std::fmt::Display for ErrorBody {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} [{}] from {}", self.error, self.kind, self.worker_id)?;
        if !self.hops.is_empty() {
            write!(f, " via {}", self.hops.join(" -> "))?;
        }
        Ok(())
    }
}

/// `GET /healthz` payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub ready: bool,
    pub mode: String,
    pub worker_id: String,
    pub systems: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_hop: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Solves one request. `ingress` is taken when the request arrived; the
/// operation interval brackets only the iteration loop.
pub fn solve_request(
    registry: &SystemRegistry,
    worker_id: &str,
    req: &WireRequest,
    ingress: WallAnchor,
) -> Result<WireResponse, ServiceError> {
    let system = registry
        .get(&req.system_id)
        .ok_or_else(|| ServiceError::UnknownSystem(req.system_id.clone()))?;
    if req.initial_guess.len() != system.dim() {
        return Err(ServiceError::Dimension {
            system_id: req.system_id.clone(),
            expected: system.dim(),
            actual: req.initial_guess.len(),
        });
    }
    let iterations = usize::try_from(req.iterations)
        .map_err(|_| ServiceError::Config("iteration count exceeds platform range".into()))?;

    let start = Instant::now();
    let outcome = gauss_seidel_solve(system, &req.initial_guess, iterations);
    let end = Instant::now();

    let outcome = outcome.map_err(ServiceError::Diverged)?;
    Ok(WireResponse {
        result: outcome.solution,
        received_at_unix_ns: ingress.wall_ns(),
        op_start_unix_ns: ingress.stamp(start),
        op_end_unix_ns: ingress.stamp(end),
        worker_id: worker_id.to_owned(),
        relay_path: Vec::new(),
    })
}
