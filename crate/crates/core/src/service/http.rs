use std::future::Future;
use std::io::Write;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::serve::ListenerExt;
use axum::Router;
use tokio::net::TcpListener;
use tokio::sync::{oneshot, Mutex};

use super::relay::{RelayServer, RelayStopper};
use super::{solve_request, Health, ServiceConfig, ServiceError, ServiceMode};
use crate::clock::WallAnchor;
use crate::wire::{decode_request, encode_response};

/// First line a service prints on stdout once it accepts connections,
/// followed by `host:port`.
pub const READY_PREFIX: &str = "bbench listening on ";

struct AppState {
    config: ServiceConfig,
    /// Single processing lane; a request that cannot take it is rejected.
    lane: Mutex<()>,
}

/// A bound solver that has not started serving.
struct PreparedService {
    listener: TcpListener,
    state: Arc<AppState>,
}

impl PreparedService {
    async fn bind(config: ServiceConfig) -> Result<Self, ServiceError> {
        let listener = TcpListener::bind(config.listen).await?;
        Ok(Self {
            listener,
            state: Arc::new(AppState {
                config,
                lane: Mutex::new(()),
            }),
        })
    }

    fn local_addr(&self) -> SocketAddr {
        self.listener
            .local_addr()
            .expect("bound listener has an address")
    }

    async fn serve(self, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
        let app = Router::new()
            .route("/solve", post(solve))
            .route("/relay", post(relay))
            .route("/healthz", get(healthz))
            .with_state(self.state);
        let listener = self.listener.tap_io(|tcp| {
            let _ = tcp.set_nodelay(true);
        });
        axum::serve(listener, app)
            .with_graceful_shutdown(shutdown)
            .await
    }
}

fn json(status: u16, body: Vec<u8>) -> Response {
    (
        StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
        [(header::CONTENT_TYPE, "application/json")],
        body,
    )
        .into_response()
}

fn error_response(state: &AppState, err: ServiceError) -> Response {
    let body = err.to_body(&state.config.worker_id);
    if err.status() >= 500 {
        log::warn!("{}: {body}", state.config.worker_id);
    }
    json(
        err.status(),
        serde_json::to_vec(&body).expect("error body serializes"),
    )
}

async fn solve(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let ingress = WallAnchor::now();
    let Ok(_lane) = state.lane.try_lock() else {
        return error_response(&state, ServiceError::Busy);
    };
    let outcome = decode_request(&body)
        .map_err(ServiceError::from)
        .and_then(|req| {
            solve_request(
                &state.config.registry,
                &state.config.worker_id,
                &req,
                ingress,
            )
        })
        .and_then(|resp| encode_response(&resp).map_err(ServiceError::from));
    match outcome {
        Ok(bytes) => json(200, bytes),
        Err(e) => error_response(&state, e),
    }
}

async fn relay(State(state): State<Arc<AppState>>) -> Response {
    error_response(&state, ServiceError::WrongMode("solve"))
}

async fn healthz(State(state): State<Arc<AppState>>) -> Response {
    let health = Health {
        ready: true,
        mode: "solve".into(),
        worker_id: state.config.worker_id.clone(),
        systems: state.config.registry.ids(),
        next_hop: None,
        detail: None,
    };
    let status = if health.ready { 200 } else { 503 };
    json(status, serde_json::to_vec(&health).expect("health serializes"))
}

/// Solvers block a worker thread for the whole solve, so they get a second
/// one to keep answering health probes and busy rejections.
fn solver_runtime() -> std::io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
}

fn announce(addr: SocketAddr) -> std::io::Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{READY_PREFIX}{addr}")?;
    out.flush()?;
    log::info!("serving on {addr}");
    Ok(())
}

/// Runs a service in the foreground until SIGTERM or SIGINT. Prints the
/// ready line on stdout once bound.
pub fn run_until_signal(config: ServiceConfig) -> Result<(), ServiceError> {
    match &config.mode {
        ServiceMode::Solve => {
            let rt = solver_runtime()?;
            rt.block_on(async move {
                let prepared = PreparedService::bind(config).await?;
                announce(prepared.local_addr())?;
                prepared.serve(shutdown_signal()).await?;
                Ok(())
            })
        }
        ServiceMode::Relay { next_hop } => {
            let signals = block_shutdown_signals()?;
            let server = RelayServer::bind(&config, next_hop)?;
            announce(server.local_addr())?;
            let mut stopper = server.start()?;
            let mut sig: libc::c_int = 0;
            // SAFETY: `signals` is an initialized set and `sig` is a valid out pointer.
            unsafe { libc::sigwait(&signals, &mut sig) };
            stopper.stop();
            Ok(())
        }
    }
}

/// Blocks SIGTERM and SIGINT on the calling thread, and so on every thread
/// it spawns afterwards, leaving them for `sigwait`.
fn block_shutdown_signals() -> std::io::Result<libc::sigset_t> {
    // SAFETY: the set is initialized by sigemptyset before use.
    unsafe {
        let mut set: libc::sigset_t = std::mem::zeroed();
        libc::sigemptyset(&mut set);
        libc::sigaddset(&mut set, libc::SIGTERM);
        libc::sigaddset(&mut set, libc::SIGINT);
        let rc = libc::pthread_sigmask(libc::SIG_BLOCK, &set, std::ptr::null_mut());
        if rc != 0 {
            return Err(std::io::Error::from_raw_os_error(rc));
        }
        Ok(set)
    }
}

async fn shutdown_signal() {
    use tokio::signal::unix::{signal, SignalKind};
    let mut term = signal(SignalKind::terminate()).expect("install SIGTERM handler");
    let mut int = signal(SignalKind::interrupt()).expect("install SIGINT handler");
    tokio::select! {
        _ = term.recv() => {}
        _ = int.recv() => {}
    }
}

enum Running {
    Solver {
        stop: Option<oneshot::Sender<()>>,
        thread: Option<JoinHandle<std::io::Result<()>>>,
    },
    Relay(RelayStopper),
}

/// A service running on background threads of the current process.
pub struct ServiceHandle {
    addr: SocketAddr,
    running: Running,
}

pub fn spawn_service(config: ServiceConfig) -> Result<ServiceHandle, ServiceError> {
    if let ServiceMode::Relay { next_hop } = &config.mode {
        let server = RelayServer::bind(&config, next_hop)?;
        let addr = server.local_addr();
        return Ok(ServiceHandle {
            addr,
            running: Running::Relay(server.start()?),
        });
    }
    let (ready_tx, ready_rx) = std::sync::mpsc::channel();
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new()
        .name(format!("service-{}", config.worker_id))
        .spawn(move || {
            let rt = solver_runtime()?;
            rt.block_on(async move {
                match PreparedService::bind(config).await {
                    Ok(prepared) => {
                        let _ = ready_tx.send(Ok(prepared.local_addr()));
                        prepared
                            .serve(async {
                                let _ = stop_rx.await;
                            })
                            .await
                    }
                    Err(e) => {
                        let _ = ready_tx.send(Err(e));
                        Ok(())
                    }
                }
            })
        })?;
    let addr = ready_rx
        .recv()
        .map_err(|_| ServiceError::Config("service thread exited during startup".into()))??;
    Ok(ServiceHandle {
        addr,
        running: Running::Solver {
            stop: Some(stop_tx),
            thread: Some(thread),
        },
    })
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        match &mut self.running {
            Running::Solver { stop, thread } => {
                if let Some(stop) = stop.take() {
                    let _ = stop.send(());
                }
                if let Some(thread) = thread.take() {
                    let _ = thread.join();
                }
            }
            Running::Relay(stopper) => stopper.stop(),
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}
