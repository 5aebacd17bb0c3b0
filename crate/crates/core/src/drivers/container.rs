//! Command lines for a docker-compatible container runtime.

use std::path::Path;

/// Alias the default runtime resolves to the host's gateway.
pub const DOCKER_HOST_ALIAS: &str = "host.docker.internal";

/// Whether `cmd` names an executable file, either directly or on `PATH`.
pub fn runtime_available(cmd: &str) -> bool {
    use std::os::unix::fs::PermissionsExt;
    let executable = |p: &Path| {
        p.metadata()
            .map(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
            .unwrap_or(false)
    };
    if cmd.contains('/') {
        return executable(Path::new(cmd));
    }
    std::env::var_os("PATH")
        .map(|paths| std::env::split_paths(&paths).any(|dir| executable(&dir.join(cmd))))
        .unwrap_or(false)
}

/// `run --rm -i --name <name> <image> worker`: one solve per container.
pub fn spawn_args(image: &str, name: &str, worker_id: &str) -> Vec<String> {
    [
        "run",
        "--rm",
        "-i",
        "--name",
        name,
        "-e",
        &format!("BB_WORKER_ID={worker_id}"),
        image,
        "worker",
    ]
    .map(str::to_owned)
    .to_vec()
}

/// Detached service container publishing `port` on the host loopback.
pub fn service_args(
    image: &str,
    name: &str,
    worker_id: &str,
    port: u16,
    next_hop: Option<&str>,
    host_alias: &str,
) -> Vec<String> {
    let mut args: Vec<String> = vec![
        "run".into(),
        "-d".into(),
        "--name".into(),
        name.into(),
        "-p".into(),
        format!("127.0.0.1:{port}:{port}"),
        "-e".into(),
        format!("BB_PORT={port}"),
        "-e".into(),
        "BB_BIND=0.0.0.0".into(),
        "-e".into(),
        format!("BB_WORKER_ID={worker_id}"),
    ];
    match next_hop {
        Some(url) => {
            args.extend(["-e".into(), "BB_MODE=relay".into()]);
            args.extend(["-e".into(), format!("BB_NEXT_HOP={url}")]);
            if host_alias == DOCKER_HOST_ALIAS {
                args.extend(["--add-host".into(), format!("{host_alias}:host-gateway")]);
            }
        }
        None => args.extend(["-e".into(), "BB_MODE=solve".into()]),
    }
    args.extend([image.into(), "serve".into()]);
    args
}

pub fn remove_args(id: &str) -> Vec<String> {
    vec!["rm".into(), "-f".into(), id.into()]
}
