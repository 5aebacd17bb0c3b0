//! Helpers shared by the integration tests.

#![allow(dead_code)]

use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use bbench::drivers::DriverConfig;

pub const EXE: &str = env!("CARGO_BIN_EXE_bbench");

pub fn driver_config() -> DriverConfig {
    DriverConfig {
        worker_exe: PathBuf::from(EXE),
        ..DriverConfig::default()
    }
}

/// Writes a stand-in container runtime that runs the workload as plain
/// processes: `run --rm -i` execs a worker, `run -d` starts a detached
/// service and prints its pid as the container id, `rm -f` stops it.
pub fn fake_runtime(dir: &Path) -> PathBuf {
    let path = dir.join("fake-runtime");
    let script = format!(
        r#"#!/bin/sh
exe='{EXE}'
cmd=$1; shift
case "$cmd" in
run)
    detach=0
    while [ $# -gt 0 ]; do
        case "$1" in
            --rm|-i) ;;
            -d) detach=1 ;;
            --name|-p|--add-host) shift ;;
            -e) shift; export "$1" ;;
            *) break ;;
        esac
        shift
    done
    shift
    # --add-host maps the alias to the host; here that is loopback
    if [ -n "$BB_NEXT_HOP" ]; then
        BB_NEXT_HOP=$(echo "$BB_NEXT_HOP" | sed 's#//[^:/]*#//127.0.0.1#')
        export BB_NEXT_HOP
    fi
    if [ "$detach" = 1 ]; then
        BB_BIND=127.0.0.1 setsid "$exe" "$@" </dev/null >/dev/null 2>&1 &
        echo $!
    else
        exec "$exe" "$@"
    fi
    ;;
rm)
    [ "$1" = -f ] && shift
    kill "$1" 2>/dev/null || exit 0
    i=0
    while kill -0 "$1" 2>/dev/null && [ $i -lt 100 ]; do sleep 0.05; i=$((i+1)); done
    ;;
*)
    echo "unsupported: $cmd" >&2
    exit 2
    ;;
esac
"#
    );
    std::fs::write(&path, script).unwrap();
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    path
}

pub fn container_config(dir: &Path) -> DriverConfig {
    DriverConfig {
        runtime_cmd: fake_runtime(dir).to_string_lossy().into_owned(),
        ..driver_config()
    }
}
