use std::io::{Read, Write};

use super::{solve_request, ServiceError};
use crate::clock::WallAnchor;
use crate::systems::SystemRegistry;
use crate::wire::{decode_request, encode_response};

/// One-shot worker: reads a request from `input` until EOF, writes the
/// response followed by a newline to `output`.
pub fn run_stdio_worker(
    mut input: impl Read,
    mut output: impl Write,
    registry: &SystemRegistry,
    worker_id: &str,
) -> Result<(), ServiceError> {
    let mut buf = Vec::with_capacity(512);
    input.read_to_end(&mut buf)?;
    let ingress = WallAnchor::now();
    let req = decode_request(&buf)?;
    let resp = solve_request(registry, worker_id, &req, ingress)?;
    let mut bytes = encode_response(&resp)?;
    bytes.push(b'\n');
    output.write_all(&bytes)?;
    output.flush()?;
    Ok(())
}
