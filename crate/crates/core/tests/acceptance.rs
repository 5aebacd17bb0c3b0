//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use bbench::clock::unix_now_ns;
use bbench::drivers::{provision, DriverConfig, EnvironmentKind};
use bbench::harness::{aggregate, run_experiment, run_matrix, ExperimentConfig, ExperimentResult, MatrixOutcome};
use bbench::hygiene::{child_pids, listening_ports, pid_exists};
use bbench::linsolve::gauss_seidel_solve;
use bbench::stats::{
    confidence_filter, mean, median, population_stddev, t_critical, t_statistic, FilterConfig,
};
use bbench::systems::{canonical5, CANONICAL5};
use bbench::wire::{
    decode_request, decode_response, encode_request, encode_response, read_log_file, CallRecord,
    LogSink, WireRequest, WireResponse,
};

use common::{container_config, driver_config, EXE};

type Outcome = Result<String, String>;

const EXACT_NUM: [i64; 5] = [78, 184, 22, 329, -21];
const EXACT_DEN: i64 = 212;

const T_TABLE: [[f64; 3]; 30] = [
    [12.7062047364, 63.6567411629, 1273.2392829359],
    [4.3026527297, 9.9248432009, 44.7045872932],
    [3.1824463053, 5.8409093097, 16.3263346101],
    [2.7764451052, 4.6040948714, 10.3062546818],
    [2.5705818356, 4.0321429836, 7.9756534190],
    [2.4469118511, 3.7074280213, 6.7883399903],
    [2.3646242516, 3.4994832974, 6.0817561860],
    [2.3060041352, 3.3553873313, 5.6174108074],
    [2.2621571629, 3.2498355416, 5.2906538403],
    [2.2281388520, 3.1692726726, 5.0489727482],
    [2.2009851601, 3.1058065155, 4.8633330928],
    [2.1788128297, 3.0545395894, 4.7164586616],
    [2.1603686565, 3.0122758387, 4.5974614632],
    [2.1447866879, 2.9768427344, 4.4991550679],
    [2.1314495456, 2.9467128835, 4.4166128304],
    [2.1199052992, 2.9207816225, 4.3463485840],
    [2.1098155778, 2.8982305196, 4.2858283398],
    [2.1009220402, 2.8784404727, 4.2331673002],
    [2.0930240544, 2.8609346064, 4.1869352588],
    [2.0859634473, 2.8453397098, 4.1460278216],
    [2.0796138447, 2.8313595580, 4.1095789311],
    [2.0738730679, 2.8187560606, 4.0769000589],
    [2.0686576104, 2.8073356838, 4.0474370644],
    [2.0638985616, 2.7969395048, 4.0207390195],
    [2.0595385528, 2.7874358137, 3.9964353077],
    [2.0555294386, 2.7787145333, 3.9742185485],
    [2.0518305165, 2.7706829571, 3.9538316915],
    [2.0484071418, 2.7632624555, 3.9350581420],
    [2.0452296421, 2.7563859037, 3.9177141186],
    [2.0422724563, 2.7499956536, 3.9016426778],
];
const CONFIDENCES: [f64; 3] = [0.95, 0.99, 0.9995];

fn exact() -> Vec<f64> {
    EXACT_NUM
        .iter()
        .map(|&n| n as f64 / EXACT_DEN as f64)
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn solver_golden() -> Outcome {
    let rows: [[i64; 5]; 5] = [
        [4, 1, 2, 1, 1],
        [3, 5, 1, 1, 1],
        [1, 1, 3, 1, 1],
        [1, 1, 1, 5, 1],
        [1, 1, 1, 1, 9],
    ];
    let rhs: [i64; 5] = [4, 7, 3, 9, 2];
    for (row, b) in rows.iter().zip(rhs) {
        let lhs: i64 = row.iter().zip(EXACT_NUM).map(|(a, x)| a * x).sum();
        ensure(lhs == b * EXACT_DEN, || "reference fractions do not solve the system".into())?;
    }
    let system = canonical5();
    for (i, row) in rows.iter().enumerate() {
        for (j, &a) in row.iter().enumerate() {
            ensure(system.coeff(i, j) == a as f64, || format!("coefficient ({i},{j}) differs"))?;
        }
        ensure(system.rhs()[i] == rhs[i] as f64, || format!("rhs {i} differs"))?;
    }
    let start = Instant::now();
    let out = gauss_seidel_solve(&system, &[0.0; 5], 2500).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = out
        .solution
        .iter()
        .zip(exact())
        .map(|(x, e)| (x - e).abs())
        .fold(0.0, f64::max);
    ensure(worst <= 1e-9, || format!("max error {worst:e} > 1e-9"))?;
    ensure(elapsed < Duration::from_millis(100), || format!("took {elapsed:?}"))?;
    Ok(format!("max error {worst:.1e}, {:.2} ms", elapsed.as_secs_f64() * 1e3))
}

fn local_kinds() -> [EnvironmentKind; 5] {
    [
        EnvironmentKind::InProcess,
        EnvironmentKind::SpawnProcess,
        EnvironmentKind::PersistentServiceLocal,
        EnvironmentKind::NestedRelay {
            depth: 1,
            containerized: false,
        },
        EnvironmentKind::NestedRelay {
            depth: 5,
            containerized: false,
        },
    ]
}

fn experiment(kind: EnvironmentKind, out: &Path, run_id: &str, calls: usize) -> Result<ExperimentResult, String> {
    run_experiment(&ExperimentConfig {
        environment: kind,
        num_calls: calls,
        output_dir: out.to_owned(),
        run_id: run_id.to_owned(),
        driver: driver_config(),
        ..ExperimentConfig::default()
    })
    .map_err(|e| format!("{}: {e}", kind.label()))
}

fn accuracy(out: &Path, results: &mut Vec<ExperimentResult>) -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut bad = Vec::new();
    for kind in local_kinds() {
        let r = experiment(kind, out, "accuracy", 100)?;
        parts.push(format!("{} {:.0}%", r.environment_label, r.aggregate.accuracy * 100.0));
        if r.aggregate.accuracy != 1.0 || r.records.len() != 100 {
            bad.push(r.environment_label.clone());
        }
        results.push(r);
    }
    let elapsed = start.elapsed();
    ensure(bad.is_empty(), || format!("below 100%: {}", bad.join(", ")))?;
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!("{} in {:.1} s", parts.join(", "), elapsed.as_secs_f64()))
}

/// Exact sum of doubles (Shewchuk partials).
fn exact_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in xs {
        let mut kept = 0;
        for i in 0..partials.len() {
            let mut y = partials[i];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    partials.iter().rev().fold(0.0, |acc, p| acc + p)
}

fn rel_err(got: f64, want: f64) -> f64 {
    if got == want {
        0.0
    } else {
        (got - want).abs() / want.abs()
    }
}

fn random_sample(rng: &mut StdRng) -> Vec<f64> {
    let n = rng.random_range(2..=200);
    match rng.random_range(0..3) {
        0 => (0..n).map(|_| 10f64.powf(rng.random_range(-7.0..-1.0))).collect(),
        1 => {
            let scale = 10f64.powi(rng.random_range(-6..6));
            (0..n).map(|_| scale * rng.random_range(0.0..1.0)).collect()
        }
        _ => (0..n).map(|_| rng.random_range(-1.0..3.0)).collect(),
    }
}

fn statistics_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5eed_0003);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let xs = random_sample(&mut rng);
        let n = xs.len() as f64;
        let ref_mean = exact_sum(xs.iter().copied()) / n;
        let ref_sd = (exact_sum(xs.iter().map(|x| (x - ref_mean) * (x - ref_mean))) / n).sqrt();
        let ref_t = ref_mean / (ref_sd / n.sqrt());

        let m = mean(&xs).map_err(|e| e.to_string())?;
        let sd = population_stddev(&xs).map_err(|e| e.to_string())?;
        let t = t_statistic(m, 0.0, sd, xs.len());
        for (what, got, want) in [("mean", m, ref_mean), ("stddev", sd, ref_sd), ("t", t, ref_t)] {
            let e = rel_err(got, want);
            worst = worst.max(e);
            ensure(e <= 1e-12, || format!("case {case}: {what} {got} vs {want} (rel {e:e})"))?;
        }
    }
    let mut worst_t: f64 = 0.0;
    for (d, row) in T_TABLE.iter().enumerate() {
        for (&c, &want) in CONFIDENCES.iter().zip(row) {
            let cfg = FilterConfig {
                confidence_level: c,
                degrees_of_freedom: d as u32 + 1,
                ..FilterConfig::default()
            };
            let got = t_critical(&cfg).map_err(|e| e.to_string())?;
            worst_t = worst_t.max((got - want).abs());
            ensure((got - want).abs() <= 1e-3, || {
                format!("t_critical(dof {}, {c}) = {got}, reference {want}", d + 1)
            })?;
        }
    }
    Ok(format!(
        "1000 samples, worst rel error {worst:.1e}; 90 quantiles, worst abs error {worst_t:.1e}"
    ))
}

fn comm_median(r: &ExperimentResult) -> f64 {
    let v: Vec<f64> = r.measured().iter().map(|c| c.communication_duration_s).collect();
    median(&v).unwrap_or(f64::NAN)
}

fn us(s: f64) -> String {
    format!("{:.1} us", s * 1e6)
}

fn ordering_attempt(results: &[&ExperimentResult]) -> (bool, String) {
    let [native, persistent, spawn] = [comm_median(results[0]), comm_median(results[1]), comm_median(results[2])];
    let ok = native * 2.0 <= persistent && persistent * 2.0 <= spawn;
    (
        ok,
        format!(
            "medians in-process {}, persistent-local {}, spawn-process {}",
            us(native),
            us(persistent),
            us(spawn)
        ),
    )
}

fn find<'a>(results: &'a [ExperimentResult], label: &str) -> Result<&'a ExperimentResult, String> {
    results
        .iter()
        .find(|r| r.environment_label == label)
        .ok_or_else(|| format!("no {label} run available"))
}

fn ordering(out: &Path, first: &[ExperimentResult]) -> Outcome {
    let labels = ["in-process", "persistent-local", "spawn-process"];
    let picked = labels.iter().map(|l| find(first, l)).collect::<Result<Vec<_>, _>>()?;
    let (ok, first_report) = ordering_attempt(&picked);
    if ok {
        return Ok(first_report);
    }
    let retry = [
        EnvironmentKind::InProcess,
        EnvironmentKind::PersistentServiceLocal,
        EnvironmentKind::SpawnProcess,
    ]
    .iter()
    .map(|&k| experiment(k, out, "ordering-retry", 50))
    .collect::<Result<Vec<_>, _>>()?;
    let (ok, retry_report) = ordering_attempt(&retry.iter().collect::<Vec<_>>());
    if ok {
        Ok(format!("{retry_report} (retry; first attempt {first_report})"))
    } else {
        Err(format!("first attempt {first_report}; retry {retry_report}"))
    }
}

fn nesting_attempt(one: &ExperimentResult, five: &ExperimentResult) -> (bool, String) {
    let (a, b) = (comm_median(one), comm_median(five));
    (
        b <= 3.0 * a,
        format!("nested-relay-1 {}, nested-relay-5 {}, ratio {:.2}", us(a), us(b), b / a),
    )
}

fn nesting(out: &Path, first: &[ExperimentResult]) -> Outcome {
    let (ok, first_report) =
        nesting_attempt(find(first, "nested-relay-1")?, find(first, "nested-relay-5")?);
    if ok {
        return Ok(first_report);
    }
    let nested = |depth| EnvironmentKind::NestedRelay {
        depth,
        containerized: false,
    };
    let one = experiment(nested(1), out, "nesting-retry", 50)?;
    let five = experiment(nested(5), out, "nesting-retry", 50)?;
    let (ok, retry_report) = nesting_attempt(&one, &five);
    if ok {
        Ok(format!("{retry_report} (retry; first attempt {first_report})"))
    } else {
        Err(format!("first attempt {first_report}; retry {retry_report}"))
    }
}

fn boundary_neutral(runtime_dir: &Path) -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5eed_0006);
    let random_guess: Vec<f64> = (0..5).map(|_| rng.random_range(-10.0..10.0)).collect();
    let requests = [
        (vec![0.0; 5], 2500),
        (random_guess.clone(), 3),
        (random_guess, 0),
    ];
    let mut kinds: Vec<(EnvironmentKind, DriverConfig)> =
        local_kinds().iter().map(|&k| (k, driver_config())).collect();
    let containers = container_config(runtime_dir);
    for k in [
        EnvironmentKind::SpawnContainer,
        EnvironmentKind::PersistentServiceContainer,
        EnvironmentKind::NestedRelay {
            depth: 5,
            containerized: true,
        },
    ] {
        kinds.push((k, containers.clone()));
    }
    let mut reference: Vec<Option<Vec<f64>>> = vec![None; requests.len()];
    let mut worst: f64 = 0.0;
    let mut bitwise = true;
    for (kind, cfg) in &kinds {
        let mut handle = provision(*kind, cfg).map_err(|e| format!("{}: {e}", kind.label()))?;
        for (i, (guess, iterations)) in requests.iter().enumerate() {
            let rec = handle
                .invoke(&WireRequest {
                    initial_guess: guess.clone(),
                    sent_at_unix_ns: unix_now_ns(),
                    call_index: i as u64,
                    iterations: *iterations,
                    system_id: CANONICAL5.into(),
                })
                .map_err(|e| format!("{}: {e}", kind.label()))?;
            match &reference[i] {
                None => reference[i] = Some(rec.output_vector),
                Some(want) => {
                    for (a, b) in rec.output_vector.iter().zip(want) {
                        worst = worst.max((a - b).abs());
                        bitwise &= a.to_bits() == b.to_bits();
                    }
                    ensure(worst <= 1e-12, || {
                        format!("{} differs from in-process by {worst:e}", kind.label())
                    })?;
                }
            }
        }
        handle.teardown().map_err(|e| e.to_string())?;
    }
    Ok(format!(
        "{} environments x {} requests, max difference {worst:e}{}",
        kinds.len(),
        requests.len(),
        if bitwise { " (bit-identical)" } else { "" }
    ))
}

fn random_finite(rng: &mut StdRng) -> f64 {
    loop {
        let x = match rng.random_range(0..4) {
            0 => f64::from_bits(rng.random()),
            1 => rng.random_range(-1.0..1.0),
            2 => rng.random_range(-1e6..1e6),
            _ => [0.0, -0.0, f64::MIN_POSITIVE, f64::MAX, f64::MIN, 5e-324, 1.0 / 3.0][rng.random_range(0..7)],
        };
        if x.is_finite() {
            return x;
        }
    }
}

fn random_vector(rng: &mut StdRng) -> Vec<f64> {
    let n = rng.random_range(0..=12);
    (0..n).map(|_| random_finite(rng)).collect()
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn round_trips(out: &Path) -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5eed_0007);
    for case in 0..10_000 {
        let v = random_vector(&mut rng);
        let req = WireRequest {
            initial_guess: v.clone(),
            sent_at_unix_ns: rng.random(),
            call_index: rng.random(),
            iterations: rng.random(),
            system_id: format!("sys-{case}\"\\\u{e9}"),
        };
        let back = decode_request(&encode_request(&req).map_err(|e| e.to_string())?)
            .map_err(|e| format!("case {case}: {e}"))?;
        ensure(
            same_bits(&back.initial_guess, &v)
                && back.sent_at_unix_ns == req.sent_at_unix_ns
                && back.call_index == req.call_index
                && back.iterations == req.iterations
                && back.system_id == req.system_id,
            || format!("request case {case} changed"),
        )?;
        let resp = WireResponse {
            result: v.clone(),
            received_at_unix_ns: rng.random(),
            op_start_unix_ns: rng.random(),
            op_end_unix_ns: rng.random(),
            worker_id: format!("w{case}"),
            relay_path: (0..rng.random_range(0..4)).map(|i| format!("relay-{i}")).collect(),
        };
        let back = decode_response(&encode_response(&resp).map_err(|e| e.to_string())?)
            .map_err(|e| format!("case {case}: {e}"))?;
        ensure(
            same_bits(&back.result, &v)
                && back.received_at_unix_ns == resp.received_at_unix_ns
                && back.op_start_unix_ns == resp.op_start_unix_ns
                && back.op_end_unix_ns == resp.op_end_unix_ns
                && back.worker_id == resp.worker_id
                && back.relay_path == resp.relay_path,
            || format!("response case {case} changed"),
        )?;
    }

    let log = out.join("roundtrip.jsonl");
    let mut sink = LogSink::create(&log).map_err(|e| e.to_string())?;
    let mut written = Vec::new();
    for k in 0..500u64 {
        let req = WireRequest {
            initial_guess: random_vector(&mut rng),
            sent_at_unix_ns: rng.random(),
            call_index: k,
            iterations: rng.random_range(0..5000),
            system_id: CANONICAL5.into(),
        };
        let resp = WireResponse {
            result: random_vector(&mut rng),
            received_at_unix_ns: rng.random(),
            op_start_unix_ns: rng.random_range(0..1u64 << 62),
            op_end_unix_ns: rng.random_range(1u64 << 62..u64::MAX),
            worker_id: "w".into(),
            relay_path: if k % 2 == 0 { Vec::new() } else { vec!["relay-1".into()] },
        };
        let rec = CallRecord::from_exchange(
            "round-trip",
            &req,
            resp,
            Duration::from_nanos(rng.random_range(0..1u64 << 40)),
            rng.random(),
        );
        sink.append(&rec).map_err(|e| e.to_string())?;
        written.push(rec);
    }
    let read = read_log_file(&log).map_err(|e| e.to_string())?;
    ensure(read.dropped_trailing == 0, || "log reader dropped a line".into())?;
    ensure(read.records == written, || "JSONL read-back differs from what was written".into())?;
    for (a, b) in read.records.iter().zip(&written) {
        ensure(
            same_bits(&a.input_vector, &b.input_vector)
                && same_bits(&a.output_vector, &b.output_vector)
                && a.operation_duration_s.to_bits() == b.operation_duration_s.to_bits()
                && a.communication_duration_s.to_bits() == b.communication_duration_s.to_bits()
                && a.round_trip_s.to_bits() == b.round_trip_s.to_bits(),
            || format!("record {} not bit-identical after read-back", a.call_index),
        )?;
    }

    let mut runs = 0;
    for kind in [EnvironmentKind::InProcess, EnvironmentKind::PersistentServiceLocal] {
        let r = experiment(kind, out, "aggregate-identity", 40)?;
        let from_log = read_log_file(&r.log_path).map_err(|e| e.to_string())?.records;
        let again = aggregate(&from_log, &FilterConfig::default(), &exact()).map_err(|e| e.to_string())?;
        let a = serde_json::to_string(&r.aggregate).map_err(|e| e.to_string())?;
        let b = serde_json::to_string(&again).map_err(|e| e.to_string())?;
        ensure(a == b && r.aggregate == again, || {
            format!("{}: in-memory {a} vs from log {b}", r.environment_label)
        })?;
        runs += 1;
    }
    let cli_out = out.join("cli");
    let cli_out_s = cli_out.to_string_lossy().into_owned();
    let run = Command::new(EXE)
        .args(["run", "--env", "spawn-process", "--calls", "20", "--run-id", "cli", "--out", &cli_out_s])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(run.status.success(), || String::from_utf8_lossy(&run.stderr).into_owned())?;
    let log = cli_out.join("spawn-process_cli.jsonl");
    let agg = Command::new(EXE)
        .args(["aggregate", "--log"])
        .arg(&log)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(agg.status.success() && agg.stdout == run.stdout, || {
        "`aggregate` output differs from the `run` summary".into()
    })?;
    Ok(format!(
        "10000 wire vectors, 500 log records, {} aggregate identities",
        runs + 1
    ))
}

/// Pids of `bbench serve` processes started from this build.
fn serve_processes() -> BTreeSet<u32> {
    let mut out = BTreeSet::new();
    let Ok(dir) = std::fs::read_dir("/proc") else {
        return out;
    };
    for entry in dir.flatten() {
        let Some(pid) = entry.file_name().to_str().and_then(|s| s.parse::<u32>().ok()) else {
            continue;
        };
        let Ok(cmdline) = std::fs::read(entry.path().join("cmdline")) else {
            continue;
        };
        let args: Vec<&[u8]> = cmdline.split(|&b| b == 0).collect();
        if args.first() == Some(&EXE.as_bytes()) && args.get(1) == Some(&&b"serve"[..]) {
            if let Ok(stat) = std::fs::read_to_string(entry.path().join("stat")) {
                if stat.rsplit_once(')').is_some_and(|(_, r)| !r.trim_start().starts_with('Z')) {
                    out.insert(pid);
                }
            }
        }
    }
    out
}

fn settle<T: PartialEq>(mut probe: impl FnMut() -> T, want: &T) -> T {
    let deadline = Instant::now() + Duration::from_secs(3);
    loop {
        let got = probe();
        if &got == want || Instant::now() >= deadline {
            return got;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
}

fn hygiene(out: &Path, runtime_dir: &Path) -> Outcome {
    let me = std::process::id();
    let children_before = child_pids(me);
    let ports_before = listening_ports();
    let serve_before = serve_processes();

    let base = ExperimentConfig {
        num_calls: 20,
        output_dir: out.join("matrix"),
        run_id: "hygiene".into(),
        driver: driver_config(),
        ..ExperimentConfig::default()
    };
    let mut configs: Vec<ExperimentConfig> = local_kinds()
        .iter()
        .map(|&environment| ExperimentConfig {
            environment,
            ..base.clone()
        })
        .collect();
    for environment in [
        EnvironmentKind::SpawnContainer,
        EnvironmentKind::PersistentServiceContainer,
        EnvironmentKind::NestedRelay {
            depth: 5,
            containerized: true,
        },
    ] {
        configs.push(ExperimentConfig {
            environment,
            driver: container_config(runtime_dir),
            ..base.clone()
        });
    }
    let outcomes = run_matrix(&configs);
    let failed: Vec<String> = outcomes
        .iter()
        .filter_map(|o| match o {
            MatrixOutcome::Failed { environment_label, error, .. } => Some(format!("{environment_label}: {error}")),
            MatrixOutcome::Completed(_) => None,
        })
        .collect();
    ensure(failed.is_empty(), || format!("matrix slots failed: {}", failed.join("; ")))?;
    let children = settle(|| child_pids(me), &children_before);
    ensure(children == children_before, || format!("orphan children after matrix: {children:?}"))?;
    let serve = settle(serve_processes, &serve_before);
    ensure(serve == serve_before, || format!("services left running after matrix: {serve:?}"))?;
    let ports = settle(listening_ports, &ports_before);
    let leaked: Vec<_> = ports.difference(&ports_before).collect();
    ensure(leaked.is_empty(), || format!("ports left listening after matrix: {leaked:?}"))?;

    // interrupted mid-run, while a five-relay chain is serving
    let int_out = out.join("interrupted");
    let mut child = Command::new(EXE)
        .args(["matrix", "--calls", "5000", "--iterations", "10", "--depth", "5", "--run-id", "int", "--out"])
        .arg(&int_out)
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let log = int_out.join("nested-relay-5_int.jsonl");
    let deadline = Instant::now() + Duration::from_secs(120);
    let services = loop {
        let lines = std::fs::read_to_string(&log).map(|s| s.lines().count()).unwrap_or(0);
        if lines >= 20 {
            break child_pids(child.id());
        }
        if Instant::now() >= deadline || child.try_wait().map_err(|e| e.to_string())?.is_some() {
            let _ = child.kill();
            let _ = child.wait();
            return Err("interrupted matrix never reached the nested environment".into());
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    // SAFETY: kill(2) on our own child.
    unsafe { libc::kill(child.id() as libc::pid_t, libc::SIGINT) };
    let status = child.wait().map_err(|e| e.to_string())?;
    ensure(services.len() == 6, || format!("expected 6 services before interrupting, saw {}", services.len()))?;
    ensure(status.code() == Some(1), || format!("interrupted matrix exited with {status}"))?;
    let survivors: Vec<u32> = services.iter().copied().filter(|&p| pid_exists(p)).collect();
    ensure(survivors.is_empty(), || format!("services outlived the interrupted matrix: {survivors:?}"))?;
    let serve = settle(serve_processes, &serve_before);
    ensure(serve == serve_before, || format!("services left running after interrupt: {serve:?}"))?;
    let ports = settle(listening_ports, &ports_before);
    let leaked: Vec<_> = ports.difference(&ports_before).collect();
    ensure(leaked.is_empty(), || format!("ports left listening after interrupt: {leaked:?}"))?;
    Ok(format!(
        "{} matrix slots completed and 1 interrupted matrix: 0 orphans, 0 leaked ports",
        outcomes.len()
    ))
}

fn filter_behavior() -> Outcome {
    let cfg = FilterConfig::default();
    let mut rng = StdRng::seed_from_u64(0x5eed_0009);
    let cases = 2000;
    for case in 0..cases {
        let n = rng.random_range(2..=64);
        let zero = vec![if rng.random() { 0.0 } else { -0.0 }; n];
        let scale = 10f64.powi(rng.random_range(-15..4));
        let c = scale * rng.random_range(0.1..1.0) * if rng.random() { 1.0 } else { -1.0 };
        let constant = vec![c; n];
        let mut symmetric = Vec::with_capacity(n + 1);
        for _ in 0..n / 2 {
            let v = scale * rng.random_range(-1.0..1.0);
            symmetric.push(v);
            symmetric.push(-v);
        }
        if n % 2 == 1 {
            symmetric.push(0.0);
        }
        let mut shuffled = symmetric.clone();
        shuffled.shuffle(&mut rng);

        let p = confidence_filter(
            &[zero, constant.clone(), symmetric.clone(), shuffled],
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        ensure(p.accepted == [0, 2, 3] && p.rejected == [1], || {
            format!("case {case}: accepted {:?}, rejected {:?} (constant {c:e}, n {n})", p.accepted, p.rejected)
        })?;
        let m = mean(&symmetric).map_err(|e| e.to_string())?;
        let t = t_statistic(m, 0.0, population_stddev(&symmetric).map_err(|e| e.to_string())?, n);
        ensure(t == 0.0 || symmetric.iter().all(|&v| v == 0.0), || {
            format!("case {case}: symmetric vector has t = {t:e}")
        })?;
        let tc = t_statistic(mean(&constant).unwrap(), 0.0, population_stddev(&constant).unwrap(), n);
        ensure(tc.is_infinite(), || format!("case {case}: constant vector has finite t = {tc}"))?;
    }
    Ok(format!("{cases} random cases of each kind"))
}

fn main() {
    let _ = env_logger::builder().is_test(true).try_init();
    let work = tempfile::tempdir().expect("temporary directory");
    let out = work.path().join("logs");
    let runtime_dir = work.path().join("runtime");
    std::fs::create_dir_all(&runtime_dir).expect("runtime directory");

    let mut runs = Vec::new();
    let mut report: Vec<(u32, &str, Outcome)> = Vec::new();
    report.push((1, "solver golden test", solver_golden()));
    let accuracy_outcome = accuracy(&out, &mut runs);
    report.push((2, "accuracy reproduction", accuracy_outcome));
    report.push((3, "statistics oracle equivalence", statistics_oracle()));
    report.push((4, "ordering property", ordering(&out, &runs)));
    report.push((5, "nesting sub-linearity", nesting(&out, &runs)));
    report.push((6, "boundary-neutral math", boundary_neutral(&runtime_dir)));
    report.push((7, "protocol and log round-trips", round_trips(&out)));
    report.push((8, "resource hygiene", hygiene(&out, &runtime_dir)));
    report.push((9, "confidence filter behavior", filter_behavior()));

    let mut failed = 0;
    for (n, name, outcome) in &report {
        match outcome {
            Ok(detail) => println!("PASS criterion {n}: {name} ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n}: {name} ({detail})");
            }
        }
    }
    println!("{} passed, {failed} failed", report.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
