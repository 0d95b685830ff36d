//! Misbehaving and instrumented plugins for runtime and gateway tests.
//!
//! Usage: `prism-test-plugin <mode> [arg]`
//!
//! - `counter`: returns a process-global counter after incrementing it
//! - `sleeper`: never answers
//! - `hog`: allocates until the address-space limit stops it
//! - `spin [cpu_seconds]`: burns CPU (default 0.4 s), then answers
//! - `slow [millis]`: sleeps (default 10 ms), then answers
//! - `chatty`: writes two response documents
//! - `escape [path]`: writes a file outside the scratch directory
//! - `scratch`: writes a file inside the scratch directory
//! - `crash`: exits with status 3

use std::io::{Read, Write};
use std::process::ExitCode;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use prism_core::runtime::{WorkerRequest, WorkerResponse, SCRATCH_ENV};
use prism_core::wire::{ModelOutput, ModelValue};

static COUNTER: AtomicU64 = AtomicU64::new(0);

fn cpu_seconds() -> f64 {
    let mut ru: libc::rusage = unsafe { std::mem::zeroed() };
    unsafe { libc::getrusage(libc::RUSAGE_SELF, &mut ru) };
    let tv = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 * 1e-6;
    tv(ru.ru_utime) + tv(ru.ru_stime)
}

fn reply(entries: Vec<(&str, ModelValue)>) -> ExitCode {
    let mut out = ModelOutput::default();
    for (k, v) in entries {
        out.insert(k.into(), v);
    }
    println!("{}", WorkerResponse::ok(out).to_json());
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = args.first().map(String::as_str).unwrap_or("counter");
    let arg = args.get(1);

    let mut text = String::new();
    std::io::stdin().read_to_string(&mut text).ok();
    let req = WorkerRequest::parse(text.trim()).ok();

    match mode {
        "counter" => {
            let n = COUNTER.fetch_add(1, Ordering::SeqCst) + 1;
            reply(vec![("count", (n as f64).into())])
        }
        "sleeper" => loop {
            std::thread::sleep(Duration::from_secs(3600));
        },
        "hog" => {
            let mut hoard: Vec<Vec<u8>> = Vec::new();
            loop {
                hoard.push(vec![1u8; 64 << 20]);
            }
        }
        "spin" => {
            let target: f64 = arg.and_then(|a| a.parse().ok()).unwrap_or(0.4);
            let mut x = 0u64;
            while cpu_seconds() < target {
                for i in 0..100_000u64 {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(i);
                }
            }
            std::hint::black_box(x);
            reply(vec![("cpu_seconds", cpu_seconds().into())])
        }
        "slow" => {
            let ms: u64 = arg.and_then(|a| a.parse().ok()).unwrap_or(10);
            std::thread::sleep(Duration::from_millis(ms));
            let seed = req.and_then(|r| r.seed).unwrap_or(0);
            reply(vec![("seed", (seed as f64).into())])
        }
        "chatty" => {
            let one = WorkerResponse::ok(ModelOutput::default()).to_json();
            println!("{one}");
            println!("{one}");
            ExitCode::SUCCESS
        }
        "escape" => {
            let path = arg.cloned().unwrap_or_else(|| "/tmp/prism-escape".into());
            std::fs::write(&path, b"escaped").expect("write outside scratch");
            reply(vec![("wrote", path.as_str().into())])
        }
        "scratch" => {
            let dir = std::env::var(SCRATCH_ENV).expect("scratch dir set");
            let path = std::path::Path::new(&dir).join("out.txt");
            std::fs::write(&path, b"ok").expect("write inside scratch");
            reply(vec![("wrote", path.display().to_string().into())])
        }
        "crash" => {
            let _ = std::io::stderr().write_all(b"deliberate crash\n");
            ExitCode::from(3)
        }
        other => {
            eprintln!("unknown mode `{other}`");
            ExitCode::from(2)
        }
    }
}
