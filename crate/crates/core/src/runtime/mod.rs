//! Spawn-per-call plugin execution.
//!
//! Each [`PluginRuntime::invoke`] starts a fresh worker process, writes one
//! request document to its stdin, reads one response document from its
//! stdout, and reaps the process before returning. Nothing survives between
//! calls.

pub mod sandbox;

use std::io::{Read, Write};
use std::os::fd::AsRawFd;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::registry::ModelManifest;
use crate::wire::{self, ModelInput, ModelOutput, ModelValue, ValueMap, WireError};

/// Env var naming the worker's writable scratch directory.
pub const SCRATCH_ENV: &str = "PRISM_SCRATCH_DIR";

/// Time between SIGTERM at the wall timeout and the follow-up SIGKILL.
pub const KILL_GRACE: Duration = Duration::from_millis(500);

const STDERR_TAIL: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceLimits {
    /// Seconds of wall time before the worker is terminated.
    pub wall_timeout: f64,
    /// CPU-seconds (rounded up to whole seconds for the OS limit).
    pub cpu_limit: f64,
    /// Address-space limit in bytes.
    pub memory_limit: u64,
    pub max_output_bytes: u64,
}

impl Default for ResourceLimits {
    fn default() -> Self {
        Self {
            wall_timeout: 60.0,
            cpu_limit: 60.0,
            memory_limit: 1 << 30,
            max_output_bytes: 16 << 20,
        }
    }
}

impl ResourceLimits {
    pub fn validate(&self) -> Result<(), String> {
        let positive = |name: &str, x: f64| {
            if x.is_finite() && x > 0.0 {
                Ok(())
            } else {
                Err(format!("limits.{name} must be positive"))
            }
        };
        positive("wall_timeout", self.wall_timeout)?;
        positive("cpu_limit", self.cpu_limit)?;
        positive("memory_limit", self.memory_limit as f64)?;
        positive("max_output_bytes", self.max_output_bytes as f64)
    }
}

/// The two functions a plugin implements. Async bookkeeping never reaches a
/// plugin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PluginFunc {
    GetDefaultInput,
    ModelRun,
}

impl PluginFunc {
    pub fn as_str(self) -> &'static str {
        match self {
            PluginFunc::GetDefaultInput => wire::StandardFunc::GetDefaultInput.as_str(),
            PluginFunc::ModelRun => wire::StandardFunc::ModelRun.as_str(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerRequest {
    pub func: PluginFunc,
    pub model_input: ModelInput,
    pub seed: Option<u64>,
}

impl WorkerRequest {
    pub fn default_input() -> Self {
        Self {
            func: PluginFunc::GetDefaultInput,
            model_input: ModelInput::default(),
            seed: None,
        }
    }

    pub fn run(model_input: ModelInput, seed: Option<u64>) -> Self {
        Self {
            func: PluginFunc::ModelRun,
            model_input,
            seed,
        }
    }

    /// One-line request frame.
    pub fn to_json(&self) -> String {
        let mut m = ValueMap::new();
        m.insert("func".into(), self.func.as_str().into());
        m.insert("model_input".into(), ModelValue::Map(self.model_input.0.clone()));
        if let Some(seed) = self.seed {
            m.insert("seed".into(), ModelValue::Number(seed as f64));
        }
        wire::encode_request(&m)
    }

    pub fn parse(text: &str) -> Result<Self, WireError> {
        let env = wire::RunEnvelope::parse(text)?;
        let func = match env.func {
            wire::StandardFunc::GetDefaultInput => PluginFunc::GetDefaultInput,
            wire::StandardFunc::ModelRun => PluginFunc::ModelRun,
            wire::StandardFunc::GetAsyncResults => {
                return Err(WireError::MalformedEnvelope(
                    "plugins do not handle prism_get_async_results".into(),
                ))
            }
        };
        Ok(Self {
            func,
            model_input: env.model_input.unwrap_or_default(),
            seed: env.seed,
        })
    }
}

/// `error_code == 0` exactly when `result` is present.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerResponse {
    pub error_code: u32,
    pub result: Option<ModelOutput>,
    pub error_message: Option<String>,
}

impl WorkerResponse {
    pub fn ok(result: ModelOutput) -> Self {
        Self {
            error_code: 0,
            result: Some(result),
            error_message: None,
        }
    }

    pub fn error(code: u32, message: impl Into<String>) -> Self {
        assert!(code != 0, "error responses need a nonzero code");
        Self {
            error_code: code,
            result: None,
            error_message: Some(message.into()),
        }
    }

    pub fn to_json(&self) -> String {
        let mut m = ValueMap::new();
        m.insert(wire::ERROR_CODE.into(), ModelValue::Number(self.error_code as f64));
        if let Some(result) = &self.result {
            m.insert("result".into(), ModelValue::Map(result.0.clone()));
        }
        if let Some(msg) = &self.error_message {
            m.insert(wire::ERROR_MESSAGE.into(), msg.as_str().into());
        }
        wire::encode_boxed(&ModelValue::Map(m))
    }

    pub fn from_value(root: &Value) -> Result<Self, String> {
        let mut m = match wire::decode_root(root) {
            ModelValue::Map(m) => m,
            _ => return Err("response is not an object".into()),
        };
        let error_code = match m.get(wire::ERROR_CODE) {
            Some(ModelValue::Number(x)) if *x >= 0.0 && x.fract() == 0.0 => *x as u32,
            _ => return Err("response lacks an integer error_code".into()),
        };
        let result = match m.shift_remove("result") {
            Some(ModelValue::Map(r)) => Some(ModelOutput(r)),
            Some(_) => return Err("`result` must be an object".into()),
            None => None,
        };
        let error_message = match m.shift_remove(wire::ERROR_MESSAGE) {
            Some(ModelValue::String(s)) => Some(s),
            _ => None,
        };
        if (error_code == 0) != result.is_some() {
            return Err(format!(
                "error_code {error_code} inconsistent with result {}",
                if result.is_some() { "present" } else { "absent" }
            ));
        }
        Ok(Self {
            error_code,
            result,
            error_message,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UsageReport {
    pub cpu_seconds: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuntimeError {
    #[error("worker exceeded wall timeout of {timeout_secs}s")]
    WorkerTimeout { timeout_secs: f64 },
    #[error("worker killed by resource limit ({reason})")]
    WorkerOomOrCpuKill { reason: String },
    #[error("worker crashed: {0}")]
    WorkerCrashed(String),
    #[error("plugin executable not found: {0}")]
    PluginNotFound(String),
}

impl RuntimeError {
    /// Stable class name used in error messages and logs.
    pub fn class(&self) -> &'static str {
        match self {
            RuntimeError::WorkerTimeout { .. } => "WorkerTimeout",
            RuntimeError::WorkerOomOrCpuKill { .. } => "WorkerOomOrCpuKill",
            RuntimeError::WorkerCrashed(_) => "WorkerCrashed",
            RuntimeError::PluginNotFound(_) => "PluginNotFound",
        }
    }
}

/// Outcome of one invocation. Usage is reported even when the worker failed,
/// so failed calls can still be charged.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub outcome: Result<WorkerResponse, RuntimeError>,
    pub usage: UsageReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandshakeReport {
    pub model: String,
    pub default_input_keys: usize,
    pub usage: UsageReport,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UsageTotals {
    pub invocations: u64,
    pub cpu_seconds: f64,
    pub wall_seconds: f64,
}

#[derive(Default)]
struct Totals {
    invocations: AtomicU64,
    cpu_micros: AtomicU64,
    wall_micros: AtomicU64,
}

struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Executes plugin workers with at most `parallelism` alive at once.
pub struct PluginRuntime {
    slots: Slots,
    plugin_dirs: Vec<PathBuf>,
    totals: Totals,
}

impl PluginRuntime {
    pub fn new(parallelism: usize, plugin_dirs: Vec<PathBuf>) -> Self {
        Self {
            slots: Slots {
                free: Mutex::new(parallelism.max(1)),
                cv: Condvar::new(),
            },
            plugin_dirs,
            totals: Totals::default(),
        }
    }

    pub fn totals(&self) -> UsageTotals {
        UsageTotals {
            invocations: self.totals.invocations.load(Ordering::Relaxed),
            cpu_seconds: self.totals.cpu_micros.load(Ordering::Relaxed) as f64 / 1e6,
            wall_seconds: self.totals.wall_micros.load(Ordering::Relaxed) as f64 / 1e6,
        }
    }

    /// Locates the executable for `manifest.command[0]`: absolute paths are
    /// used as is, paths containing `/` are relative to the manifest's
    /// directory, and bare names are searched in the configured plugin
    /// directories, next to the running executable, then on `PATH`.
    pub fn resolve_executable(&self, manifest: &ModelManifest) -> Result<PathBuf, RuntimeError> {
        let program = manifest
            .command
            .first()
            .ok_or_else(|| RuntimeError::PluginNotFound("empty command".into()))?;
        let candidate = Path::new(program);
        let found = if candidate.is_absolute() {
            is_executable(candidate).then(|| candidate.to_path_buf())
        } else if program.contains('/') {
            let base = manifest.base_dir.clone().unwrap_or_else(|| PathBuf::from("."));
            let p = base.join(candidate);
            is_executable(&p).then_some(p)
        } else {
            let exe_dir = std::env::current_exe()
                .ok()
                .and_then(|p| p.parent().map(Path::to_path_buf));
            let path_dirs = std::env::var_os("PATH")
                .map(|p| std::env::split_paths(&p).collect::<Vec<_>>())
                .unwrap_or_default();
            self.plugin_dirs
                .iter()
                .cloned()
                .chain(exe_dir)
                .chain(path_dirs)
                .map(|d| d.join(program))
                .find(|p| is_executable(p))
        };
        found.ok_or_else(|| RuntimeError::PluginNotFound(program.clone()))
    }

    pub fn invoke(
        &self,
        manifest: &ModelManifest,
        req: &WorkerRequest,
        limits: &ResourceLimits,
    ) -> Invocation {
        let _slot = self.slots.acquire();
        let (outcome, usage) = match self.resolve_executable(manifest) {
            Ok(exe) => run_worker(&exe, &manifest.command[1..], req, limits),
            Err(e) => (Err(e), UsageReport::default()),
        };
        self.totals.invocations.fetch_add(1, Ordering::Relaxed);
        self.totals
            .cpu_micros
            .fetch_add((usage.cpu_seconds * 1e6) as u64, Ordering::Relaxed);
        self.totals
            .wall_micros
            .fetch_add((usage.wall_seconds * 1e6) as u64, Ordering::Relaxed);
        if let Err(e) = &outcome {
            tracing::debug!(model = %manifest.name, error = %e, "worker failed");
        }
        Invocation { outcome, usage }
    }

    /// Startup health check: asks the plugin for its default input.
    pub fn validate_plugin(&self, manifest: &ModelManifest) -> Result<HandshakeReport, RuntimeError> {
        let inv = self.invoke(manifest, &WorkerRequest::default_input(), &manifest.limits);
        let resp = inv.outcome?;
        match resp.result {
            Some(result) => Ok(HandshakeReport {
                model: manifest.name.clone(),
                default_input_keys: result.len(),
                usage: inv.usage,
            }),
            None => Err(RuntimeError::WorkerCrashed(format!(
                "handshake returned error_code {}: {}",
                resp.error_code,
                resp.error_message.unwrap_or_default()
            ))),
        }
    }
}

fn is_executable(p: &Path) -> bool {
    use std::os::unix::fs::PermissionsExt;
    p.metadata()
        .map(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
        .unwrap_or(false)
}

fn read_capped<R: Read>(mut r: R, cap: usize, overflow: &AtomicBool) -> Vec<u8> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 8192];
    loop {
        match r.read(&mut chunk) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                if buf.len() + n > cap {
                    overflow.store(true, Ordering::SeqCst);
                    break;
                }
                buf.extend_from_slice(&chunk[..n]);
            }
        }
    }
    buf
}

fn read_tail<R: Read>(mut r: R) -> Vec<u8> {
    let mut tail = Vec::new();
    let mut chunk = [0u8; 4096];
    while let Ok(n) = r.read(&mut chunk) {
        if n == 0 {
            break;
        }
        tail.extend_from_slice(&chunk[..n]);
        if tail.len() > STDERR_TAIL {
            tail.drain(..tail.len() - STDERR_TAIL);
        }
    }
    tail
}

fn run_worker(
    exe: &Path,
    args: &[String],
    req: &WorkerRequest,
    limits: &ResourceLimits,
) -> (Result<WorkerResponse, RuntimeError>, UsageReport) {
    let crashed = |msg: String| (Err(RuntimeError::WorkerCrashed(msg)), UsageReport::default());

    let scratch = match tempfile::Builder::new().prefix("prism-scratch-").tempdir() {
        Ok(d) => d,
        Err(e) => return crashed(format!("cannot create scratch directory: {e}")),
    };
    let ruleset = match sandbox::write_confinement(scratch.path()) {
        Ok(r) => r,
        Err(e) => return crashed(format!("cannot build filesystem confinement: {e}")),
    };

    let mut cmd = Command::new(exe);
    cmd.args(args)
        .env_clear()
        .env(SCRATCH_ENV, scratch.path())
        .env("HOME", scratch.path())
        .env("TMPDIR", scratch.path())
        .current_dir(scratch.path())
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if let Some(path) = std::env::var_os("PATH") {
        cmd.env("PATH", path);
    }
    sandbox::configure(
        &mut cmd,
        sandbox::ChildLimits {
            cpu_seconds: limits.cpu_limit.ceil().max(1.0) as u64,
            address_space_bytes: limits.memory_limit,
        },
        ruleset.as_ref().map(|fd| fd.as_raw_fd()),
    );

    let started = Instant::now();
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return (
                Err(RuntimeError::PluginNotFound(exe.display().to_string())),
                UsageReport::default(),
            )
        }
        Err(e) => return crashed(format!("spawn failed: {e}")),
    };
    drop(ruleset);
    let pid = child.id();

    let frame = format!("{}\n", req.to_json());
    let mut stdin = child.stdin.take().expect("piped stdin");
    let writer = thread::spawn(move || {
        // A worker that exits without reading its input is not an error here.
        let _ = stdin.write_all(frame.as_bytes());
    });
    let overflow = Arc::new(AtomicBool::new(false));
    let stdout = child.stdout.take().expect("piped stdout");
    let cap = limits.max_output_bytes as usize;
    let overflow_flag = overflow.clone();
    let out_reader = thread::spawn(move || read_capped(stdout, cap, &overflow_flag));
    let stderr = child.stderr.take().expect("piped stderr");
    let err_reader = thread::spawn(move || read_tail(stderr));

    let deadline = Duration::from_secs_f64(limits.wall_timeout);
    let mut timed_out = false;
    let mut term_sent_at: Option<Instant> = None;
    let mut killed_for_output = false;
    let mut poll = Duration::from_millis(1);
    let reaped = loop {
        match sandbox::try_reap(pid) {
            Ok(r) if !matches!(r.status, sandbox::WaitStatus::Running) => break Some(r),
            Ok(_) => {}
            Err(e) => {
                tracing::warn!(pid, error = %e, "wait4 failed");
                break None;
            }
        }
        let elapsed = started.elapsed();
        if overflow.load(Ordering::SeqCst) && !killed_for_output {
            killed_for_output = true;
            sandbox::kill_group(pid, libc::SIGKILL);
        }
        match term_sent_at {
            None if elapsed >= deadline => {
                timed_out = true;
                term_sent_at = Some(Instant::now());
                sandbox::kill_group(pid, libc::SIGTERM);
            }
            Some(t) if t.elapsed() >= KILL_GRACE => {
                sandbox::kill_group(pid, libc::SIGKILL);
            }
            _ => {}
        }
        thread::sleep(poll);
        poll = (poll * 2).min(Duration::from_millis(10));
    };
    // Take down anything the worker left behind in its group.
    sandbox::kill_group(pid, libc::SIGKILL);
    let wall = started.elapsed();

    let _ = writer.join();
    let stdout = out_reader.join().unwrap_or_default();
    let stderr_tail = String::from_utf8_lossy(&err_reader.join().unwrap_or_default())
        .trim()
        .to_string();
    drop(scratch);

    let usage = UsageReport {
        cpu_seconds: reaped.as_ref().map(|r| r.cpu_seconds).unwrap_or(0.0),
        wall_seconds: wall.as_secs_f64(),
    };
    let diag = |base: String| {
        if stderr_tail.is_empty() {
            base
        } else {
            format!("{base}; stderr: {stderr_tail}")
        }
    };

    let outcome = if timed_out {
        Err(RuntimeError::WorkerTimeout {
            timeout_secs: limits.wall_timeout,
        })
    } else if killed_for_output || overflow.load(Ordering::SeqCst) {
        Err(RuntimeError::WorkerCrashed(format!(
            "output exceeds max_output_bytes ({})",
            limits.max_output_bytes
        )))
    } else {
        match reaped.map(|r| r.status) {
            None => Err(RuntimeError::WorkerCrashed("lost track of worker process".into())),
            Some(sandbox::WaitStatus::Signaled(sig)) => match sig {
                libc::SIGXCPU | libc::SIGKILL | libc::SIGABRT | libc::SIGSEGV | libc::SIGBUS => {
                    let reason = if usage.cpu_seconds >= limits.cpu_limit {
                        format!("cpu limit {}s, {}", limits.cpu_limit, sandbox::signal_name(sig))
                    } else {
                        format!(
                            "memory limit {} bytes or fault, {}",
                            limits.memory_limit,
                            sandbox::signal_name(sig)
                        )
                    };
                    Err(RuntimeError::WorkerOomOrCpuKill { reason })
                }
                other => Err(RuntimeError::WorkerCrashed(diag(format!(
                    "terminated by {} ({other})",
                    sandbox::signal_name(other)
                )))),
            },
            Some(sandbox::WaitStatus::Exited(0)) => parse_single_response(&stdout),
            Some(sandbox::WaitStatus::Exited(code)) => {
                if stderr_tail.contains("memory allocation of") {
                    Err(RuntimeError::WorkerOomOrCpuKill {
                        reason: format!("memory limit {} bytes", limits.memory_limit),
                    })
                } else {
                    Err(RuntimeError::WorkerCrashed(diag(format!("exit status {code}"))))
                }
            }
            Some(sandbox::WaitStatus::Running) => unreachable!(),
        }
    };
    (outcome, usage)
}

/// Exactly one JSON document, optionally followed by whitespace.
fn parse_single_response(stdout: &[u8]) -> Result<WorkerResponse, RuntimeError> {
    let mut docs = serde_json::Deserializer::from_slice(stdout).into_iter::<Value>();
    let first = match docs.next() {
        Some(Ok(v)) => v,
        Some(Err(e)) => return Err(RuntimeError::WorkerCrashed(format!("malformed response: {e}"))),
        None => return Err(RuntimeError::WorkerCrashed("worker wrote no response".into())),
    };
    let rest = &stdout[docs.byte_offset()..];
    if !rest.iter().all(u8::is_ascii_whitespace) {
        return Err(RuntimeError::WorkerCrashed(
            "extra output after the response document".into(),
        ));
    }
    WorkerResponse::from_value(&first).map_err(RuntimeError::WorkerCrashed)
}
