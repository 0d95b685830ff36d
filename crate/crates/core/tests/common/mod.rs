#![allow(dead_code)]

pub mod quota_oracle;
pub mod values;

use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use prism_core::access::{Acl, KeyStore, QuotaPolicy};
use prism_core::clock::{SharedClock, SystemClock};
use prism_core::gateway::{serve_listener, Gateway, GatewayConfig};
use serde_json::json;
use tempfile::TempDir;

pub const ACCEPT: &str = env!("CARGO_BIN_EXE_accept-demo");
pub const EPIC: &str = env!("CARGO_BIN_EXE_epic-demo");
pub const TEST_PLUGIN: &str = env!("CARGO_BIN_EXE_prism-test-plugin");
pub const SERVER: &str = env!("CARGO_BIN_EXE_prism-server");
pub const PRISMCTL: &str = env!("CARGO_BIN_EXE_prismctl");

pub struct Limits {
    pub wall_timeout: f64,
    pub cpu_limit: f64,
    pub memory_limit: u64,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            wall_timeout: 30.0,
            cpu_limit: 30.0,
            memory_limit: 512 << 20,
        }
    }
}

/// A temporary directory holding `models/` and the server's state files.
pub struct Fixture {
    pub dir: TempDir,
}

impl Fixture {
    /// Both demo models, public.
    pub fn new() -> Self {
        let f = Self::empty();
        f.add_model("accept-demo", &[ACCEPT], false, "public", Limits::default());
        f.add_model("epic-demo", &[EPIC], true, "public", Limits::default());
        f
    }

    pub fn empty() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("models")).unwrap();
        Self { dir }
    }

    pub fn models_dir(&self) -> PathBuf {
        self.dir.path().join("models")
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn add_model(
        &self,
        name: &str,
        command: &[&str],
        supports_async: bool,
        visibility: &str,
        limits: Limits,
    ) {
        let m = json!({
            "name": name,
            "version": "1.0",
            "command": command,
            "supports_async": supports_async,
            "visibility": visibility,
            "description": format!("{name} test model"),
            "limits": {
                "wall_timeout": limits.wall_timeout,
                "cpu_limit": limits.cpu_limit,
                "memory_limit": limits.memory_limit,
                "max_output_bytes": 1 << 20,
            },
        });
        std::fs::write(
            self.models_dir().join(format!("{name}.manifest.json")),
            serde_json::to_string_pretty(&m).unwrap(),
        )
        .unwrap();
    }

    pub fn test_plugin(&self, name: &str, mode_args: &[&str], supports_async: bool, limits: Limits) {
        let mut cmd = vec![TEST_PLUGIN];
        cmd.extend_from_slice(mode_args);
        self.add_model(name, &cmd, supports_async, "public", limits);
    }

    pub fn config(&self) -> GatewayConfig {
        let mut c = GatewayConfig::with_dirs(self.dir.path(), &self.models_dir());
        c.bind_address = "127.0.0.1:0".into();
        c.pool_size = 4;
        c.validate_plugins = false;
        c
    }

    pub fn keys(&self) -> KeyStore {
        KeyStore::open(&self.path("keys.json")).unwrap()
    }

    /// Creates a key and returns its plaintext.
    pub fn create_key(&self, owner: &str, acl: Acl, quota: QuotaPolicy) -> String {
        self.keys().create_key(owner, acl, quota).unwrap().1
    }

    pub fn write_config_file(&self, config: &serde_json::Value) -> PathBuf {
        let p = self.path("prism.json");
        std::fs::write(&p, serde_json::to_string_pretty(config).unwrap()).unwrap();
        p
    }
}

pub struct HttpReply {
    pub status: u16,
    pub body: String,
    pub retry_after: Option<String>,
}

pub fn http() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(60))
        .build()
        .unwrap()
}

pub fn post(base: &str, path: &str, key: Option<&str>, body: &str) -> HttpReply {
    let mut req = http()
        .post(format!("{base}{path}"))
        .header("content-type", "application/json")
        .body(body.to_owned());
    if let Some(k) = key {
        req = req.header("x-prism-auth-user", k);
    }
    let resp = req.send().unwrap();
    let status = resp.status().as_u16();
    let retry_after = resp
        .headers()
        .get("retry-after")
        .map(|v| v.to_str().unwrap().to_owned());
    HttpReply {
        status,
        body: resp.text().unwrap(),
        retry_after,
    }
}

pub fn get(base: &str, path: &str, key: Option<&str>) -> HttpReply {
    let mut req = http().get(format!("{base}{path}"));
    if let Some(k) = key {
        req = req.header("x-prism-auth-user", k);
    }
    let resp = req.send().unwrap();
    HttpReply {
        status: resp.status().as_u16(),
        retry_after: None,
        body: resp.text().unwrap(),
    }
}

/// A gateway served in-process on an ephemeral port.
pub struct TestServer {
    pub gw: Arc<Gateway>,
    pub base: String,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl TestServer {
    pub fn start(config: GatewayConfig) -> Self {
        Self::start_with(config, Arc::new(SystemClock), true)
    }

    pub fn start_with(config: GatewayConfig, clock: SharedClock, workers: bool) -> Self {
        let gw = Gateway::open(config, clock).unwrap();
        if workers {
            gw.start_workers();
        }
        let (addr_tx, addr_rx) = std::sync::mpsc::channel::<SocketAddr>();
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let g = gw.clone();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                serve_listener(g, listener, async {
                    let _ = stop_rx.await;
                })
                .await
                .unwrap();
            });
        });
        let addr = addr_rx.recv_timeout(Duration::from_secs(10)).unwrap();
        Self {
            gw,
            base: format!("http://{addr}"),
            stop: Some(stop_tx),
            thread: Some(thread),
        }
    }

    pub fn post(&self, path: &str, key: Option<&str>, body: &str) -> HttpReply {
        post(&self.base, path, key, body)
    }

    pub fn get(&self, path: &str, key: Option<&str>) -> HttpReply {
        get(&self.base, path, key)
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// A `prism-server` child process.
pub struct ServerProcess {
    pub child: Child,
    pub base: String,
}

impl ServerProcess {
    pub fn start(config_path: &Path) -> Self {
        let mut child = Command::new(SERVER)
            .arg("--config")
            .arg(config_path)
            .env("PRISM_LOG", "warn")
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let stdout = child.stdout.take().unwrap();
        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            let mut line = String::new();
            let _ = BufReader::new(stdout).read_line(&mut line);
            let _ = tx.send(line);
        });
        let line = rx
            .recv_timeout(Duration::from_secs(20))
            .expect("server did not report its address");
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected first line `{line}`"))
            .to_owned();
        Self {
            child,
            base: format!("http://{addr}"),
        }
    }

    pub fn kill9(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    pub fn signal(&self, sig: i32) {
        unsafe { libc::kill(self.child.id() as i32, sig) };
    }

    pub fn wait_exit(&mut self, timeout: Duration) -> Option<std::process::ExitStatus> {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if let Some(s) = self.child.try_wait().unwrap() {
                return Some(s);
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        None
    }
}

impl Drop for ServerProcess {
    fn drop(&mut self) {
        self.kill9();
    }
}

pub fn poll_until_terminal(base: &str, model: &str, key: Option<&str>, token: &str, timeout: Duration) -> String {
    let deadline = Instant::now() + timeout;
    let body = format!(r#"{{"func":["prism_get_async_results"],"token":["{token}"]}}"#);
    loop {
        let r = post(base, &format!("/route/{model}/async/status"), key, &body);
        if r.status == 200 && (r.body.contains("[COMPLETED]") || r.body.contains("[FAILED]")) {
            return r.body;
        }
        assert!(Instant::now() < deadline, "job {token} not finished: {} {}", r.status, r.body);
        std::thread::sleep(Duration::from_millis(25));
    }
}

/// The token from an async-submit response body.
pub fn token_of(body: &str) -> String {
    let v: serde_json::Value = serde_json::from_str(body).unwrap();
    v[0]["token"][0].as_str().unwrap().to_owned()
}
