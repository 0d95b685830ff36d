//! The HTTP gateway: routes calls through authentication, authorization,
//! quota admission and dispatch to the plugin runtime or the job queue.

pub mod config;
mod http;

use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::access::{
    self, AccessError, Caller, KeyStore, Outcome, QuotaEngine, QuotaPolicy, RequestLog,
};
use crate::clock::SharedClock;
use crate::jobs::{JobConfig, JobError, JobExecutor, JobManager, JobRecord};
use crate::registry::{ModelManifest, RegistryError, RegistryHandle};
use crate::runtime::{
    Invocation, PluginRuntime, RuntimeError, UsageReport, WorkerRequest, WorkerResponse,
};
use crate::wire::{self, ModelOutput, RouteError, RouteMode, RunEnvelope, StandardFunc, ValueMap};

pub use config::{ConfigError, GatewayConfig};
pub use http::{router, serve, serve_listener};

/// Stable nonzero error codes.
#[derive(Debug, Clone, PartialEq)]
pub enum GatewayError {
    Malformed(String),
    Unauthorized(String),
    Forbidden(String),
    NotFound(String),
    QuotaExceeded { retry_after_secs: u64, message: String },
    Timeout(String),
    WorkerFailed(String),
    QueueFull(String),
}

impl GatewayError {
    pub fn code(&self) -> u32 {
        match self {
            GatewayError::Malformed(_) => 1,
            GatewayError::Unauthorized(_) => 2,
            GatewayError::Forbidden(_) => 3,
            GatewayError::NotFound(_) => 4,
            GatewayError::QuotaExceeded { .. } => 5,
            GatewayError::Timeout(_) => 6,
            GatewayError::WorkerFailed(_) => 7,
            GatewayError::QueueFull(_) => 8,
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            GatewayError::Malformed(_) => 400,
            GatewayError::Unauthorized(_) => 401,
            GatewayError::Forbidden(_) => 403,
            GatewayError::NotFound(_) => 404,
            GatewayError::QuotaExceeded { .. } => 429,
            GatewayError::Timeout(_) => 408,
            GatewayError::WorkerFailed(_) => 500,
            GatewayError::QueueFull(_) => 503,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            GatewayError::Malformed(m)
            | GatewayError::Unauthorized(m)
            | GatewayError::Forbidden(m)
            | GatewayError::NotFound(m)
            | GatewayError::Timeout(m)
            | GatewayError::WorkerFailed(m)
            | GatewayError::QueueFull(m) => m,
            GatewayError::QuotaExceeded { message, .. } => message,
        }
    }

    fn outcome(&self) -> Outcome {
        match self {
            GatewayError::Unauthorized(_) | GatewayError::Forbidden(_) => Outcome::Denied,
            GatewayError::QuotaExceeded { .. } => Outcome::Quota,
            _ => Outcome::Error,
        }
    }
}

impl From<AccessError> for GatewayError {
    fn from(e: AccessError) -> Self {
        match e {
            AccessError::InvalidKey => GatewayError::Unauthorized("invalid API key".into()),
            AccessError::Forbidden { anonymous: true, model } => GatewayError::Unauthorized(
                format!("model `{model}` requires an API key"),
            ),
            e @ AccessError::Forbidden { .. } => GatewayError::Forbidden(e.to_string()),
            AccessError::QuotaExceeded {
                retry_after_secs,
                reason,
            } => GatewayError::QuotaExceeded {
                retry_after_secs,
                message: format!("QuotaExceeded: {reason}"),
            },
            e @ (AccessError::UnknownKeyId(_) | AccessError::Store(_)) => {
                GatewayError::WorkerFailed(e.to_string())
            }
        }
    }
}

impl From<RuntimeError> for GatewayError {
    fn from(e: RuntimeError) -> Self {
        let msg = format!("{}: {e}", e.class());
        match e {
            RuntimeError::WorkerTimeout { .. } => GatewayError::Timeout(msg),
            _ => GatewayError::WorkerFailed(msg),
        }
    }
}

impl From<JobError> for GatewayError {
    fn from(e: JobError) -> Self {
        match e {
            JobError::AsyncUnsupported(_) => GatewayError::Malformed(format!("AsyncUnsupported: {e}")),
            JobError::QueueFull(_) => GatewayError::QueueFull(format!("QueueFull: {e}")),
            JobError::UnknownToken(_) => GatewayError::NotFound(format!("UnknownToken: {e}")),
            JobError::Journal(_) => GatewayError::WorkerFailed(e.to_string()),
        }
    }
}

/// A finished HTTP exchange, independent of the server framework.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub status: u16,
    pub body: String,
    pub retry_after: Option<u64>,
}

impl Reply {
    pub fn ok(body: String) -> Self {
        Self {
            status: 200,
            body,
            retry_after: None,
        }
    }

    pub fn error(e: &GatewayError) -> Self {
        Self {
            status: e.status(),
            body: wire::error_response(e.code(), e.message()),
            retry_after: match e {
                GatewayError::QuotaExceeded {
                    retry_after_secs, ..
                } => Some(*retry_after_secs),
                _ => None,
            },
        }
    }
}

/// State shared by request handlers and job drainers.
pub struct Shared {
    pub config: GatewayConfig,
    pub registry: RegistryHandle,
    pub keys: KeyStore,
    pub quota: Arc<QuotaEngine>,
    pub log: RequestLog,
    pub runtime: PluginRuntime,
    pub clock: SharedClock,
}

impl Shared {
    fn policy_for(&self, caller: &Caller) -> QuotaPolicy {
        match caller {
            Caller::Anonymous => self.config.anonymous_quota,
            Caller::Key(k) => k.quota,
        }
    }

    fn policy_for_account(&self, account: &str) -> QuotaPolicy {
        match self.keys.get(account) {
            Some(k) => k.quota,
            None => self.config.anonymous_quota,
        }
    }
}

fn estimate_key(model: &str, func: StandardFunc) -> String {
    format!("{model}#{func}")
}

/// Turns a worker invocation into model output or a gateway error.
/// Plugin-reported failures become malformed-input errors.
fn worker_result(inv: Invocation) -> Result<ModelOutput, GatewayError> {
    match inv.outcome? {
        WorkerResponse {
            result: Some(out), ..
        } => Ok(out),
        WorkerResponse {
            error_code,
            error_message,
            ..
        } => Err(GatewayError::Malformed(format!(
            "DomainError: {}",
            error_message.unwrap_or_else(|| format!("plugin returned error_code {error_code}"))
        ))),
    }
}

struct Executor(Arc<Shared>);

impl JobExecutor for Executor {
    fn execute(&self, job: &JobRecord) -> Result<ModelOutput, String> {
        let s = &self.0;
        let started = Instant::now();
        let manifest = s
            .registry
            .snapshot()
            .resolve(&job.ticket.model)
            .map_err(|e| format!("ModelNotFound: {e}"))?;
        let inv = s.runtime.invoke(
            &manifest,
            &WorkerRequest::run(job.input.clone(), Some(job.seed)),
            &manifest.limits,
        );
        let usage = inv.usage;
        let policy = s.policy_for_account(&job.account);
        s.quota
            .charge(&job.account, &policy, access::quota::to_micros(usage.cpu_seconds));
        if inv.outcome.is_ok() {
            s.quota
                .observe(&estimate_key(&manifest.name, StandardFunc::ModelRun), &usage);
        }
        let result = worker_result(inv).map_err(|e| e.message().to_owned());
        s.log.log_request(
            &job.account,
            &manifest.name,
            "job",
            if result.is_ok() { Outcome::Ok } else { Outcome::Error },
            usage.cpu_seconds,
            started.elapsed().as_millis() as u64,
        );
        result
    }
}

pub struct Gateway {
    pub shared: Arc<Shared>,
    pub jobs: Arc<JobManager>,
    seeds: Mutex<StdRng>,
}

impl Gateway {
    /// Loads models and state files. Job drainers are not started.
    pub fn open(config: GatewayConfig, clock: SharedClock) -> anyhow::Result<Arc<Self>> {
        config.validate()?;
        let registry = RegistryHandle::load(&config.models_dir)?;
        let keys = KeyStore::open(&config.keys_path)?;
        let log = RequestLog::open(&config.log_path, clock.clone());
        let runtime = PluginRuntime::new(config.pool_size, config.plugin_dirs.clone());
        let job_config = JobConfig {
            journal_path: config.jobs_path.clone(),
            outbox_path: config.outbox_path.clone(),
            queue_cap: config.queue_cap,
            retention_ms: config.retention.saturating_mul(1000),
            compact_every: 1000,
        };
        let shared = Arc::new(Shared {
            quota: QuotaEngine::new(clock.clone()),
            config,
            registry,
            keys,
            log,
            runtime,
            clock: clock.clone(),
        });
        let jobs = JobManager::open(
            job_config,
            Arc::new(Executor(shared.clone())),
            clock,
            StdRng::from_os_rng(),
        )?;
        Ok(Arc::new(Self {
            shared,
            jobs,
            seeds: Mutex::new(StdRng::from_os_rng()),
        }))
    }

    pub fn start_workers(&self) {
        self.jobs.start_workers(self.shared.config.pool_size);
    }

    /// Runs the default-input handshake against every model and reports
    /// failures. Broken plugins stay registered.
    pub fn validate_plugins(&self) -> Vec<(String, Result<usize, RuntimeError>)> {
        let registry = self.shared.registry.snapshot();
        registry
            .manifests()
            .map(|m| {
                let r = self.shared.runtime.validate_plugin(m);
                match &r {
                    Ok(h) => tracing::info!(model = %m.name, keys = h.default_input_keys, "plugin ok"),
                    Err(e) => tracing::warn!(model = %m.name, error = %e, "plugin handshake failed"),
                }
                (m.name.clone(), r.map(|h| h.default_input_keys))
            })
            .collect()
    }

    pub fn reload_registry(&self) -> Result<usize, RegistryError> {
        self.shared.registry.reload().map(|r| r.len())
    }

    /// `GET /models`.
    pub fn handle_list(&self, auth: Option<&str>) -> Reply {
        match access::authenticate(auth, &self.shared.keys) {
            Ok(caller) => {
                let models = self.shared.registry.snapshot().list_models(caller.key());
                Reply::ok(serde_json::to_string(&models).expect("summaries serialize"))
            }
            Err(e) => Reply::error(&e.into()),
        }
    }

    /// `POST /route/...`. Blocks while a worker runs.
    pub fn handle(&self, path: &str, auth: Option<&str>, body: &str) -> Reply {
        let started = Instant::now();
        let mut ctx = LogContext {
            account: match auth {
                None => "anonymous".into(),
                Some(_) => "-".into(),
            },
            model: "-".into(),
            mode: "-",
            cpu_seconds: 0.0,
        };
        let result = self.route(path, auth, body, &mut ctx);
        let wall_ms = started.elapsed().as_millis() as u64;
        let (reply, outcome) = match result {
            Ok(body) => (Reply::ok(body), Outcome::Ok),
            Err(e) => (Reply::error(&e), e.outcome()),
        };
        self.shared.log.log_request(
            &ctx.account,
            &ctx.model,
            ctx.mode,
            outcome,
            ctx.cpu_seconds,
            wall_ms,
        );
        reply
    }

    fn route(
        &self,
        path: &str,
        auth: Option<&str>,
        body: &str,
        ctx: &mut LogContext,
    ) -> Result<String, GatewayError> {
        let s = &self.shared;
        let target = wire::parse_route(path).map_err(|e| match e {
            RouteError::UnknownRoute(_) | RouteError::InvalidModelName(_) => {
                GatewayError::NotFound(e.to_string())
            }
        })?;
        ctx.model = target.model.clone();
        ctx.mode = target.mode.as_str();

        let caller = access::authenticate(auth, &s.keys)?;
        ctx.account = caller.account().to_owned();
        let manifest = s
            .registry
            .snapshot()
            .resolve(&target.model)
            .map_err(|e| GatewayError::NotFound(e.to_string()))?;
        access::authorize(&caller, &manifest)?;

        let env = RunEnvelope::parse(body).map_err(|e| GatewayError::Malformed(e.to_string()))?;
        match (target.mode, env.func) {
            (RouteMode::Sync, func @ (StandardFunc::GetDefaultInput | StandardFunc::ModelRun)) => {
                self.run_sync(&caller, &manifest, func, env, ctx)
            }
            (RouteMode::AsyncSubmit, StandardFunc::ModelRun) => self.submit(&caller, &manifest, env),
            (RouteMode::AsyncStatus, StandardFunc::GetAsyncResults) => {
                let token = env.token.as_deref().unwrap_or_default();
                let view = self.jobs.poll(&manifest.name, token)?;
                Ok(wire::ok_response(view.to_entries()))
            }
            (mode, func) => Err(GatewayError::Malformed(format!(
                "`{func}` is not accepted on the {} route",
                mode.as_str()
            ))),
        }
    }

    fn run_sync(
        &self,
        caller: &Caller,
        manifest: &ModelManifest,
        func: StandardFunc,
        env: RunEnvelope,
        ctx: &mut LogContext,
    ) -> Result<String, GatewayError> {
        let s = &self.shared;
        let key = estimate_key(&manifest.name, func);
        let reservation =
            s.quota
                .reserve(caller.account(), &s.policy_for(caller), s.quota.estimate(&key))?;
        let req = match func {
            StandardFunc::GetDefaultInput => WorkerRequest::default_input(),
            _ => WorkerRequest::run(env.model_input.unwrap_or_default(), env.seed),
        };
        let inv = s.runtime.invoke(manifest, &req, &manifest.limits);
        let usage: UsageReport = inv.usage;
        ctx.cpu_seconds = usage.cpu_seconds;
        reservation.settle(&usage);
        if inv.outcome.is_ok() {
            s.quota.observe(&key, &usage);
        }
        let out = worker_result(inv)?;
        Ok(wire::ok_response(out.into_inner()))
    }

    fn submit(
        &self,
        caller: &Caller,
        manifest: &ModelManifest,
        env: RunEnvelope,
    ) -> Result<String, GatewayError> {
        let s = &self.shared;
        if !manifest.supports_async {
            return Err(JobError::AsyncUnsupported(manifest.name.clone()).into());
        }
        let key = estimate_key(&manifest.name, StandardFunc::ModelRun);
        s.quota
            .check(caller.account(), &s.policy_for(caller), s.quota.estimate(&key))?;
        let seed = env
            .seed
            .unwrap_or_else(|| self.seeds.lock().unwrap().random::<u64>() >> 11);
        let ticket = self.jobs.submit(
            manifest,
            env.model_input.unwrap_or_default(),
            env.email_address.clone(),
            seed,
            caller.account(),
        )?;
        let mut m = ValueMap::new();
        m.insert("token".into(), ticket.token.into());
        if let Some(email) = ticket.email_address {
            m.insert("email_address".into(), email.into());
        }
        Ok(wire::ok_response(m))
    }

    /// Stops job drainers after their current job.
    pub fn shutdown(&self) {
        self.jobs.shutdown();
    }
}

struct LogContext {
    account: String,
    model: String,
    mode: &'static str,
    cpu_seconds: f64,
}
