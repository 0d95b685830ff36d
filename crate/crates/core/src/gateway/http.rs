use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use tokio::net::TcpListener;

use super::{Gateway, GatewayError, Reply};
use crate::access::AUTH_HEADER;
use crate::clock::SystemClock;

impl IntoResponse for Reply {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let mut resp = (
            status,
            [(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))],
            self.body,
        )
            .into_response();
        if let Some(secs) = self.retry_after {
            resp.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from(secs));
        }
        resp
    }
}

fn auth_header(headers: &HeaderMap) -> Result<Option<String>, Reply> {
    match headers.get(AUTH_HEADER) {
        None => Ok(None),
        Some(v) => v
            .to_str()
            .map(|s| Some(s.to_owned()))
            .map_err(|_| Reply::error(&GatewayError::Unauthorized("invalid API key".into()))),
    }
}

async fn route_call(State(gw): State<Arc<Gateway>>, req: Request) -> Reply {
    let path = req.uri().path().to_owned();
    if req.method() != Method::POST {
        return Reply::error(&GatewayError::Malformed(format!(
            "{} is not supported on {path}; use POST",
            req.method()
        )));
    }
    let auth = match auth_header(req.headers()) {
        Ok(a) => a,
        Err(r) => return r,
    };
    let bytes: Bytes = match axum::body::to_bytes(req.into_body(), 16 << 20).await {
        Ok(b) => b,
        Err(e) => return Reply::error(&GatewayError::Malformed(format!("cannot read body: {e}"))),
    };
    let body = match String::from_utf8(bytes.to_vec()) {
        Ok(s) => s,
        Err(_) => return Reply::error(&GatewayError::Malformed("body is not UTF-8".into())),
    };
    match tokio::task::spawn_blocking(move || gw.handle(&path, auth.as_deref(), &body)).await {
        Ok(reply) => reply,
        Err(e) => Reply::error(&GatewayError::WorkerFailed(format!("handler panicked: {e}"))),
    }
}

async fn list_models(State(gw): State<Arc<Gateway>>, headers: HeaderMap) -> Reply {
    match auth_header(&headers) {
        Ok(auth) => gw.handle_list(auth.as_deref()),
        Err(r) => r,
    }
}

async fn healthz() -> &'static str {
    "ok"
}

async fn not_found(req: Request) -> Reply {
    Reply::error(&GatewayError::NotFound(format!(
        "unknown route `{}`",
        req.uri().path()
    )))
}

pub fn router(gw: Arc<Gateway>) -> Router {
    Router::new()
        .route("/models", get(list_models))
        .route("/healthz", get(healthz))
        .route("/route/{*rest}", axum::routing::any(route_call))
        .fallback(not_found)
        .with_state(gw)
}

/// Serves on `listener` until `shutdown` resolves, then drains in-flight
/// requests and stops job drainers. Expiry runs every
/// `expiry_interval` seconds.
pub async fn serve_listener(
    gw: Arc<Gateway>,
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let ticker = {
        let gw = gw.clone();
        let every = Duration::from_secs(gw.shared.config.expiry_interval);
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(every);
            loop {
                interval.tick().await;
                let gw = gw.clone();
                let _ = tokio::task::spawn_blocking(move || {
                    let n = gw.jobs.expire_jobs(gw.shared.clock.now_ms());
                    if n > 0 {
                        tracing::info!(expired = n, "expired job results");
                    }
                })
                .await;
            }
        })
    };
    let result = axum::serve(listener, router(gw.clone()))
        .with_graceful_shutdown(shutdown)
        .await;
    ticker.abort();
    let gw2 = gw.clone();
    let _ = tokio::task::spawn_blocking(move || gw2.shutdown()).await;
    result
}

async fn shutdown_signal() {
    use tokio::signal::unix::{signal, SignalKind};
    let mut term = signal(SignalKind::terminate()).expect("install SIGTERM handler");
    tokio::select! {
        _ = term.recv() => {}
        _ = tokio::signal::ctrl_c() => {}
    }
    tracing::info!("shutting down");
}

/// Runs a server for `config` until SIGTERM or SIGINT. SIGHUP reloads the
/// model registry. `on_ready` receives the bound address.
pub async fn serve(
    config: super::GatewayConfig,
    on_ready: impl FnOnce(std::net::SocketAddr),
) -> anyhow::Result<()> {
    let bind = config.bind_address.clone();
    let validate = config.validate_plugins;
    let gw = Gateway::open(config, Arc::new(SystemClock))?;
    if validate {
        let g = gw.clone();
        tokio::task::spawn_blocking(move || g.validate_plugins()).await?;
    }
    gw.start_workers();
    let listener = TcpListener::bind(&bind)
        .await
        .map_err(|e| anyhow::anyhow!("BindFailure: cannot bind {bind}: {e}"))?;
    on_ready(listener.local_addr()?);

    {
        use tokio::signal::unix::{signal, SignalKind};
        let gw = gw.clone();
        let mut hup = signal(SignalKind::hangup())?;
        tokio::spawn(async move {
            while hup.recv().await.is_some() {
                match gw.reload_registry() {
                    Ok(n) => tracing::info!(models = n, "registry reloaded"),
                    Err(e) => tracing::error!(error = %e, "registry reload failed; keeping old models"),
                }
            }
        });
    }
    serve_listener(gw, listener, shutdown_signal()).await?;
    Ok(())
}
