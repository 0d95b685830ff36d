//! Blocking HTTP client for a gateway.

use std::time::Duration;

use thiserror::Error;

use crate::access::AUTH_HEADER;
use crate::jobs::JobState;
use crate::registry::ModelSummary;
use crate::wire::{
    self, ModelInput, ModelOutput, ModelValue, RouteMode, RouteTarget, RunEnvelope, StandardFunc,
    ValueMap,
};

pub const BASE_URL_ENV: &str = "PRISM_BASE_URL";
pub const API_KEY_ENV: &str = "PRISM_API_KEY";

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("base URL `{0}` must be absolute (http:// or https://)")]
    BadBaseUrl(String),
    #[error("cannot reach server: {0}")]
    Transport(String),
    #[error("HTTP {status}: {message}")]
    Http {
        status: u16,
        error_code: Option<u32>,
        message: String,
        body: String,
    },
    #[error("unexpected response: {0}")]
    Decode(String),
}

impl ClientError {
    /// 2 for client errors, 3 for transport failures, timeouts and server
    /// errors.
    pub fn exit_code(&self) -> u8 {
        match self {
            ClientError::BadBaseUrl(_) => 2,
            ClientError::Http { status, .. } if *status != 408 && (400..500).contains(status) => 2,
            _ => 3,
        }
    }

    /// Raw server body, when the server answered.
    pub fn body(&self) -> Option<&str> {
        match self {
            ClientError::Http { body, .. } => Some(body),
            _ => None,
        }
    }
}

/// A decoded response alongside the exact bytes the server sent.
#[derive(Debug, Clone)]
pub struct Response<T> {
    pub value: T,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Submitted {
    pub token: String,
    pub email_address: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobStatus {
    pub status: String,
    pub status_data: Option<ModelOutput>,
    pub job_error: Option<String>,
}

impl JobStatus {
    pub fn is_terminal(&self) -> bool {
        self.status == JobState::Completed.literal() || self.status == JobState::Failed.literal()
    }

    pub fn is_failed(&self) -> bool {
        self.status == JobState::Failed.literal()
    }
}

pub struct Client {
    config: ClientConfig,
    http: reqwest::blocking::Client,
}

impl Client {
    pub fn new(config: ClientConfig) -> Result<Self, ClientError> {
        if !(config.base_url.starts_with("http://") || config.base_url.starts_with("https://")) {
            return Err(ClientError::BadBaseUrl(config.base_url));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(Self { config, http })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn send(&self, req: reqwest::blocking::RequestBuilder) -> Result<String, ClientError> {
        let req = match &self.config.api_key {
            Some(k) => req.header(AUTH_HEADER, k),
            None => req,
        };
        let resp = req.send().map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| ClientError::Transport(e.to_string()))?;
        if status == 200 {
            return Ok(body);
        }
        let (error_code, message) = match wire::decode_map(&body) {
            Ok(m) => (
                m.get(wire::ERROR_CODE)
                    .and_then(ModelValue::as_f64)
                    .map(|c| c as u32),
                m.get(wire::ERROR_MESSAGE)
                    .and_then(ModelValue::as_str)
                    .unwrap_or("")
                    .to_owned(),
            ),
            Err(_) => (None, body.clone()),
        };
        Err(ClientError::Http {
            status,
            error_code,
            message,
            body,
        })
    }

    /// Posts an envelope and returns the response entries without
    /// `error_code`.
    pub fn call(
        &self,
        model: &str,
        mode: RouteMode,
        env: &RunEnvelope,
    ) -> Result<Response<ValueMap>, ClientError> {
        let target = RouteTarget {
            model: model.into(),
            mode,
        };
        let raw = self.send(
            self.http
                .post(self.url(&target.path()))
                .header("content-type", "application/json")
                .body(env.to_json()),
        )?;
        let mut value = wire::decode_map(&raw).map_err(|e| ClientError::Decode(e.to_string()))?;
        value.shift_remove(wire::ERROR_CODE);
        Ok(Response { value, raw })
    }

    pub fn default_input(&self, model: &str) -> Result<Response<ModelInput>, ClientError> {
        let r = self.call(
            model,
            RouteMode::Sync,
            &RunEnvelope::new(StandardFunc::GetDefaultInput),
        )?;
        Ok(Response {
            value: ModelInput(r.value),
            raw: r.raw,
        })
    }

    pub fn run(
        &self,
        model: &str,
        input: Option<ModelInput>,
        seed: Option<u64>,
    ) -> Result<Response<ModelOutput>, ClientError> {
        let mut env = RunEnvelope::new(StandardFunc::ModelRun);
        env.model_input = input;
        env.seed = seed;
        let r = self.call(model, RouteMode::Sync, &env)?;
        Ok(Response {
            value: ModelOutput(r.value),
            raw: r.raw,
        })
    }

    pub fn submit(
        &self,
        model: &str,
        input: Option<ModelInput>,
        email: Option<String>,
        seed: Option<u64>,
    ) -> Result<Response<Submitted>, ClientError> {
        let mut env = RunEnvelope::new(StandardFunc::ModelRun);
        env.model_input = input;
        env.email_address = email;
        env.seed = seed;
        let r = self.call(model, RouteMode::AsyncSubmit, &env)?;
        let token = r
            .value
            .get("token")
            .and_then(ModelValue::as_str)
            .ok_or_else(|| ClientError::Decode("response has no token".into()))?
            .to_owned();
        let email_address = r
            .value
            .get("email_address")
            .and_then(ModelValue::as_str)
            .map(str::to_owned);
        Ok(Response {
            value: Submitted {
                token,
                email_address,
            },
            raw: r.raw,
        })
    }

    pub fn poll(&self, model: &str, token: &str) -> Result<Response<JobStatus>, ClientError> {
        let mut env = RunEnvelope::new(StandardFunc::GetAsyncResults);
        env.token = Some(token.into());
        let mut r = self.call(model, RouteMode::AsyncStatus, &env)?;
        let status = r
            .value
            .get("status")
            .and_then(ModelValue::as_str)
            .ok_or_else(|| ClientError::Decode("response has no status".into()))?
            .to_owned();
        let status_data = match r.value.shift_remove("status_data") {
            Some(ModelValue::Map(m)) => Some(ModelOutput(m)),
            _ => None,
        };
        let job_error = r
            .value
            .get("job_error")
            .and_then(ModelValue::as_str)
            .map(str::to_owned);
        Ok(Response {
            value: JobStatus {
                status,
                status_data,
                job_error,
            },
            raw: r.raw,
        })
    }

    /// Polls every `interval` until the job is terminal.
    pub fn wait(
        &self,
        model: &str,
        token: &str,
        interval: Duration,
        mut on_poll: impl FnMut(&JobStatus),
    ) -> Result<Response<JobStatus>, ClientError> {
        loop {
            let r = self.poll(model, token)?;
            on_poll(&r.value);
            if r.value.is_terminal() {
                return Ok(r);
            }
            std::thread::sleep(interval);
        }
    }

    pub fn models(&self) -> Result<Response<Vec<ModelSummary>>, ClientError> {
        let raw = self.send(self.http.get(self.url("/models")))?;
        let value = serde_json::from_str(&raw).map_err(|e| ClientError::Decode(e.to_string()))?;
        Ok(Response { value, raw })
    }
}

/// Reads an input file: either the plain JSON a `default-input --out`
/// wrote, or a boxed document.
pub fn parse_input_file(text: &str) -> Result<ModelInput, String> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let root = match v {
        serde_json::Value::Array(mut a) if a.len() == 1 && a[0].is_object() => a.remove(0),
        other => other,
    };
    match wire::from_boxed_value(&root) {
        ModelValue::Map(mut m) => {
            m.shift_remove(wire::ERROR_CODE);
            Ok(ModelInput(m))
        }
        _ => Err("input file must hold a JSON object".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_and_boxed_input_files_agree() {
        let plain = r#"{"global_parameters.age0": 40, "agent.height_0_betas": [[1.8266, -0.1309]], "flag": false}"#;
        let boxed = r#"[{"global_parameters.age0":[40],"agent.height_0_betas":[[1.8266,-0.1309]],"flag":[false],"error_code":[0]}]"#;
        let a = parse_input_file(plain).unwrap();
        assert_eq!(a, parse_input_file(boxed).unwrap());
        assert!(matches!(a["agent.height_0_betas"], ModelValue::Matrix(_)));
        assert!(parse_input_file("[1,2]").is_err());
    }

    #[test]
    fn exit_codes() {
        let http = |status| ClientError::Http {
            status,
            error_code: None,
            message: String::new(),
            body: String::new(),
        };
        assert_eq!(http(404).exit_code(), 2);
        assert_eq!(http(429).exit_code(), 2);
        assert_eq!(http(408).exit_code(), 3);
        assert_eq!(http(500).exit_code(), 3);
        assert_eq!(ClientError::Transport("x".into()).exit_code(), 3);
    }

    #[test]
    fn base_url_must_be_absolute() {
        let cfg = ClientConfig {
            base_url: "localhost:8080".into(),
            api_key: None,
            timeout: Duration::from_secs(1),
        };
        assert!(matches!(Client::new(cfg), Err(ClientError::BadBaseUrl(_))));
    }
}
