//! Glue between a model implementation and the plugin stdio contract.

use std::io::{Read, Write};
use std::process::ExitCode;

use crate::runtime::{PluginFunc, WorkerRequest, WorkerResponse};
use crate::wire::{ModelInput, ModelOutput};

/// Error code a plugin reports for invalid input.
pub const DOMAIN_ERROR: u32 = 1;

pub trait Model {
    fn default_input(&self) -> ModelInput;

    fn run(&self, input: &ModelInput, seed: u64) -> Result<ModelOutput, String>;
}

/// Overlays `provided` on the model's defaults. Keys the model does not
/// know are rejected.
pub fn merge_input(defaults: ModelInput, provided: &ModelInput) -> Result<ModelInput, String> {
    let mut merged = defaults;
    for (k, v) in provided.iter() {
        match merged.get_mut(k) {
            Some(slot) => *slot = v.clone(),
            None => return Err(format!("unknown input parameter `{k}`")),
        }
    }
    Ok(merged)
}

/// Answers one request. Unseeded runs draw a seed below 2^53.
pub fn handle<M: Model + ?Sized>(model: &M, req: &WorkerRequest) -> WorkerResponse {
    match req.func {
        PluginFunc::GetDefaultInput => WorkerResponse::ok(ModelOutput(model.default_input().0)),
        PluginFunc::ModelRun => {
            let seed = req
                .seed
                .unwrap_or_else(|| rand::random::<u64>() >> 11);
            let outcome = merge_input(model.default_input(), &req.model_input)
                .and_then(|input| model.run(&input, seed));
            match outcome {
                Ok(out) => WorkerResponse::ok(out),
                Err(msg) => WorkerResponse::error(DOMAIN_ERROR, msg),
            }
        }
    }
}

/// Reads one request from stdin, writes one response to stdout.
pub fn serve_stdio<M: Model + ?Sized>(model: &M) -> ExitCode {
    let mut text = String::new();
    if let Err(e) = std::io::stdin().read_to_string(&mut text) {
        eprintln!("cannot read request: {e}");
        return ExitCode::FAILURE;
    }
    let response = match WorkerRequest::parse(text.trim()) {
        Ok(req) => handle(model, &req),
        Err(e) => WorkerResponse::error(DOMAIN_ERROR, e.to_string()),
    };
    let mut out = std::io::stdout().lock();
    if writeln!(out, "{}", response.to_json())
        .and_then(|_| out.flush())
        .is_err()
    {
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}

/// Field accessors that turn a missing or mistyped value into a message.
pub(crate) struct Fields<'a>(pub &'a ModelInput);

impl Fields<'_> {
    pub fn num(&self, key: &str) -> Result<f64, String> {
        match self.0.get(key).and_then(|v| v.as_f64()) {
            Some(x) if x.is_finite() => Ok(x),
            _ => Err(format!("`{key}` must be a number")),
        }
    }

    pub fn bool(&self, key: &str) -> Result<bool, String> {
        self.0
            .get(key)
            .and_then(|v| v.as_bool())
            .ok_or_else(|| format!("`{key}` must be a boolean"))
    }

    pub fn binary(&self, key: &str) -> Result<f64, String> {
        let x = self.num(key)?;
        if x == 0.0 || x == 1.0 {
            Ok(x)
        } else {
            Err(format!("`{key}` must be 0 or 1, got {x}"))
        }
    }

    pub fn count(&self, key: &str) -> Result<u64, String> {
        let x = self.num(key)?;
        if x >= 0.0 && x.fract() == 0.0 && x < 9_007_199_254_740_992.0 {
            Ok(x as u64)
        } else {
            Err(format!("`{key}` must be a non-negative integer, got {x}"))
        }
    }

    pub fn in_range(&self, key: &str, lo: f64, hi: f64) -> Result<f64, String> {
        let x = self.num(key)?;
        if (lo..=hi).contains(&x) {
            Ok(x)
        } else {
            Err(format!("`{key}` must lie in [{lo}, {hi}], got {x}"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::ModelValue;

    struct Twice;

    impl Model for Twice {
        fn default_input(&self) -> ModelInput {
            let mut m = ModelInput::default();
            m.insert("x".into(), 1.0.into());
            m.insert("y".into(), 2.0.into());
            m
        }

        fn run(&self, input: &ModelInput, seed: u64) -> Result<ModelOutput, String> {
            let x = Fields(input).num("x")?;
            let mut out = ModelOutput::default();
            out.insert("x2".into(), (2.0 * x).into());
            out.insert("seed".into(), (seed as f64).into());
            Ok(out)
        }
    }

    #[test]
    fn partial_input_overlays_defaults() {
        let mut provided = ModelInput::default();
        provided.insert("x".into(), 5.0.into());
        let resp = handle(&Twice, &WorkerRequest::run(provided, Some(9)));
        let out = resp.result.unwrap();
        assert_eq!(out["x2"], ModelValue::Number(10.0));
        assert_eq!(out["seed"], ModelValue::Number(9.0));
    }

    #[test]
    fn unknown_key_is_domain_error() {
        let mut provided = ModelInput::default();
        provided.insert("z".into(), 5.0.into());
        let resp = handle(&Twice, &WorkerRequest::run(provided, Some(1)));
        assert_eq!(resp.error_code, DOMAIN_ERROR);
        assert!(resp.error_message.unwrap().contains("`z`"));
    }

    #[test]
    fn mistyped_value_is_domain_error() {
        let mut provided = ModelInput::default();
        provided.insert("x".into(), "five".into());
        let resp = handle(&Twice, &WorkerRequest::run(provided, Some(1)));
        assert_eq!(resp.error_code, DOMAIN_ERROR);
    }

    #[test]
    fn unseeded_runs_pick_a_seed() {
        let resp = handle(&Twice, &WorkerRequest::run(ModelInput::default(), None));
        let seed = resp.result.unwrap()["seed"].as_f64().unwrap();
        assert!(seed < 2f64.powi(53));
    }
}
