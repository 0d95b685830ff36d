use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use prism_core::access::{Acl, ApiKeyRecord, KeyStore, QuotaPolicy};
use prism_core::client::{
    parse_input_file, Client, ClientConfig, ClientError, JobStatus, API_KEY_ENV, BASE_URL_ENV,
};
use prism_core::wire::{to_plain_json, ModelValue, ValueMap};

/// Command-line client for a model gateway.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[arg(long, env = BASE_URL_ENV, default_value = "http://127.0.0.1:8080", global = true)]
    base_url: String,
    #[arg(long, env = API_KEY_ENV, global = true, hide_env_values = true)]
    api_key: Option<String>,
    /// Request timeout in seconds.
    #[arg(long, default_value_t = 300.0, global = true)]
    timeout: f64,
    /// Print server response bodies verbatim.
    #[arg(long, global = true)]
    raw: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fetch a model's default input.
    DefaultInput {
        model: String,
        /// Write the input as editable JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a model, submit an async job, or check a job.
    Run(RunArgs),
    /// List the models visible to the caller.
    Models,
    /// Manage API keys in a local key store file.
    Admin {
        #[arg(long, default_value = "keys.json")]
        keys: PathBuf,
        #[command(subcommand)]
        action: Admin,
    },
}

#[derive(Args)]
struct RunArgs {
    model: String,
    /// Input file (plain or boxed JSON); omitted means model defaults.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Submit as an asynchronous job and print its token.
    #[arg(long = "async", conflicts_with = "token")]
    async_: bool,
    /// Address to notify when the job finishes.
    #[arg(long, requires = "async_")]
    email: Option<String>,
    /// Seed for stochastic models.
    #[arg(long)]
    seed: Option<u64>,
    /// Check the job with this token.
    #[arg(long)]
    token: Option<String>,
    /// Poll until the job finishes.
    #[arg(long)]
    watch: bool,
    /// Seconds between polls with --watch.
    #[arg(long, default_value_t = 2.0)]
    interval: f64,
}

#[derive(Args)]
struct QuotaArgs {
    /// CPU-seconds per window.
    #[arg(long)]
    cpu: Option<f64>,
    /// Window length in seconds.
    #[arg(long)]
    window: Option<u64>,
    #[arg(long)]
    max_concurrent: Option<u32>,
}

impl QuotaArgs {
    fn apply(&self, base: QuotaPolicy) -> QuotaPolicy {
        QuotaPolicy {
            cpu_seconds_per_window: self.cpu.unwrap_or(base.cpu_seconds_per_window),
            window: self.window.unwrap_or(base.window),
            max_concurrent: self.max_concurrent.unwrap_or(base.max_concurrent),
        }
    }
}

#[derive(Subcommand)]
enum Admin {
    /// Create a key and print it once.
    CreateKey {
        #[arg(long)]
        owner: String,
        /// `ALL` or a comma-separated list of model names.
        #[arg(long, default_value = "ALL")]
        acl: String,
        #[command(flatten)]
        quota: QuotaArgs,
    },
    RevokeKey {
        key_id: String,
    },
    SetAcl {
        key_id: String,
        acl: String,
    },
    SetQuota {
        key_id: String,
        #[command(flatten)]
        quota: QuotaArgs,
    },
    ListKeys,
}

enum Failure {
    Client(ClientError),
    Usage(String),
    JobFailed,
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        Failure::Client(e)
    }
}

fn pretty(m: &ValueMap) -> String {
    serde_json::to_string_pretty(&to_plain_json(&ModelValue::Map(m.clone()))).expect("json")
}

fn print_status(s: &JobStatus, raw_body: &str, raw: bool) {
    if raw {
        println!("{raw_body}");
        return;
    }
    println!("{}", s.status);
    if let Some(data) = &s.status_data {
        println!("{}", pretty(data));
    }
    if let Some(err) = &s.job_error {
        eprintln!("job error: {err}");
    }
}

fn client(cli: &Cli) -> Result<Client, Failure> {
    if !(cli.timeout.is_finite() && cli.timeout > 0.0) {
        return Err(Failure::Usage("--timeout must be positive".into()));
    }
    Ok(Client::new(ClientConfig {
        base_url: cli.base_url.clone(),
        api_key: cli.api_key.clone(),
        timeout: Duration::from_secs_f64(cli.timeout),
    })?)
}

fn run(cli: &Cli, args: &RunArgs) -> Result<(), Failure> {
    let c = client(cli)?;
    let interval = Duration::from_secs_f64(args.interval.max(0.05));
    let watch = |token: &str| -> Result<(), Failure> {
        let mut last = String::new();
        let r = c.wait(&args.model, token, interval, |s| {
            if !cli.raw && s.status != last {
                eprintln!("{}", s.status);
                last = s.status.clone();
            }
        })?;
        print_status(&r.value, &r.raw, cli.raw);
        if r.value.is_failed() {
            return Err(Failure::JobFailed);
        }
        Ok(())
    };

    if let Some(token) = &args.token {
        if args.watch {
            return watch(token);
        }
        let r = c.poll(&args.model, token)?;
        print_status(&r.value, &r.raw, cli.raw);
        return if r.value.is_failed() {
            Err(Failure::JobFailed)
        } else {
            Ok(())
        };
    }

    let input = match &args.input {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            Some(parse_input_file(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?)
        }
        None => None,
    };

    if args.async_ {
        let r = c.submit(&args.model, input, args.email.clone(), args.seed)?;
        if cli.raw {
            println!("{}", r.raw);
        } else {
            println!("{}", r.value.token);
        }
        if args.watch {
            return watch(&r.value.token);
        }
        return Ok(());
    }

    let r = c.run(&args.model, input, args.seed)?;
    if cli.raw {
        println!("{}", r.raw);
    } else {
        println!("{}", pretty(&r.value));
    }
    Ok(())
}

fn describe(rec: &ApiKeyRecord) -> String {
    let acl = match &rec.acl {
        Acl::All => "ALL".to_owned(),
        Acl::Models(m) => m.iter().cloned().collect::<Vec<_>>().join(","),
    };
    format!(
        "{}\towner={}\tenabled={}\tacl={}\tquota={}cpu-s/{}s\tmax_concurrent={}",
        rec.key_id,
        rec.owner,
        rec.enabled,
        acl,
        rec.quota.cpu_seconds_per_window,
        rec.quota.window,
        rec.quota.max_concurrent
    )
}

fn admin(keys: &std::path::Path, action: &Admin) -> Result<(), Failure> {
    let store = KeyStore::open(keys).map_err(|e| Failure::Usage(e.to_string()))?;
    let fail = |e: prism_core::access::AccessError| Failure::Usage(e.to_string());
    match action {
        Admin::CreateKey { owner, acl, quota } => {
            let (rec, plaintext) = store
                .create_key(owner, Acl::parse(acl), quota.apply(QuotaPolicy::default()))
                .map_err(fail)?;
            println!("key_id: {}", rec.key_id);
            println!("key: {plaintext}");
            eprintln!("Store this key now; it cannot be shown again.");
        }
        Admin::RevokeKey { key_id } => {
            println!("{}", describe(&store.revoke_key(key_id).map_err(fail)?));
        }
        Admin::SetAcl { key_id, acl } => {
            println!("{}", describe(&store.set_acl(key_id, Acl::parse(acl)).map_err(fail)?));
        }
        Admin::SetQuota { key_id, quota } => {
            let current = store
                .get(key_id)
                .ok_or_else(|| Failure::Usage(format!("unknown key id `{key_id}`")))?;
            let rec = store
                .set_quota(key_id, quota.apply(current.quota))
                .map_err(fail)?;
            println!("{}", describe(&rec));
        }
        Admin::ListKeys => {
            for rec in store.records().iter() {
                println!("{}", describe(rec));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::DefaultInput { model, out } => (|| {
            let r = client(&cli)?.default_input(model)?;
            if let Some(path) = out {
                std::fs::write(path, pretty(&r.value) + "\n")
                    .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            }
            if cli.raw {
                println!("{}", r.raw);
            } else if out.is_none() {
                println!("{}", pretty(&r.value));
            }
            Ok(())
        })(),
        Command::Run(args) => run(&cli, args),
        Command::Models => (|| {
            let r = client(&cli)?.models()?;
            if cli.raw {
                println!("{}", r.raw);
            } else {
                for m in &r.value {
                    let mode = if m.supports_async { "sync+async" } else { "sync" };
                    println!("{}\t{}\t{}\t{}", m.name, m.version, mode, m.description);
                }
            }
            Ok(())
        })(),
        Command::Admin { keys, action } => admin(keys, action),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Client(e)) => {
            if cli.raw {
                if let Some(body) = e.body() {
                    println!("{body}");
                }
            }
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::JobFailed) => ExitCode::from(4),
    }
}
