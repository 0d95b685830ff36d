use std::io::{IsTerminal, Write};
use std::path::PathBuf;

use clap::Parser;
use prism_core::gateway::{serve, GatewayConfig};
use tracing_subscriber::EnvFilter;

/// Model gateway server.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Configuration file (default: $PRISM_CONFIG, then ./prism.json).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `bind_address`.
    #[arg(long)]
    bind: Option<String>,
    /// Skip the startup plugin handshake.
    #[arg(long)]
    no_validate: bool,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("PRISM_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    let args = Args::parse();
    let mut config = GatewayConfig::discover(args.config.as_deref())?;
    if let Some(bind) = args.bind {
        config.bind_address = bind;
    }
    if args.no_validate {
        config.validate_plugins = false;
    }
    serve(config, |addr| {
        println!("listening on {addr}");
        let _ = std::io::stdout().flush();
    })
    .await
}
