use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use graspbench_cli::config::HarnessConfig;
use graspbench_core::dataset::load_scenes;
use graspbench_service::{router, AppState, ServiceOptions, DEFAULT_DEV_ORIGIN};

/// Serves the operator console API.
#[derive(Debug, Parser)]
#[command(name = "graspbench-serve", version)]
struct Args {
    /// Harness config (TOML or JSON) supplying scenes and defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene directory; overrides paths.scenes.
    #[arg(long)]
    scenes: Option<PathBuf>,
    #[arg(long, default_value = "annotations.jsonl")]
    annotations: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Built console assets served at the root.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    /// Allowed CORS origin; repeatable, `*` for any.
    #[arg(long = "cors-origin", default_values_t = [DEFAULT_DEV_ORIGIN.to_string()])]
    cors_origins: Vec<String>,
    /// Seconds to wait for a decision before answering 202.
    #[arg(long, default_value_t = 30)]
    instruct_timeout: u64,
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

fn setup(args: &Args) -> Result<AppState, String> {
    let harness = match &args.config {
        Some(path) => HarnessConfig::load(path).map_err(|e| e.to_string())?,
        None => HarnessConfig::default(),
    };
    let dir = args
        .scenes
        .clone()
        .or_else(|| harness.paths.scenes.clone())
        .ok_or("no scene directory: pass --scenes or set paths.scenes")?;
    let scenes = load_scenes(&dir).map_err(|e| e.to_string())?;
    log::info!("{} scenes from {}", scenes.len(), dir.display());
    let options = ServiceOptions {
        annotations: args.annotations.clone(),
        instruct_timeout: Duration::from_secs(args.instruct_timeout),
        cors_origins: args.cors_origins.clone(),
        static_dir: args.static_dir.clone(),
    };
    AppState::new(harness, scenes, options)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let level = if args.verbose > 0 { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    // built before the runtime so remote clients are not created inside it
    let state = match setup(&args) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let addr: SocketAddr = match format!("{}:{}", args.host, args.port).parse() {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: bad address: {e}");
            return ExitCode::from(1);
        }
    };
    let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
    let served = runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("listening on http://{addr}");
        axum::serve(listener, router(state)).await
    });
    match served {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
