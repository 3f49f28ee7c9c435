use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod exit;
mod lifecycle;
mod offline;

use exit::{Exit, Failure};
use taxon_service::{ServiceConfig, ServiceKind};

#[derive(Parser)]
#[command(
    name = "taxon",
    version,
    about = "Log classification services and tooling"
)]
struct Cli {
    /// Installation root.
    #[arg(long, global = true, env = "TAXON_HOME")]
    root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Config file; defaults to the installed config.
    #[arg(long, env = "TAXON_CONFIG")]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set classify.window_lines=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Service {
    Train,
    Classify,
}

impl From<Service> for ServiceKind {
    fn from(s: Service) -> Self {
        match s {
            Service::Train => ServiceKind::Train,
            Service::Classify => ServiceKind::Classify,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Default)]
enum Target {
    Train,
    Classify,
    #[default]
    All,
}

impl Target {
    fn services(self) -> Vec<ServiceKind> {
        match self {
            Target::Train => vec![ServiceKind::Train],
            Target::Classify => vec![ServiceKind::Classify],
            Target::All => vec![ServiceKind::Train, ServiceKind::Classify],
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a service in the foreground.
    Serve {
        service: Service,
        #[command(flatten)]
        config: ConfigArgs,
        /// Write the bound port here once listening.
        #[arg(long)]
        port_file: Option<PathBuf>,
    },
    /// Install the service bundle and a default config.
    Install {
        /// Local binary path or http(s) URL; defaults to this executable.
        #[arg(long)]
        source: Option<String>,
    },
    /// Remove the installation. Data is kept unless --purge.
    Remove {
        #[arg(long)]
        purge: bool,
    },
    /// Start services and wait until they report healthy.
    Start {
        #[arg(value_enum, default_value_t)]
        target: Target,
        #[command(flatten)]
        config: ConfigArgs,
        /// Seconds to wait for /health.
        #[arg(long, default_value_t = 30)]
        health_timeout: u64,
    },
    /// Report installation and per-service state.
    Status {
        #[arg(value_enum, default_value_t)]
        target: Target,
    },
    /// Stop services gracefully, draining in-flight requests.
    Stop {
        #[arg(value_enum, default_value_t)]
        target: Target,
    },
    /// Inspect the effective configuration.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
    /// Train offline from a JSON dataset file and write an artifact.
    Train {
        /// JSON array of {id, component, label, log}.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the grid-search leaderboard as JSON.
        #[arg(long)]
        leaderboard: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Classify a log file offline with an artifact.
    Classify {
        #[arg(long)]
        model: PathBuf,
        /// Lines per window; 0 classifies the whole log.
        #[arg(long, default_value_t = 0)]
        window_lines: usize,
        /// Log file, or `-` for stdin.
        log: PathBuf,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print the effective configuration as TOML.
    Print {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn default_root() -> PathBuf {
    std::env::var_os("HOME")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
        .join(".taxon")
}

/// Resolves defaults < file < `--set` flags. Without an explicit file the
/// installed config is used when present.
fn resolve_config(args: &ConfigArgs, root: &std::path::Path) -> Result<ServiceConfig, Failure> {
    let overrides = args
        .set
        .iter()
        .map(|s| taxon_service::config::parse_override(s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::new(Exit::Config, e.to_string()))?;
    let installed = lifecycle::Layout::new(root).config_file();
    let path = args
        .config
        .clone()
        .or_else(|| installed.is_file().then_some(installed));
    ServiceConfig::load(path.as_deref(), &overrides)
        .map_err(|e| Failure::new(Exit::Config, e.to_string()))
}

fn init_tracing() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn run(cli: Cli) -> Result<(), Failure> {
    let root = cli.root.unwrap_or_else(default_root);
    match cli.command {
        Command::Serve {
            service,
            config,
            port_file,
        } => {
            init_tracing();
            let cfg = resolve_config(&config, &root)?;
            tracing::info!(config = %cfg.to_toml(), "effective configuration");
            taxon_service::run(service.into(), cfg, port_file.as_deref())
                .map_err(|e| Failure::new(Exit::Generic, e))
        }
        Command::Install { source } => lifecycle::install(&root, source.as_deref()),
        Command::Remove { purge } => lifecycle::remove(&root, purge),
        Command::Start {
            target,
            config,
            health_timeout,
        } => {
            let cfg = resolve_config(&config, &root)?;
            lifecycle::start(
                &root,
                &target.services(),
                &cfg,
                &config.set,
                config.config.as_deref(),
                std::time::Duration::from_secs(health_timeout),
            )
        }
        Command::Status { target } => lifecycle::status(&root, &target.services()),
        Command::Stop { target } => lifecycle::stop(&root, &target.services()),
        Command::Config {
            action: ConfigAction::Print { config },
        } => {
            print!("{}", resolve_config(&config, &root)?.to_toml());
            Ok(())
        }
        Command::Train {
            data,
            out,
            leaderboard,
            config,
        } => {
            init_tracing();
            let cfg = resolve_config(&config, &root)?;
            offline::train(&cfg, &data, &out, leaderboard.as_deref())
        }
        Command::Classify {
            model,
            window_lines,
            log,
        } => offline::classify(&model, window_lines, &log),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("taxon: {}", f.message);
            }
            ExitCode::from(f.code as u8)
        }
    }
}
