use std::path::PathBuf;
use std::process::ExitCode;

use camino_cli::client::{Client, ClientError, Reply};
use camino_cli::render;
use camino_cli::scenario;
use clap::{Parser, Subcommand};

/// Domain manager operator CLI.
#[derive(Debug, Parser)]
#[command(name = "camino", version)]
struct Cli {
    /// Base URL of the domain manager.
    #[arg(long, global = true, env = "CAMINO_SERVER", default_value = "http://127.0.0.1:8080")]
    server: String,
    /// Bearer token.
    #[arg(long, global = true, env = "CAMINO_TOKEN")]
    token: Option<String>,
    /// Tab-separated key/value output instead of JSON.
    #[arg(long, global = true)]
    plain: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the domain manager.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Submit a deployment intent file.
    Submit { intent: PathBuf },
    /// Show one deployment, or list all when no id is given.
    Status { id: Option<String> },
    /// Terminate a deployment.
    Terminate { id: String },
    Catalog,
    /// Query metrics, e.g. 'sum(free_cpu) by (edge)'.
    Metrics {
        query: String,
        #[arg(long)]
        from: Option<u64>,
        #[arg(long)]
        to: Option<u64>,
    },
    Health,
    /// Resolve a trusted domain to its FQDN.
    Resolve { domain: String },
    /// Run a scenario file against an embedded engine.
    RunScenario { path: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match cli.command {
        Command::Serve { config } => serve(config),
        Command::RunScenario { path } => run_scenario(path),
        ref command => remote(&cli, command),
    }
}

fn serve(path: PathBuf) -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let result = camino_server::ServerConfig::load(&path).map_err(anyhow::Error::from).and_then(|config| {
        let runtime = tokio::runtime::Runtime::new()?;
        runtime.block_on(camino_server::serve(config))?;
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run_scenario(path: PathBuf) -> ExitCode {
    match scenario::run_file(&path) {
        Ok(report) => {
            print!("{report}");
            ExitCode::from(if report.passed() { 0 } else { 1 })
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn remote(cli: &Cli, command: &Command) -> ExitCode {
    let client = Client::new(&cli.server, cli.token.clone());
    let reply = match command {
        Command::Submit { intent } => match std::fs::read_to_string(intent) {
            Ok(doc) => client.submit(&doc),
            Err(e) => {
                eprintln!("error: {}: {e}", intent.display());
                return ExitCode::from(2);
            }
        },
        Command::Status { id: Some(id) } => client.status(id),
        Command::Status { id: None } => client.list(),
        Command::Terminate { id } => client.terminate(id),
        Command::Catalog => client.catalog(),
        Command::Metrics { query, from, to } => client.metrics(query, *from, *to),
        Command::Health => client.health(),
        Command::Resolve { domain } => client.resolve(domain),
        Command::Serve { .. } | Command::RunScenario { .. } => unreachable!(),
    };
    let is_record = matches!(command, Command::Submit { .. } | Command::Terminate { .. } | Command::Status { id: Some(_) });
    match reply {
        Ok(Reply { status, body }) => {
            if cli.plain && is_record {
                print!("{}", render::record_summary(&body));
            } else if cli.plain {
                print!("{}", render::plain(&body));
            } else {
                println!("{}", serde_json::to_string_pretty(&body).unwrap_or_default());
            }
            if status >= 400 {
                ExitCode::from(camino_cli::client::exit_code_for_status(status))
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            if let ClientError::Api { body, .. } = &e {
                if cli.plain {
                    eprint!("{}", render::plain(body));
                } else {
                    eprintln!("{}", serde_json::to_string_pretty(body).unwrap_or_default());
                }
            }
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
