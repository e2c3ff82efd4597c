//! Operator commands: `serve`, `sim`, `export`, `merge`, `version`.
//!
//! Exit codes are 0 on success, 1 when a verification fails, and 2 for
//! usage or configuration errors.

use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;
use uuid::Uuid;

use crate::analyzer::{self, AnnotationFilter};
use crate::harness::link::LinkDriver;
use crate::harness::{Engine, HarnessError, SessionSetup};
use crate::ids::{IdSource, RandomIds, SeededIds};
use crate::server::{self, AppState};
use crate::session::Role;
use crate::sim::push::PushClient;
use crate::sim::{self, SimError, SimReport, SimScript, SIM_EPOCH};
use crate::sync::{merge_runs, ClockOffset};
use crate::time::{Clock, SystemClock};

#[derive(Debug, Parser)]
#[command(name = "harness", version, about = "Wizard-of-Oz pilot study harness")]
pub struct Cli {
    /// Data directory holding sessions, runs, and archives.
    #[arg(long, global = true, env = "HARNESS_DATA_DIR", default_value = "harness-data")]
    pub data_dir: PathBuf,
    /// Log filter, e.g. `info` or `woz_harness=debug`.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoleArg {
    SingleUser,
    Wizard,
    Observer,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Role {
        match r {
            RoleArg::SingleUser => Role::SingleUser,
            RoleArg::Wizard => Role::Wizard,
            RoleArg::Observer => Role::Observer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Html,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP API and the sync listener until interrupted.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long, value_enum, default_value = "single-user")]
        role: RoleArg,
        /// Session file (a session config plus emitters and auto-triggers).
        #[arg(long)]
        session: Option<PathBuf>,
        /// Required as a bearer token (or `?token=`) on every request.
        #[arg(long, env = "HARNESS_TOKEN")]
        token: Option<String>,
        /// Sync listener port; defaults to the HTTP port plus one.
        #[arg(long)]
        sync_port: Option<u16>,
        /// Sync peer to dial, as host:port.
        #[arg(long)]
        peer: Option<String>,
        #[arg(long)]
        instance: Option<String>,
        /// Seed for identifiers, for reproducible runs.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a simulator script end to end and check the tallies.
    Sim {
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        session: Option<PathBuf>,
        /// Push to a running server instead of running in-process.
        #[arg(long)]
        server: Option<String>,
        #[arg(long, env = "HARNESS_TOKEN")]
        token: Option<String>,
    },
    /// Write a run's CSV or HTML report.
    Export {
        #[arg(long)]
        run: Uuid,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Annotation filter as JSON.
        #[arg(long)]
        filter: Option<String>,
        /// Further runs to compare in the HTML report.
        #[arg(long, value_delimiter = ',')]
        compare: Vec<Uuid>,
    },
    /// Merge a peer's CSV export into a local run and write the result.
    Merge {
        #[arg(long)]
        local: Uuid,
        #[arg(long)]
        remote: PathBuf,
        /// Peer clock minus local clock.
        #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
        offset_ms: i64,
        #[arg(long)]
        out: PathBuf,
    },
    Version,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    BadConfig(String),
    #[error("port in use: {0}")]
    PortInUse(String),
    #[error("verification failed")]
    Mismatch(Vec<String>),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Mismatch(_) => 1,
            _ => 2,
        }
    }
}

/// Serializes through `Value` so object keys come out sorted.
pub fn stable_json<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).and_then(|v| serde_json::to_string(&v)).expect("serializable")
}

fn print_json<T: Serialize>(v: &T) {
    let mut out = io::stdout().lock();
    let _ = writeln!(out, "{}", stable_json(v));
    let _ = out.flush();
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::BadConfig(format!("{}: {e}", path.display())))
}

pub fn load_setup(path: &Path) -> Result<SessionSetup, CliError> {
    serde_json::from_str(&read_file(path)?).map_err(|e| CliError::BadConfig(format!("{}: {e}", path.display())))
}

fn parse_filter(raw: Option<&str>) -> Result<AnnotationFilter, CliError> {
    let f: AnnotationFilter = match raw {
        None => AnnotationFilter::default(),
        Some(s) => serde_json::from_str(s).map_err(|e| CliError::BadConfig(format!("filter: {e}")))?,
    };
    f.validate().map_err(HarnessError::from)?;
    Ok(f)
}

fn open_engine(dir: &Path, ids: Box<dyn IdSource>) -> Result<Engine, CliError> {
    Engine::open(dir, ids).map_err(|e| match e {
        HarnessError::Io(e) => CliError::BadConfig(format!("data dir {}: {e}", dir.display())),
        e => e.into(),
    })
}

pub fn run(cli: Cli) -> ExitCode {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_new(&cli.log_level).unwrap_or_else(|_| "warn".into()))
        .with_writer(io::stderr)
        .try_init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Mismatch(diff) => {
                    eprintln!("mismatch:");
                    for line in diff {
                        eprintln!("  {line}");
                    }
                }
                e => eprintln!("error: {e}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let dir = cli.data_dir;
    match cli.command {
        Command::Version => {
            print_json(&json!({ "name": "harness", "version": env!("CARGO_PKG_VERSION") }));
            Ok(())
        }
        Command::Sim { script, session, server, token } => cmd_sim(&dir, &script, session.as_deref(), server.as_deref(), token),
        Command::Export { run, format, out, filter, compare } => {
            let doc = cmd_export(&dir, run, format, filter.as_deref(), &compare)?;
            match out {
                Some(p) => std::fs::write(p, doc)?,
                None => io::stdout().lock().write_all(doc.as_bytes())?,
            }
            Ok(())
        }
        Command::Merge { local, remote, offset_ms, out } => {
            let summary = cmd_merge(&dir, local, &remote, offset_ms, &out)?;
            print_json(&summary);
            Ok(())
        }
        Command::Serve { port, bind, role, session, token, sync_port, peer, instance, seed } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(cmd_serve(ServeConfig {
                data_dir: dir,
                port,
                bind,
                role: role.into(),
                session,
                token,
                sync_port: sync_port.unwrap_or(if port == 0 { 0 } else { port.wrapping_add(1) }),
                peer,
                instance,
                seed,
            }))
        }
    }
}

/// Runs a script and returns the report, failing with `Mismatch` when the
/// system tallies differ from the ground truth.
pub fn cmd_sim(dir: &Path, script: &Path, session: Option<&Path>, server: Option<&str>, token: Option<String>) -> Result<(), CliError> {
    let script = SimScript::from_json(&read_file(script)?).map_err(|e| CliError::BadConfig(e.to_string()))?;
    let setup = match session {
        Some(p) => load_setup(p)?,
        None => sim::default_setup(Role::Wizard, "wizard"),
    };
    let report = match server {
        None => sim_in_process(dir, &script, setup)?,
        Some(url) => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let client = PushClient::new(url, token);
                let session_id = client.create_session(&setup).await?;
                client.scripted_run(&script, session_id).await
            })
            .map_err(sim_error)?
        }
    };
    print_json(&report);
    if report.matches {
        Ok(())
    } else {
        Err(CliError::Mismatch(report.diff))
    }
}

fn sim_error(e: SimError) -> CliError {
    match e {
        SimError::Harness(h) => CliError::Harness(h),
        e => CliError::Sim(e),
    }
}

pub fn sim_in_process(dir: &Path, script: &SimScript, setup: SessionSetup) -> Result<SimReport, CliError> {
    let mut engine = open_engine(dir, Box::new(SeededIds::new(script.seed)))?;
    let session_id = engine.create_session(setup, SIM_EPOCH)?;
    sim::scripted_run(&mut engine, script, session_id).map_err(sim_error)
}

pub fn cmd_export(dir: &Path, run: Uuid, format: Format, filter: Option<&str>, compare: &[Uuid]) -> Result<String, CliError> {
    let engine = open_engine(dir, Box::new(RandomIds))?;
    let f = parse_filter(filter)?;
    Ok(match format {
        Format::Csv => engine.export_csv(run, &f)?,
        Format::Html => {
            let mut ids = vec![run];
            ids.extend_from_slice(compare);
            engine.export_report(&ids, &f)?
        }
    })
}

/// Merges without touching the stored run; the result goes to `out`.
pub fn cmd_merge(dir: &Path, local: Uuid, remote: &Path, offset_ms: i64, out: &Path) -> Result<analyzer::SummaryReport, CliError> {
    let engine = open_engine(dir, Box::new(RandomIds))?;
    let run = engine.run(local)?;
    let remote_log = analyzer::import_csv(&read_file(remote)?, local).map_err(HarnessError::from)?;
    let merged = merge_runs(run, &remote_log, &ClockOffset::fixed(offset_ms)).map_err(HarnessError::from)?;
    std::fs::write(out, analyzer::export_csv(&merged, &AnnotationFilter::default()).map_err(HarnessError::from)?)?;
    Ok(analyzer::summarize(&merged).map_err(HarnessError::from)?)
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub data_dir: PathBuf,
    pub port: u16,
    pub bind: String,
    pub role: Role,
    pub session: Option<PathBuf>,
    pub token: Option<String>,
    pub sync_port: u16,
    pub peer: Option<String>,
    pub instance: Option<String>,
    pub seed: Option<u64>,
}

async fn bind(addr: &str) -> Result<tokio::net::TcpListener, CliError> {
    tokio::net::TcpListener::bind(addr).await.map_err(|e| match e.kind() {
        io::ErrorKind::AddrInUse => CliError::PortInUse(addr.to_string()),
        _ => CliError::BadConfig(format!("cannot bind {addr}: {e}")),
    })
}

pub async fn cmd_serve(cfg: ServeConfig) -> Result<(), CliError> {
    let instance = cfg.instance.clone().unwrap_or_else(|| cfg.role.as_str().to_string());
    let setup = cfg.session.as_deref().map(load_setup).transpose()?;
    let ids: Box<dyn IdSource> = match cfg.seed {
        Some(s) => Box::new(SeededIds::new(s)),
        None => Box::new(RandomIds),
    };
    let mut engine = open_engine(&cfg.data_dir, ids)?;
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let session_id = match setup {
        Some(mut s) => {
            s.config.role = cfg.role;
            s.config.instance_id = instance.clone();
            Some(engine.create_session(s, clock.now()).map_err(|e| CliError::BadConfig(e.to_string()))?)
        }
        None => None,
    };

    let http = bind(&format!("{}:{}", cfg.bind, cfg.port)).await?;
    let sync = bind(&format!("{}:{}", cfg.bind, cfg.sync_port)).await?;
    let http_addr: SocketAddr = http.local_addr()?;
    let sync_addr: SocketAddr = sync.local_addr()?;

    let engine = Arc::new(Mutex::new(engine));
    let state = AppState::new(engine.clone(), clock.clone(), cfg.token.clone());
    server::spawn_ticker(state.clone(), Duration::from_millis(500));

    let role = cfg.role;
    let driver_instance = instance.clone();
    tokio::spawn(server::sync::listen(sync, engine.clone(), clock.clone(), move || {
        LinkDriver::new(&driver_instance, role, session_id)
    }));
    if let Some(peer) = cfg.peer.clone() {
        let driver = LinkDriver::new(&instance, role, session_id);
        let (engine, clock) = (engine.clone(), clock.clone());
        tokio::spawn(async move {
            if let Err(e) = server::sync::connect(peer, engine, clock, driver).await {
                tracing::warn!(error = %e, "outbound sync link ended");
            }
        });
    }

    print_json(&json!({
        "status": "listening",
        "http": http_addr.to_string(),
        "sync": sync_addr.to_string(),
        "role": role,
        "instance_id": instance,
        "session_id": session_id,
        "data_dir": cfg.data_dir,
        "auth": cfg.token.is_some(),
    }));

    axum::serve(http, server::router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

