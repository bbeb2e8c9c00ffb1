//! `acme`: run simulations, serve real-mode nodes, query ISING roots, drive
//! triggers and aggregate results.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};

use acme_core::entrie::{
    parse_config, trigger_loop, write_transcript, HttpExecutor, HttpSensorSource, TriggerEngine, WallClock,
};
use acme_core::real::{node_sensors, ClusterConfig, RealNode, SensorOptions};
use acme_core::sensact::http_stream;
use acme_core::simnet::{report, run_scenario, Scenario};

#[derive(Parser)]
#[command(name = "acme", version, about = "Aggregation overlay monitoring and control")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a simulation scenario and write its CSV tables.
    Sim {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Run real-mode nodes from a cluster file until killed.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Node name or host to run; `all` runs every node in this process.
        #[arg(long)]
        listen: String,
        /// Directory for actuator ledgers.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Send one query to an ISING root and print the CSV result.
    Query {
        /// Comma-separated `host:port` roots, tried in order.
        #[arg(long, value_delimiter = ',', required = true)]
        roots: Vec<String>,
        /// Query in URL form, e.g. `port=9000&sensor=load&host=ALL&op=AVG`.
        query: String,
        #[arg(long, default_value_t = 30_000)]
        timeout_ms: u64,
    },
    /// Evaluate a trigger configuration against live nodes.
    Trigger {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the roots named in the configuration.
        #[arg(long, value_delimiter = ',')]
        roots: Vec<String>,
        /// `host:port` of the actuator server for start/kill actions.
        #[arg(long)]
        local: Option<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Stop after this many milliseconds; runs until settled otherwise.
        #[arg(long)]
        horizon_ms: Option<u64>,
        /// Directory for transcript.csv; stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate raw simulation tables into plot-ready CSVs.
    Report {
        /// Results directory written by `acme sim`.
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

fn config<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Config(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn sim_failure(e: acme_core::simnet::SimError) -> Failure {
    match e {
        acme_core::simnet::SimError::Config { .. } => Failure::Config(e.to_string()),
        other => Failure::Runtime(other.to_string()),
    }
}

fn real_failure(e: acme_core::real::RealError) -> Failure {
    match e {
        acme_core::real::RealError::Config { .. } => Failure::Config(e.to_string()),
        other => Failure::Runtime(other.to_string()),
    }
}

fn cmd_sim(scenario: &Path, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let mut s = Scenario::load(scenario).map_err(sim_failure)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let base = scenario.parent().unwrap_or(Path::new("."));
    for p in run_scenario(&s, base, out).map_err(sim_failure)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_serve(config_path: &Path, listen: &str, out: Option<PathBuf>) -> Result<(), Failure> {
    let cluster = Arc::new(ClusterConfig::load(config_path).map_err(real_failure)?);
    let indices: Vec<usize> = if listen == "all" {
        (0..cluster.nodes.len()).collect()
    } else {
        vec![cluster.find(listen).ok_or_else(|| Failure::Config(format!("--listen: no node named {listen}")))?]
    };
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir).map_err(runtime)?;
    }
    let opts = SensorOptions { ledger_dir: out };
    let mut running = Vec::new();
    for &i in &indices {
        let sensors = node_sensors(&cluster, i, &opts).map_err(real_failure)?;
        let node = RealNode::start(cluster.clone(), i).map_err(real_failure)?;
        log::info!("node {} up: ising on {}", cluster.nodes[i].name, node.ising_addr());
        println!("{} {}", cluster.nodes[i].name, node.ising_addr());
        running.push((node, sensors));
    }
    io::stdout().flush().map_err(runtime)?;
    loop {
        std::thread::park();
    }
}

fn cmd_query(roots: &[String], query: &str, timeout_ms: u64) -> Result<(), Failure> {
    let q = query.trim_start_matches('/');
    let q = q.strip_prefix("ising?").unwrap_or(q);
    let parsed = acme_core::ising::parse_query(&format!("/ising?{q}")).map_err(config)?;
    let url_path = parsed.to_url();
    let mut errors = Vec::new();
    for root in roots {
        let url = format!("http://{root}{url_path}");
        let body = if parsed.is_snapshot() {
            acme_core::sensact::http_get(&url, Duration::from_millis(timeout_ms)).map(|b| Box::new(io::Cursor::new(b.into_bytes())) as Box<dyn Read + Send>)
        } else {
            http_stream(&url, Duration::from_millis(timeout_ms))
        };
        match body {
            Ok(mut r) => {
                let mut out = io::stdout().lock();
                let mut buf = [0u8; 4096];
                loop {
                    let n = r.read(&mut buf).map_err(runtime)?;
                    if n == 0 {
                        return Ok(());
                    }
                    out.write_all(&buf[..n]).map_err(runtime)?;
                    out.flush().map_err(runtime)?;
                }
            }
            Err(e) => {
                log::warn!("root {root} failed: {e}");
                errors.push(e.to_string());
            }
        }
    }
    Err(Failure::Runtime(format!("all roots failed: {}", errors.join("; "))))
}

fn cmd_trigger(
    config_path: &Path,
    roots: &[String],
    local: Option<String>,
    seed: u64,
    horizon_ms: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let xml = std::fs::read_to_string(config_path).map_err(|e| Failure::Config(format!("{}: {e}", config_path.display())))?;
    let mut specs = parse_config(&xml).map_err(config)?;
    if !roots.is_empty() {
        for s in &mut specs {
            s.set_roots(roots);
        }
    }
    let mut engine = TriggerEngine::new(specs, seed);
    let timeout = Duration::from_secs(20);
    let mut source = HttpSensorSource::new(timeout);
    let mut exec = HttpExecutor::new(local, timeout);
    let end = trigger_loop(&mut engine, &mut WallClock::start(), &mut source, &mut exec, horizon_ms.unwrap_or(u64::MAX));
    log::info!("trigger loop stopped at {end} ms");
    match out {
        Some(dir) => {
            std::fs::create_dir_all(&dir).map_err(runtime)?;
            let f = File::create(dir.join("transcript.csv")).map_err(runtime)?;
            write_transcript(engine.transcript(), f).map_err(runtime)
        }
        None => write_transcript(engine.transcript(), io::stdout().lock()).map_err(runtime),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Sim { scenario, seed, out } => cmd_sim(&scenario, seed, &out),
        Cmd::Serve { config, listen, out } => cmd_serve(&config, &listen, out),
        Cmd::Query { roots, query, timeout_ms } => cmd_query(&roots, &query, timeout_ms),
        Cmd::Trigger { config, roots, local, seed, horizon_ms, out } => {
            cmd_trigger(&config, &roots, local, seed, horizon_ms, out)
        }
        Cmd::Report { out } => {
            for p in report(&out).map_err(sim_failure)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ACME_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Config(m) | Failure::Runtime(m) => m,
            };
            eprintln!("acme: {msg}");
            ExitCode::from(f.code())
        }
    }
}
