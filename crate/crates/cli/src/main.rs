//! `tabletop`: run scenarios, summarize traces, dump observations, and serve
//! or record the rule-based oracle.
//!
//! Exit codes: 0 when every episode ran to completion (task failures are
//! data), 1 when a run aborted on a fixture or cassette miss, 2 for invalid
//! input, 3 when a model backend was unavailable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use tabletop_core::backends::{BackendError, BackendKind, OracleBackend, RecordBackend};
use tabletop_core::geometry::raster::{save_depth, save_mask, save_rgb};
use tabletop_core::orchestrator::RunReport;
use tabletop_core::runner::{Batch, RunConfig, RunError};
use tabletop_core::simulator::{Environment, Scenario, Simulator};
use tabletop_core::testing::MockCompletionsServer;
use tabletop_core::trace::{read_trace, summarize, JsonlSink};

const EXIT_ABORTED: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_UNAVAILABLE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "tabletop",
    version,
    about = "Closed-loop tabletop task planning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run episodes of a scenario and write a trace.
    Run(RunArgs),
    /// Summarize one or more traces into a success-rate table.
    Summarize {
        traces: Vec<PathBuf>,
        /// Also write the machine-readable summary here.
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Write the initial observation of a scenario (rgb, depth, masks).
    Render {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the oracle behind a local chat-completions endpoint.
    MockServer {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 8089)]
        port: u16,
    },
    /// Record oracle answers for a run into a scripted fixture.
    Fixture {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Shipped scenario name or path to a scenario file.
    #[arg(long)]
    scenario: String,
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind)]
    backend: Option<BackendKind>,
    #[arg(long)]
    episodes: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_reflector: bool,
    #[arg(long)]
    single_agent: bool,
    #[arg(long, default_value = "trace.jsonl")]
    trace_out: PathBuf,
    #[arg(long)]
    p_drop: Option<f64>,
    /// Cassette for replay or record backends.
    #[arg(long)]
    cassette: Option<PathBuf>,
    /// Fixture for the scripted backend.
    #[arg(long)]
    fixture: Option<PathBuf>,
    /// Chat-completions endpoint for http or record backends.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
}

fn parse_kind(s: &str) -> Result<BackendKind, String> {
    s.parse()
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_INVALID,
        error: e.into(),
    }
}

fn from_run_error(e: RunError) -> Failure {
    let code = match &e {
        RunError::Backend(BackendError::Unavailable(_)) => EXIT_UNAVAILABLE,
        _ => EXIT_INVALID,
    };
    Failure {
        code,
        error: e.into(),
    }
}

fn load_scenario(arg: &str) -> Result<Scenario, Failure> {
    let path = Path::new(arg);
    if path.exists() {
        return Scenario::load(path).map_err(invalid);
    }
    Scenario::shipped(arg).ok_or_else(|| {
        let names: Vec<&str> = Scenario::shipped_names().collect();
        invalid(anyhow::anyhow!(
            "no scenario file or shipped scenario named {arg:?} (shipped: {})",
            names.join(", ")
        ))
    })
}

fn run_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).map_err(invalid)?,
        None => RunConfig::default(),
    };
    if let Some(k) = args.backend {
        cfg.backend.kind = k;
    }
    if let Some(n) = args.episodes {
        cfg.episodes = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.no_reflector {
        cfg.recovery.reflector_enabled = false;
    }
    if args.single_agent {
        cfg.recovery.single_agent_mode = true;
    }
    if args.p_drop.is_some() {
        cfg.p_drop = args.p_drop;
    }
    if args.cassette.is_some() {
        cfg.backend.cassette_path = args.cassette.clone();
    }
    if args.fixture.is_some() {
        cfg.backend.fixture_path = args.fixture.clone();
    }
    if args.endpoint.is_some() {
        cfg.backend.endpoint_url = args.endpoint.clone();
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    cfg.validate().map_err(invalid)?;
    Ok(cfg)
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let scenario = load_scenario(&args.scenario)?;
    let cfg = run_config(args)?;
    let batch = Batch::from_config(&scenario, &cfg).map_err(from_run_error)?;
    let file = File::create(&args.trace_out)
        .with_context(|| format!("creating {}", args.trace_out.display()))
        .map_err(invalid)?;
    let mut sink = JsonlSink::new(BufWriter::new(file));
    let reports = batch.run(&mut sink).map_err(from_run_error)?;
    sink.into_inner()
        .flush()
        .context("writing trace")
        .map_err(invalid)?;
    report_summary(&scenario.name, &cfg, &reports);
    if let Some(r) = reports.iter().find(|r| r.aborted.is_some()) {
        return Err(Failure {
            code: EXIT_ABORTED,
            error: anyhow::anyhow!("run aborted: {}", r.aborted.as_deref().unwrap_or_default()),
        });
    }
    if reports.iter().any(|r| r.backend_unavailable) {
        return Err(Failure {
            code: EXIT_UNAVAILABLE,
            error: anyhow::anyhow!("model backend unavailable"),
        });
    }
    Ok(())
}

fn report_summary(name: &str, cfg: &RunConfig, reports: &[RunReport]) {
    let ok = reports.iter().filter(|r| r.is_success()).count();
    println!(
        "{name} [{}]: {ok}/{} episodes succeeded ({:.1}%)",
        cfg.recovery.mode(),
        reports.len(),
        if reports.is_empty() {
            0.0
        } else {
            100.0 * ok as f64 / reports.len() as f64
        }
    );
}

fn cmd_summarize(traces: &[PathBuf], json_out: Option<&Path>) -> Result<(), Failure> {
    let mut events = Vec::new();
    let mut bad = 0;
    for p in traces {
        let f = File::open(p)
            .with_context(|| format!("opening {}", p.display()))
            .map_err(invalid)?;
        let (ev, b) = read_trace(BufReader::new(f));
        events.extend(ev);
        bad += b;
    }
    let summary = summarize(&events, bad);
    print!("{}", summary.to_table());
    if let Some(out) = json_out {
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        std::fs::write(out, text)
            .with_context(|| format!("writing {}", out.display()))
            .map_err(invalid)?;
    }
    Ok(())
}

fn cmd_render(scenario: &str, out: &Path) -> Result<(), Failure> {
    let scenario = load_scenario(scenario)?;
    let sim = Simulator::new(scenario, 0).map_err(invalid)?;
    let obs = sim.observe();
    std::fs::create_dir_all(out)
        .context("creating output directory")
        .map_err(invalid)?;
    let io = |e: tabletop_core::geometry::GeometryError| invalid(e);
    save_rgb(&out.join("rgb.png"), &obs.rgb).map_err(io)?;
    save_depth(&out.join("depth.png"), &obs.depth, Some(sim.camera())).map_err(io)?;
    for (id, mask) in &obs.masks {
        save_mask(&out.join(format!("mask_{id}.png")), mask).map_err(io)?;
    }
    println!("wrote {} masks to {}", obs.masks.len(), out.display());
    Ok(())
}

fn cmd_mock_server(scenario: &str, port: u16) -> Result<(), Failure> {
    let scenario = load_scenario(scenario)?;
    let server = MockCompletionsServer::bind(&format!("127.0.0.1:{port}"), scenario)
        .context("binding mock server")
        .map_err(invalid)?;
    println!("serving {}", server.url());
    server.wait();
    Ok(())
}

fn cmd_fixture(
    scenario: &str,
    out: &Path,
    config: Option<&Path>,
    episodes: Option<u64>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let scenario = load_scenario(scenario)?;
    let mut cfg = match config {
        Some(p) => RunConfig::load(p).map_err(invalid)?,
        None => RunConfig::default(),
    };
    cfg.episodes = episodes.unwrap_or(cfg.episodes);
    cfg.seed = seed.unwrap_or(cfg.seed);
    let applied = cfg.apply(&scenario).map_err(from_run_error)?;
    let recorder = RecordBackend::create(OracleBackend::new(applied), out).map_err(invalid)?;
    let batch = Batch::new(&scenario, &cfg, Arc::new(recorder)).map_err(from_run_error)?;
    let reports = batch
        .run(&mut tabletop_core::trace::NullSink)
        .map_err(from_run_error)?;
    report_summary(&scenario.name, &cfg, &reports);
    println!("fixture written to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Summarize { traces, json_out } => cmd_summarize(traces, json_out.as_deref()),
        Command::Render { scenario, out } => cmd_render(scenario, out),
        Command::MockServer { scenario, port } => cmd_mock_server(scenario, *port),
        Command::Fixture {
            scenario,
            out,
            config,
            episodes,
            seed,
        } => cmd_fixture(scenario, out, config.as_deref(), *episodes, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
