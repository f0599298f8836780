//! `mvp`: plan, simulate, serve, crawl and report.

mod http_driver;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mvp_core::abp::FilterSet;
use mvp_core::analytics::report::{write_report, Report};
use mvp_core::analytics::{record_files, AnalyticsStore};
use mvp_core::broker::wire::{self, RemoteBroker};
use mvp_core::broker::{Broker, BrokerClient, QueueName, DEFAULT_PORT};
use mvp_core::captcha;
use mvp_core::clock::{Clock, WallClock};
use mvp_core::driver::FetchDriver;
use mvp_core::model::{BrowserProfile, CrawlConfig, Record, VantagePoint};
use mvp_core::scheduler::{self, generate_plan, parse_domains, read_plan, write_plan, ExperimentPlan};
use mvp_core::simulation::{self, SimulationOptions, DEFAULT_WORKERS_PER_VP, RECORDS_DIR, SCHEDULER_FILE};
use mvp_core::simweb::{reference_scenario, Scenario, SimDriver};
use mvp_core::suffix::SuffixTable;
use mvp_core::worker::{worker_loop, RecordWriter, WorkerEnv, WorkerIdentity, WorkerOptions};

use manifest::RunManifest;

const BUNDLED_DOMAINS: &str = include_str!("../../../data/domains_top5k.csv");
const CONNECT_RETRIES: u32 = 3;
const CONNECT_BACKOFF: Duration = Duration::from_millis(500);

#[derive(Parser)]
#[command(name = "mvp", version, about = "Synchronized multi-vantage-point web crawls")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expand a domain list into crawl configurations (JSON lines).
    Plan {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a scenario as JSON.
    Scenario {
        /// The calibrated reference scenario (the default).
        #[arg(long, alias = "paper", conflicts_with = "benign")]
        reference: bool,
        /// A failure-free scenario.
        #[arg(long)]
        benign: bool,
    },
    /// Run the whole pipeline in-process against the simulated web.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 2019)]
        seed: u64,
        /// Use an existing plan instead of the plan flags.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[command(flatten)]
        plan_args: PlanArgs,
        #[arg(long, env = "MVP_OUT_DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_WORKERS_PER_VP)]
        workers_per_vp: usize,
    },
    /// Serve the job queues and sync barrier over TCP.
    Broker {
        #[arg(long, env = "MVP_BROKER_ADDR", default_value_t = format!("127.0.0.1:{DEFAULT_PORT}"))]
        listen: String,
    },
    /// Enqueue a plan on a running broker, optionally reaping until drained.
    Dispatch {
        #[arg(long, env = "MVP_BROKER_ADDR", default_value_t = format!("127.0.0.1:{DEFAULT_PORT}"))]
        broker: String,
        #[arg(long)]
        plan: PathBuf,
        /// Keep reaping expired leases until every job is terminal, writing
        /// dropped-crawl records under OUT.
        #[arg(long)]
        wait: bool,
        #[arg(long, env = "MVP_OUT_DIR", required_if_eq("wait", "true"))]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 60_000)]
        reap_interval_ms: u64,
    },
    /// Crawl worker pools.
    Worker {
        #[command(subcommand)]
        cmd: WorkerCommand,
    },
    /// Ingest record files and write tables, figure data and a summary.
    Postprocess(ReportArgs),
    /// Same as `postprocess`.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum WorkerCommand {
    /// Take jobs from the broker until nothing is left.
    Run(WorkerArgs),
}

#[derive(Args, Clone)]
struct PlanArgs {
    /// `rank,domain` CSV; defaults to the bundled top-5k list.
    #[arg(long)]
    domains: Option<PathBuf>,
    #[arg(long)]
    top: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "hl,hd,hw")]
    profiles: Vec<BrowserProfile>,
    #[arg(long, value_delimiter = ',', default_value = "u,r,c,t")]
    vps: Vec<VantagePoint>,
    #[arg(long, default_value_t = 5)]
    reps: u32,
    #[arg(long, default_value_t = 3)]
    width: u32,
    #[arg(long, default_value_t = 2)]
    depth: u32,
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    /// Scenario JSON; the reference scenario if omitted.
    #[arg(long, conflicts_with = "reference")]
    scenario: Option<PathBuf>,
    #[arg(long, alias = "paper")]
    reference: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DriverKind {
    Sim,
    Real,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long, env = "MVP_BROKER_ADDR", default_value_t = format!("127.0.0.1:{DEFAULT_PORT}"))]
    broker: String,
    #[arg(long)]
    vp: VantagePoint,
    #[arg(long, value_enum, default_value = "sim")]
    driver: DriverKind,
    #[arg(long, env = "MVP_OUT_DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WORKERS_PER_VP)]
    parallel: usize,
    /// Opaque tunnel configuration handed to the driver (a proxy URL for
    /// the real driver).
    #[arg(long)]
    tunnel: Option<String>,
    /// Worker id prefix; must be unique across hosts.
    #[arg(long)]
    id: Option<String>,
    /// VPs per crawl set.
    #[arg(long, default_value_t = VantagePoint::ALL.len() as u32)]
    party_size: u32,
    // sim driver only: the world is rebuilt from scenario, seed and plan
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = 2019)]
    seed: u64,
    #[arg(long, required_if_eq("driver", "sim"))]
    plan: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding record files (searched recursively).
    #[arg(long = "in", env = "MVP_OUT_DIR")]
    input: PathBuf,
    /// Filter lists; each is named after its file stem.
    #[arg(long, value_delimiter = ',')]
    filters: Vec<PathBuf>,
    /// Detection rules to validate against the ones the workers used.
    #[arg(long)]
    captcha_rules: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn build_plan(a: &PlanArgs) -> Result<Vec<CrawlConfig>> {
    let mut domains = match &a.domains {
        Some(p) => scheduler::load_domains(p, None)?,
        None => parse_domains(BUNDLED_DOMAINS, "bundled domain list")?,
    };
    if let Some(n) = a.top {
        domains.truncate(n);
    }
    let plan = ExperimentPlan {
        domains,
        profiles: a.profiles.clone(),
        vps: a.vps.clone(),
        repetitions: a.reps,
        width: a.width,
        depth: a.depth,
    };
    Ok(generate_plan(&plan)?)
}

fn load_scenario(a: &ScenarioArgs) -> Result<(Scenario, String)> {
    match &a.scenario {
        Some(p) => Ok((Scenario::load(p)?, p.display().to_string())),
        None => Ok((reference_scenario(), "reference".into())),
    }
}

fn cmd_plan(plan: &PlanArgs, out: &Path) -> Result<ExitCode> {
    let configs = build_plan(plan)?;
    let tags: std::collections::BTreeSet<&str> = configs.iter().map(|c| c.sync_tag.as_str()).collect();
    let n = write_plan(out, configs.iter().cloned())?;
    eprintln!("{n} crawl configurations, {} crawl sets -> {}", tags.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(
    scenario: &ScenarioArgs,
    seed: u64,
    plan: Option<&Path>,
    plan_args: &PlanArgs,
    out: &Path,
    workers_per_vp: usize,
) -> Result<ExitCode> {
    let (scenario, scenario_src) = load_scenario(scenario)?;
    let configs = match plan {
        Some(p) => read_plan(p)?,
        None => build_plan(plan_args)?,
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let plan_path = match plan {
        Some(p) => p.to_path_buf(),
        None => {
            let p = out.join("plan.jsonl");
            write_plan(&p, configs.iter().cloned())?;
            p
        }
    };
    let mut manifest = RunManifest::start(&scenario_src, seed, &plan_path, "in-process", out);
    manifest.write(out)?;
    let opts = SimulationOptions { seed, workers_per_vp, out_dir: out.to_path_buf() };
    let summary = simulation::run_simulation(&scenario, &configs, &opts)?;
    manifest.finish(&summary);
    manifest.write(out)?;
    eprintln!(
        "{} jobs: {} completed, {} dropped, {} requeued; simulated {} s",
        summary.jobs,
        summary.crawls_completed,
        summary.crawls_dropped,
        summary.requeued,
        (summary.sim_end_ms - summary.sim_start_ms) / 1000
    );
    if !summary.all_terminal() {
        eprintln!("error: not every job reached a terminal state");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

async fn cmd_broker(listen: &str) -> Result<ExitCode> {
    let addr = wire::parse_addr(listen)?;
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {listen}"))?;
    eprintln!("broker listening on {}", listener.local_addr()?);
    let broker = Broker::new(Arc::new(WallClock));
    tokio::select! {
        r = wire::serve(listener, broker) => r?,
        _ = tokio::signal::ctrl_c() => eprintln!("shutting down"),
    }
    Ok(ExitCode::SUCCESS)
}

async fn connect(addr: &str) -> Result<RemoteBroker> {
    RemoteBroker::connect(addr, CONNECT_RETRIES, CONNECT_BACKOFF)
        .await
        .with_context(|| format!("broker at {addr} unreachable after {CONNECT_RETRIES} retries"))
}

async fn cmd_dispatch(addr: &str, plan: &Path, wait: bool, out: Option<&Path>, interval: u64) -> Result<ExitCode> {
    let configs = read_plan(plan)?;
    let broker = connect(addr).await?;
    let s = scheduler::dispatch(configs, &broker).await?;
    eprintln!("enqueued {} residential, {} common; {} rejected", s.residential, s.common, s.rejected.len());
    for (id, why) in &s.rejected {
        eprintln!("  rejected {id}: {why}");
    }
    if !wait {
        return Ok(if s.rejected.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) });
    }
    let dir = out.expect("clap requires --out with --wait").join(RECORDS_DIR);
    std::fs::create_dir_all(&dir)?;
    let (mut sink, _) = RecordWriter::open(dir.join(SCHEDULER_FILE))?;
    loop {
        tokio::time::sleep(Duration::from_millis(interval)).await;
        for (r, rec) in scheduler::reap(&broker).await? {
            if let Some(rec) = rec {
                eprintln!("dropped {}", r.job.job_id);
                sink.write_record(&Record::Crawl(rec))?;
            } else {
                eprintln!("requeued {}", r.job.job_id);
            }
        }
        sink.flush()?;
        let st = broker.status().await?;
        if st.outstanding() == 0 {
            eprintln!("drained: {} completed, {} dropped", st.completed, st.dropped);
            return Ok(ExitCode::SUCCESS);
        }
    }
}

async fn cmd_worker(a: &WorkerArgs) -> Result<ExitCode> {
    let clock: Arc<dyn Clock> = Arc::new(WallClock);
    let driver: Arc<dyn FetchDriver> = match a.driver {
        DriverKind::Real => Arc::new(http_driver::HttpDriver::new(Arc::clone(&clock), a.tunnel.clone())),
        DriverKind::Sim => {
            let (scenario, _) = load_scenario(&a.scenario)?;
            let configs = read_plan(a.plan.as_ref().expect("clap requires --plan for the sim driver"))?;
            let world = simulation::build_world(&scenario, a.seed, &configs);
            Arc::new(SimDriver::new(Arc::new(world), Arc::clone(&clock)))
        }
    };
    let broker: Arc<dyn BrokerClient> = Arc::new(connect(&a.broker).await?);
    let env = WorkerEnv {
        driver,
        broker,
        clock,
        suffixes: Arc::new(SuffixTable::bundled()),
        rules: Arc::new(captcha::bundled_rules()),
        options: WorkerOptions { party_size: a.party_size, ..WorkerOptions::default() },
    };
    let dir = a.out.join(RECORDS_DIR);
    std::fs::create_dir_all(&dir)?;
    let prefix = a.id.clone().unwrap_or_else(|| format!("{}-{}", a.vp.name(), std::process::id()));
    let mut tasks = Vec::new();
    for k in 0..a.parallel.max(1) {
        let id = format!("{prefix}-{k:02}");
        let (mut writer, rec) = RecordWriter::open(dir.join(format!("{id}.jsonl")))?;
        if rec.discarded_bytes > 0 {
            tracing::warn!(worker = %id, bytes = rec.discarded_bytes, "discarded unfinished crawl from previous run");
        }
        let me = WorkerIdentity { worker_id: id, queue: QueueName::for_vp(a.vp), vp: Some(a.vp) };
        let env = env.clone();
        tasks.push(tokio::spawn(async move {
            let r = worker_loop(&env, &me, &mut writer).await;
            let flushed = writer.flush();
            (me.worker_id, r, flushed)
        }));
    }
    let mut failed = false;
    for t in tasks {
        let (id, r, flushed) = t.await?;
        match (r, flushed) {
            (Ok(s), Ok(())) => eprintln!("{id}: {} crawls, {} lost leases", s.crawls, s.lost_leases),
            (Err(e), _) => {
                eprintln!("{id}: {e}");
                failed = true;
            }
            (_, Err(e)) => {
                eprintln!("{id}: flushing records: {e}");
                failed = true;
            }
        }
    }
    Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn cmd_report(a: &ReportArgs) -> Result<ExitCode> {
    if let Some(p) = &a.captcha_rules {
        let rules = captcha::load_detection_rules(p).with_context(|| format!("captcha rules {}", p.display()))?;
        let key = |rs: &[captcha::DetectionRule]| -> Vec<(String, Vec<String>)> {
            let pats = |v: &[regex::Regex]| v.iter().map(|r| r.as_str().to_string()).collect::<Vec<_>>();
            rs.iter().map(|r| (r.provider.clone(), [pats(&r.html), pats(&r.url), pats(&r.script)].concat())).collect()
        };
        if key(&rules) != key(&captcha::bundled_rules()) {
            tracing::warn!(path = %p.display(), "captcha rules differ from the ones workers apply at visit time");
        }
    }
    let mut lists = Vec::new();
    for p in &a.filters {
        let fs = FilterSet::load(p)?;
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string());
        lists.push((name, fs));
    }
    if !a.input.is_dir() {
        bail!("record directory {} does not exist", a.input.display());
    }
    // a run directory keeps its records (and nothing else) under records/
    let dir = match a.input.join(RECORDS_DIR) {
        d if d.is_dir() => d,
        _ => a.input.clone(),
    };
    let files = record_files(&dir).with_context(|| format!("listing {}", dir.display()))?;
    let store = AnalyticsStore::ingest(&files)?;
    let report = Report::compute(&store, &lists);
    let written = write_report(&report, &store.log, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!(
        "{} files, {} crawls, {} visits, {} requests; {} malformed, {} duplicate, {} orphan",
        store.log.files,
        store.crawls.len(),
        store.visits.len(),
        store.requests.len(),
        store.log.malformed.len(),
        store.log.duplicates.len(),
        store.log.orphans
    );
    for f in written {
        print_stdout(&format!("{}\n", a.out.join(f).display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

/// Write to stdout, treating a closed pipe (`mvp ... | head`) as success.
fn print_stdout(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Command::Plan { plan, out } => cmd_plan(&plan, &out),
        Command::Scenario { reference: _, benign } => {
            let s = if benign { Scenario::benign() } else { reference_scenario() };
            print_stdout(&format!("{}\n", s.to_json()))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate { scenario, seed, plan, plan_args, out, workers_per_vp } => {
            cmd_simulate(&scenario, seed, plan.as_deref(), &plan_args, &out, workers_per_vp)
        }
        Command::Broker { listen } => runtime()?.block_on(cmd_broker(&listen)),
        Command::Dispatch { broker, plan, wait, out, reap_interval_ms } => {
            runtime()?.block_on(cmd_dispatch(&broker, &plan, wait, out.as_deref(), reap_interval_ms))
        }
        Command::Worker { cmd: WorkerCommand::Run(a) } => runtime()?.block_on(cmd_worker(&a)),
        Command::Postprocess(a) | Command::Report(a) => cmd_report(&a),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            // many errors already embed their source's text; print each
            // cause only if it adds something
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
