//! In-process runs: broker, per-VP worker pools and the reaper on one
//! simulated clock, crawling a [`SimWorld`]. Everything runs on a
//! single-threaded discrete-event executor, so a (scenario, seed, plan)
//! triple fully determines the records written.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::Serialize;
use thiserror::Error;

use crate::broker::{Broker, BrokerClient, BrokerError, QueueName};
use crate::captcha;
use crate::clock::{Clock, SimClock};
use crate::detrand::DetRand;
use crate::executor::{ExecutorError, SimExecutor};
use crate::model::{max_pages, CrawlConfig, Millis, Record, VantagePoint, DEFAULT_DEPTH, DEFAULT_WIDTH};
use crate::scheduler;
use crate::simweb::{Scenario, SimDriver, SimWorld, SIM_EPOCH_MS};
use crate::suffix::SuffixTable;
use crate::worker::{worker_loop, RecordWriter, WorkerEnv, WorkerIdentity, WorkerOptions, WorkerSummary};

/// Concurrent crawls each VP sustains.
pub const DEFAULT_WORKERS_PER_VP: usize = 8;
/// How often the scheduler sweeps for expired leases.
pub const REAP_INTERVAL_MS: Millis = 60_000;

pub const RECORDS_DIR: &str = "records";
pub const SCHEDULER_FILE: &str = "scheduler.jsonl";

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("{0} already holds record files; use a fresh output directory")]
    OutputNotEmpty(PathBuf),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("broker: {0}")]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Executor(#[from] ExecutorError),
    #[error("worker {worker}: {reason}")]
    Worker { worker: String, reason: String },
}

#[derive(Debug, Clone)]
pub struct SimulationOptions {
    pub seed: u64,
    pub workers_per_vp: usize,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SimulationSummary {
    pub jobs: usize,
    pub rejected: usize,
    pub crawls_completed: usize,
    pub crawls_dropped: usize,
    pub requeued: usize,
    pub worker_crashes: usize,
    pub lost_leases: usize,
    pub sim_start_ms: Millis,
    pub sim_end_ms: Millis,
    pub record_files: Vec<String>,
}

impl SimulationSummary {
    /// True when every dispatched job reached a terminal state.
    pub fn all_terminal(&self) -> bool {
        self.crawls_completed + self.crawls_dropped == self.jobs
    }
}

/// Geometry the world is calibrated for: the plan's, or the defaults.
fn plan_geometry(configs: &[CrawlConfig]) -> (u32, u32) {
    configs.first().map(|c| (c.width, c.depth)).unwrap_or((DEFAULT_WIDTH, DEFAULT_DEPTH))
}

pub fn build_world(scenario: &Scenario, seed: u64, configs: &[CrawlConfig]) -> SimWorld {
    let mut seen = BTreeSet::new();
    let domains: Vec<String> = configs.iter().filter(|c| seen.insert(c.domain.clone())).map(|c| c.domain.clone()).collect();
    let (width, depth) = plan_geometry(configs);
    SimWorld::build(scenario, seed, &domains, width, depth)
}

fn prepare_output(out: &Path) -> Result<PathBuf, SimulationError> {
    let records = out.join(RECORDS_DIR);
    fs::create_dir_all(&records)?;
    if fs::read_dir(&records)?.next().is_some() {
        return Err(SimulationError::OutputNotEmpty(records));
    }
    Ok(records)
}

/// Crawl `configs` against a world built from `scenario`, writing one
/// record file per worker plus the scheduler's file for dropped crawls.
pub fn run_simulation(
    scenario: &Scenario,
    configs: &[CrawlConfig],
    opts: &SimulationOptions,
) -> Result<SimulationSummary, SimulationError> {
    let records_dir = prepare_output(&opts.out_dir)?;
    let world = Arc::new(build_world(scenario, opts.seed, configs));
    let clock = SimClock::starting_at(SIM_EPOCH_MS);
    let broker = Broker::new(Arc::new(clock.clone()));
    let mut exec = SimExecutor::new(clock.clone());

    let dispatched = futures::executor::block_on(scheduler::dispatch(configs.iter().cloned(), &broker))?;
    let vps: BTreeSet<VantagePoint> = configs.iter().map(|c| c.vp).collect();
    let (width, depth) = plan_geometry(configs);
    let pages = max_pages(width, depth);

    let seed = opts.seed;
    let p_crash = scenario.worker_crash.p_crash;
    let options = WorkerOptions {
        party_size: vps.len().max(1) as u32,
        crash: (p_crash > 0.0).then(|| {
            let policy: crate::worker::CrashPolicy = Arc::new(move |job| {
                let mut rng = DetRand::substream(seed, &format!("crash:{}:{}", job.job_id, job.attempt));
                rng.chance(p_crash).then(|| rng.range(0, pages - 1) as u32)
            });
            policy
        }),
        restart_ms: scenario.worker_crash.restart_ms,
        ..WorkerOptions::default()
    };
    let clock_dyn: Arc<dyn Clock> = Arc::new(clock.clone());
    let env = WorkerEnv {
        driver: Arc::new(SimDriver::new(Arc::clone(&world), Arc::clone(&clock_dyn))),
        broker: Arc::new(broker.clone()),
        clock: Arc::clone(&clock_dyn),
        suffixes: Arc::new(SuffixTable::bundled()),
        rules: Arc::new(captcha::bundled_rules()),
        options,
    };

    type Outcome = (String, Result<WorkerSummary, String>);
    let results: Arc<Mutex<Vec<Outcome>>> = Arc::default();
    let mut files = Vec::new();
    for &vp in &vps {
        for k in 0..opts.workers_per_vp.max(1) {
            let id = format!("{}-{k:02}", vp.name());
            let path = records_dir.join(format!("{id}.jsonl"));
            files.push(path.clone());
            let (mut writer, _) = RecordWriter::open(&path)?;
            let me = WorkerIdentity { worker_id: id, queue: QueueName::for_vp(vp), vp: Some(vp) };
            let (env, results) = (env.clone(), Arc::clone(&results));
            exec.spawn(async move {
                let res = worker_loop(&env, &me, &mut writer).await.map_err(|e| e.to_string());
                results.lock().unwrap().push((me.worker_id, res));
            });
        }
    }

    let sched_path = opts.out_dir.join(RECORDS_DIR).join(SCHEDULER_FILE);
    files.push(sched_path.clone());
    let (mut sched, _) = RecordWriter::open(&sched_path)?;
    let reap_stats: Arc<Mutex<(usize, usize, Option<String>)>> = Arc::default();
    {
        let (b, c, stats) = (broker.clone(), clock.clone(), Arc::clone(&reap_stats));
        exec.spawn(async move {
            let fail = |e: String| stats.lock().unwrap().2 = Some(e);
            loop {
                c.sleep_until(c.now_ms() + REAP_INTERVAL_MS).await;
                match scheduler::reap(&b).await {
                    Ok(reaped) => {
                        for (r, rec) in reaped {
                            let mut s = stats.lock().unwrap();
                            match rec {
                                Some(rec) => {
                                    s.1 += 1;
                                    if let Err(e) = sched.write_record(&Record::Crawl(rec)) {
                                        s.2 = Some(e.to_string());
                                    }
                                }
                                None => s.0 += 1,
                            }
                            tracing::debug!(job = %r.job.job_id, action = ?r.action, "reaped");
                        }
                    }
                    Err(e) => {
                        fail(e.to_string());
                        return;
                    }
                }
                if let Err(e) = sched.flush() {
                    fail(e.to_string());
                    return;
                }
                if b.status().await.map(|s| s.outstanding()).unwrap_or(0) == 0 {
                    return;
                }
            }
        });
    }

    exec.run()?;

    let mut summary = SimulationSummary {
        jobs: dispatched.residential + dispatched.common,
        rejected: dispatched.rejected.len(),
        sim_start_ms: SIM_EPOCH_MS,
        sim_end_ms: clock.now_ms(),
        ..SimulationSummary::default()
    };
    for (worker, res) in results.lock().unwrap().drain(..) {
        let s = res.map_err(|reason| SimulationError::Worker { worker, reason })?;
        summary.crawls_completed += s.crawls;
        summary.worker_crashes += s.abandoned;
        summary.lost_leases += s.lost_leases;
    }
    let (requeued, dropped, err) = reap_stats.lock().unwrap().clone();
    if let Some(reason) = err {
        return Err(SimulationError::Worker { worker: "scheduler".into(), reason });
    }
    summary.requeued = requeued;
    summary.crawls_dropped = dropped;
    summary.record_files = files
        .iter()
        .map(|p| p.strip_prefix(&opts.out_dir).unwrap_or(p).display().to_string())
        .collect();
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BrowserProfile;
    use crate::scheduler::{generate_plan, DomainEntry, ExperimentPlan};
    use crate::simweb::{reference_scenario, synthetic_domains};

    fn plan(n: u32, reps: u32) -> Vec<CrawlConfig> {
        let domains =
            synthetic_domains(n).into_iter().enumerate().map(|(i, d)| DomainEntry { rank: i as u32 + 1, domain: d }).collect();
        generate_plan(&ExperimentPlan {
            domains,
            profiles: BrowserProfile::ALL.to_vec(),
            vps: VantagePoint::ALL.to_vec(),
            repetitions: reps,
            width: 3,
            depth: 2,
        })
        .unwrap()
    }

    fn read_all(dir: &Path) -> Vec<(String, String)> {
        let mut files: Vec<_> = fs::read_dir(dir.join(RECORDS_DIR)).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files.iter().map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read_to_string(p).unwrap())).collect()
    }

    #[test]
    fn small_run_drains_and_is_deterministic() {
        let configs = plan(6, 2);
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let opts = SimulationOptions { seed: 5, workers_per_vp: 3, out_dir: dir.path().to_path_buf() };
            let mut s = reference_scenario();
            s.worker_crash.p_crash = 0.05;
            let summary = run_simulation(&s, &configs, &opts).unwrap();
            (summary, read_all(dir.path()))
        };
        let (a, files_a) = run();
        let (b, files_b) = run();
        assert_eq!(a, b);
        assert_eq!(files_a, files_b);
        assert_eq!(a.jobs, 6 * 2 * 3 * 4);
        assert!(a.all_terminal(), "{a:?}");
        let crawl_lines: usize =
            files_a.iter().map(|(_, t)| t.lines().filter(|l| l.starts_with(r#"{"kind":"crawl""#)).count()).sum();
        assert_eq!(crawl_lines, a.jobs);
    }

    #[test]
    fn empty_plan_is_fine() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SimulationOptions { seed: 1, workers_per_vp: 2, out_dir: dir.path().to_path_buf() };
        let s = run_simulation(&reference_scenario(), &[], &opts).unwrap();
        assert_eq!(s.jobs, 0);
        assert!(s.all_terminal());
        assert!(matches!(run_simulation(&reference_scenario(), &[], &opts), Err(SimulationError::OutputNotEmpty(_))));
    }
}
