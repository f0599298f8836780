//! Experiment plans, dispatch to the broker queues, and the reaper that
//! turns expired leases into requeues or terminal drops.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{BrokerClient, BrokerError, JobEnvelope, QueueName, ReapAction, Reaped};
use crate::model::{BrowserProfile, CrawlConfig, CrawlRecord, CrawlStatus, VantagePoint};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {reason}")]
    Format { path: String, line: usize, reason: String },
    #[error("plan needs at least one {0}")]
    Empty(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub rank: u32,
    pub domain: String,
}

/// Parse a `rank,domain` top-list export. A header row is skipped; rows
/// are returned sorted by rank.
pub fn parse_domains(text: &str, origin: &str) -> Result<Vec<DomainEntry>, PlanError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (idx, row) in rdr.records().enumerate() {
        let line = idx + 1;
        let bad = |reason: String| PlanError::Format { path: origin.to_string(), line, reason };
        let row = row.map_err(|e| bad(e.to_string()))?;
        if row.len() < 2 {
            if row.iter().all(|f| f.trim().is_empty()) {
                continue;
            }
            return Err(bad("expected `rank,domain`".into()));
        }
        let (rank, domain) = (row[0].trim(), row[1].trim());
        let Ok(rank) = rank.parse::<u32>() else {
            if idx == 0 {
                continue; // header
            }
            return Err(bad(format!("bad rank `{rank}`")));
        };
        if rank == 0 || domain.is_empty() || domain.contains('/') {
            return Err(bad(format!("bad entry `{rank},{domain}`")));
        }
        out.push(DomainEntry { rank, domain: domain.to_ascii_lowercase() });
    }
    out.sort_by_key(|d| d.rank);
    Ok(out)
}

pub fn load_domains(path: impl AsRef<Path>, top: Option<usize>) -> Result<Vec<DomainEntry>, PlanError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| PlanError::Io { path: path.display().to_string(), source })?;
    let mut domains = parse_domains(&text, &path.display().to_string())?;
    if let Some(n) = top {
        domains.truncate(n);
    }
    Ok(domains)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ExperimentPlan {
    pub domains: Vec<DomainEntry>,
    pub profiles: Vec<BrowserProfile>,
    pub vps: Vec<VantagePoint>,
    pub repetitions: u32,
    pub width: u32,
    pub depth: u32,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.domains.is_empty() {
            return Err(PlanError::Empty("domain"));
        }
        if self.profiles.is_empty() {
            return Err(PlanError::Empty("profile"));
        }
        if self.vps.is_empty() {
            return Err(PlanError::Empty("vantage point"));
        }
        if self.repetitions == 0 {
            return Err(PlanError::Empty("repetition"));
        }
        if self.width == 0 || self.depth == 0 {
            return Err(PlanError::Empty("page per level"));
        }
        Ok(())
    }

    pub fn set_count(&self) -> usize {
        self.domains.len() * self.profiles.len() * self.repetitions as usize
    }

    pub fn crawl_count(&self) -> usize {
        self.set_count() * self.vps.len()
    }

    /// Every crawl, rank-major, then repetition, profile and VP.
    pub fn configs(&self) -> impl Iterator<Item = CrawlConfig> + '_ {
        self.domains.iter().flat_map(move |d| {
            (1..=self.repetitions).flat_map(move |rep| {
                self.profiles.iter().flat_map(move |&profile| {
                    self.vps.iter().map(move |&vp| {
                        CrawlConfig::new(&d.domain, d.rank, profile, vp, rep, self.width, self.depth)
                    })
                })
            })
        })
    }
}

/// Validate the plan and materialize its configs.
pub fn generate_plan(plan: &ExperimentPlan) -> Result<Vec<CrawlConfig>, PlanError> {
    plan.validate()?;
    Ok(plan.configs().collect())
}

pub fn write_plan(path: impl AsRef<Path>, configs: impl IntoIterator<Item = CrawlConfig>) -> Result<usize, PlanError> {
    let path = path.as_ref();
    let io = |source| PlanError::Io { path: path.display().to_string(), source };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    let mut n = 0;
    for c in configs {
        serde_json::to_writer(&mut out, &c).expect("configs serialize");
        out.write_all(b"\n").map_err(io)?;
        n += 1;
    }
    out.flush().map_err(io)?;
    Ok(n)
}

pub fn read_plan(path: impl AsRef<Path>) -> Result<Vec<CrawlConfig>, PlanError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let file = File::open(path).map_err(|source| PlanError::Io { path: name.clone(), source })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| PlanError::Io { path: name.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let cfg = serde_json::from_str(&line)
            .map_err(|e| PlanError::Format { path: name.clone(), line: idx + 1, reason: e.to_string() })?;
        out.push(cfg);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct DispatchSummary {
    pub residential: usize,
    pub common: usize,
    /// Jobs the broker refused, with the reason.
    pub rejected: Vec<(String, String)>,
}

/// Enqueue every config in order: residential crawls to the residential
/// queue, everything else to the common queue. Rejections are collected,
/// not swallowed; an unreachable broker aborts the dispatch.
pub async fn dispatch(
    configs: impl IntoIterator<Item = CrawlConfig>,
    broker: &dyn BrokerClient,
) -> Result<DispatchSummary, BrokerError> {
    let mut summary = DispatchSummary::default();
    for cfg in configs {
        let queue = QueueName::for_vp(cfg.vp);
        let job = JobEnvelope::new(cfg);
        let id = job.job_id.clone();
        match broker.enqueue(queue, job).await {
            Ok(()) => match queue {
                QueueName::Residential => summary.residential += 1,
                QueueName::Common => summary.common += 1,
            },
            Err(e @ (BrokerError::Unreachable(_) | BrokerError::Protocol(_))) => return Err(e),
            Err(e) => summary.rejected.push((id, e.to_string())),
        }
    }
    Ok(summary)
}

/// Crawl record for a job that exhausted its requeue budget.
pub fn dropped_record(reaped: &Reaped) -> CrawlRecord {
    let job = &reaped.job;
    CrawlRecord {
        crawl_id: job.job_id.clone(),
        config: job.config.clone(),
        status: CrawlStatus::Dropped,
        worker_id: job.lease.as_ref().map(|l| l.worker_id.clone()),
        attempt: job.attempt,
        dequeued_at: None,
        released_at: None,
        crawl_start: None,
        crawl_end: Some(reaped.at),
        sync_degraded: false,
        visit_count: 0,
    }
}

/// Collect expired leases; dropped jobs come back with their terminal
/// crawl record.
pub async fn reap(broker: &dyn BrokerClient) -> Result<Vec<(Reaped, Option<CrawlRecord>)>, BrokerError> {
    Ok(broker
        .reap()
        .await?
        .into_iter()
        .map(|r| {
            let rec = (r.action == ReapAction::Dropped).then(|| dropped_record(&r));
            (r, rec)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::sync::Arc;

    use crate::broker::Broker;
    use crate::clock::SimClock;
    use proptest::prelude::*;

    fn domains(n: usize) -> Vec<DomainEntry> {
        (1..=n).map(|i| DomainEntry { rank: i as u32, domain: format!("d{i}.com") }).collect()
    }

    fn plan(n: usize, profiles: Vec<BrowserProfile>, vps: Vec<VantagePoint>, reps: u32) -> ExperimentPlan {
        ExperimentPlan { domains: domains(n), profiles, vps, repetitions: reps, width: 3, depth: 2 }
    }

    #[test]
    fn plan_arithmetic() {
        let p = plan(2, vec![BrowserProfile::HEADLESS], vec![VantagePoint::University, VantagePoint::Tor], 1);
        let configs = generate_plan(&p).unwrap();
        assert_eq!(configs.len(), 4);
        assert_eq!(configs.iter().map(|c| &c.sync_tag).collect::<HashSet<_>>().len(), 2);
        let one = plan(1, vec![BrowserProfile::HEADED], vec![VantagePoint::Cloud], 1);
        assert_eq!(generate_plan(&one).unwrap().len(), 1);
    }

    #[test]
    fn plan_order_is_rank_rep_profile_vp() {
        let p = plan(2, BrowserProfile::ALL.to_vec(), VantagePoint::ALL.to_vec(), 2);
        let configs = generate_plan(&p).unwrap();
        assert_eq!(configs.len(), p.crawl_count());
        let key = |c: &CrawlConfig| {
            let prof = BrowserProfile::ALL.iter().position(|x| *x == c.profile).unwrap();
            (c.alexa_rank, c.repetition, prof, c.vp)
        };
        assert!(configs.windows(2).all(|w| key(&w[0]) < key(&w[1])));
    }

    #[test]
    fn empty_lists_rejected() {
        assert!(matches!(generate_plan(&plan(0, vec![BrowserProfile::HEADED], vec![VantagePoint::Cloud], 1)), Err(PlanError::Empty(_))));
        assert!(generate_plan(&plan(1, vec![], vec![VantagePoint::Cloud], 1)).is_err());
        assert!(generate_plan(&plan(1, vec![BrowserProfile::HEADED], vec![], 1)).is_err());
    }

    #[test]
    fn domain_csv() {
        let d = parse_domains("rank,domain\n2,B.com\n1,a.com\n\n", "x").unwrap();
        assert_eq!(d, vec![DomainEntry { rank: 1, domain: "a.com".into() }, DomainEntry { rank: 2, domain: "b.com".into() }]);
        assert!(matches!(parse_domains("1,a.com\nx,b.com\n", "f"), Err(PlanError::Format { line: 2, .. })));
    }

    #[test]
    fn plan_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plan.jsonl");
        let configs = generate_plan(&plan(3, BrowserProfile::ALL.to_vec(), VantagePoint::ALL.to_vec(), 1)).unwrap();
        assert_eq!(write_plan(&path, configs.clone()).unwrap(), 36);
        assert_eq!(read_plan(&path).unwrap(), configs);
    }

    fn block_on<F: std::future::Future>(f: F) -> F::Output {
        futures::executor::block_on(f)
    }

    #[test]
    fn dispatch_partitions_and_surfaces_duplicates() {
        let broker = Broker::new(Arc::new(SimClock::default()));
        let configs = generate_plan(&plan(5, vec![BrowserProfile::HEADLESS], VantagePoint::ALL.to_vec(), 1)).unwrap();
        let s = block_on(dispatch(configs.clone(), &broker)).unwrap();
        assert_eq!((s.residential, s.common), (5, 15));
        assert!(s.rejected.is_empty());
        let again = block_on(dispatch(configs, &broker)).unwrap();
        assert_eq!(again.rejected.len(), 20);
        assert_eq!(block_on(dispatch(Vec::new(), &broker)).unwrap(), DispatchSummary::default());
    }

    #[test]
    fn reaper_requeues_then_drops() {
        let clock = SimClock::starting_at(0);
        let broker = Broker::new(Arc::new(clock.clone()));
        let cfg = CrawlConfig::new("a.com", 1, BrowserProfile::HEADLESS, VantagePoint::Cloud, 1, 3, 2);
        block_on(dispatch([cfg], &broker)).unwrap();
        assert!(block_on(reap(&broker)).unwrap().is_empty());
        let lease = |b: &Broker| block_on(b.dequeue(QueueName::Common, "w", 100, None)).unwrap().unwrap();
        lease(&broker);
        broker.with_core(|c| c.reap(100));
        // first expiry was consumed above; lease again and let it lapse
        let j = lease(&broker);
        assert!(j.config.requeued);
        let reaped = broker.with_core(|c| c.reap(1_000));
        assert_eq!(reaped.len(), 1);
        let rec = dropped_record(&reaped[0]);
        assert_eq!(rec.status, CrawlStatus::Dropped);
        assert_eq!(rec.attempt, 2);
        assert_eq!(rec.worker_id.as_deref(), Some("w"));
    }

    proptest! {
        #[test]
        fn set_members_share_tag_and_seed(n in 1usize..6, reps in 1u32..4, np in 1usize..4) {
            let p = plan(n, BrowserProfile::ALL[..np].to_vec(), VantagePoint::ALL.to_vec(), reps);
            let configs = generate_plan(&p).unwrap();
            prop_assert_eq!(configs.len(), n * np * reps as usize * 4);
            for set in configs.chunks(4) {
                prop_assert!(set.iter().all(|c| c.sync_tag == set[0].sync_tag && c.set_seed == set[0].set_seed));
                prop_assert_eq!(set.iter().map(|c| c.vp).collect::<Vec<_>>(), VantagePoint::ALL.to_vec());
            }
            let tags: HashSet<_> = configs.iter().map(|c| c.sync_tag.clone()).collect();
            prop_assert_eq!(tags.len(), p.set_count());
        }
    }
}
