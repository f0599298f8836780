//! The crawl engine: barrier rendezvous, breadth-first page queue, the
//! page-visit lifecycle with its fixed deadlines, link harvesting and
//! crash-safe record emission.
//!
//! Visit phases, relative to the visit start `s`:
//!
//! * navigation must finish by `s + 30 s`;
//! * interaction runs until `max(nav_end + 10 s, s + 30 s)`;
//! * tear-down (DOM snapshot, screenshot, anchors, close) gets 5 s more.
//!
//! A crawl as a whole is killed 180 s after it starts.

use std::collections::{HashSet, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;
use url::Url;

use crate::broker::{
    ArriveOutcome, BrokerClient, BrokerError, JobEnvelope, QueueName, ReleaseOutcome, BARRIER_TIMEOUT_MS,
    DEFAULT_LEASE_MS,
};
use crate::captcha::{self, DetectionRule};
use crate::clock::{with_deadline, Clock};
use crate::detrand::DetRand;
use crate::driver::{BrowserSession, Capture, FetchDriver, SessionContext, Snapshot};
use crate::model::{
    AbortCause, CrawlConfig, CrawlRecord, CrawlStatus, FrameRecord, Millis, PageVisitRecord, Record, RequestRecord,
    VantagePoint, VisitEvent, VisitStatus,
};
use crate::suffix::{url_host, SuffixTable};

pub const NAV_TIMEOUT_MS: Millis = 30_000;
pub const MIN_INTERACTION_MS: Millis = 10_000;
pub const TEARDOWN_TIMEOUT_MS: Millis = 5_000;
pub const WATCHDOG_MS: Millis = 180_000;

/// When interaction ends for a visit that started at `start` and finished
/// navigating at `nav_end`.
pub fn interaction_end(start: Millis, nav_end: Millis) -> Millis {
    (nav_end + MIN_INTERACTION_MS).max(start + NAV_TIMEOUT_MS)
}

/// Decides whether a sim worker dies partway through a job: `Some(k)`
/// abandons the crawl after `k` visits.
pub type CrashPolicy = Arc<dyn Fn(&JobEnvelope) -> Option<u32> + Send + Sync>;

#[derive(Clone)]
pub struct WorkerOptions {
    pub lease_ms: Millis,
    pub barrier_timeout_ms: Millis,
    pub watchdog_ms: Millis,
    /// Members per crawl set (the number of VPs in the plan).
    pub party_size: u32,
    /// Idle wait between dequeue attempts while other jobs are in flight.
    pub poll_ms: Millis,
    pub crash: Option<CrashPolicy>,
    /// Downtime after a simulated crash.
    pub restart_ms: Millis,
}

impl Default for WorkerOptions {
    fn default() -> Self {
        WorkerOptions {
            lease_ms: DEFAULT_LEASE_MS,
            barrier_timeout_ms: BARRIER_TIMEOUT_MS,
            watchdog_ms: WATCHDOG_MS,
            party_size: VantagePoint::ALL.len() as u32,
            poll_ms: 5_000,
            crash: None,
            restart_ms: 30_000,
        }
    }
}

/// Shared services a worker runs against.
#[derive(Clone)]
pub struct WorkerEnv {
    pub driver: Arc<dyn FetchDriver>,
    pub broker: Arc<dyn BrokerClient>,
    pub clock: Arc<dyn Clock>,
    pub suffixes: Arc<SuffixTable>,
    pub rules: Arc<Vec<DetectionRule>>,
    pub options: WorkerOptions,
}

#[derive(Debug, Error)]
pub enum CrawlError {
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("worker died mid-crawl")]
    Abandoned,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrawlOutcome {
    pub crawl: CrawlRecord,
    pub visits: Vec<PageVisitRecord>,
    pub requests: Vec<RequestRecord>,
    pub frames: Vec<FrameRecord>,
}

impl CrawlOutcome {
    /// Record lines in file order: each visit followed by its requests and
    /// frames, the crawl record last.
    pub fn records(&self) -> impl Iterator<Item = Record> + '_ {
        self.visits
            .iter()
            .flat_map(move |v| {
                std::iter::once(Record::Visit(v.clone()))
                    .chain(self.requests.iter().filter(|r| r.visit_id == v.visit_id).cloned().map(Record::Request))
                    .chain(self.frames.iter().filter(|f| f.visit_id == v.visit_id).cloned().map(Record::Frame))
            })
            .chain(std::iter::once(Record::Crawl(self.crawl.clone())))
    }
}

// ---------------------------------------------------------------------------
// Link harvesting
// ---------------------------------------------------------------------------

/// Canonical form used for de-duplication: parsed (which lowercases scheme
/// and host) with the fragment removed. Non-http(s) URLs yield `None`.
pub fn normalize_url(raw: &str) -> Option<String> {
    let mut u = Url::parse(raw).ok()?;
    if !matches!(u.scheme(), "http" | "https") || u.host().is_none() {
        return None;
    }
    u.set_fragment(None);
    Some(u.into())
}

/// Up to `width` new same-site links: event-triggered links in discovery
/// order first, then anchors in document order.
pub fn harvest_links(
    event_links: &[String],
    anchor_links: &[String],
    crawl_domain: &str,
    already_enqueued: &HashSet<String>,
    width: u32,
    table: &SuffixTable,
) -> Vec<String> {
    let site = table.etld1(crawl_domain).unwrap_or_else(|_| crawl_domain.to_string());
    let mut out: Vec<String> = Vec::new();
    for raw in event_links.iter().chain(anchor_links) {
        if out.len() >= width as usize {
            break;
        }
        let Some(norm) = normalize_url(raw) else { continue };
        let same_site = Url::parse(&norm)
            .ok()
            .and_then(|u| url_host(&u))
            .and_then(|h| table.etld1(&h).ok())
            .is_some_and(|e| e == site);
        if same_site && !already_enqueued.contains(&norm) && !out.contains(&norm) {
            out.push(norm);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Page visits
// ---------------------------------------------------------------------------

#[derive(Default)]
struct Progress {
    start: Millis,
    nav_end: Option<Millis>,
    interaction_end: Option<Millis>,
    teardown_end: Option<Millis>,
    landed_url: Option<String>,
    session: Option<Box<dyn BrowserSession>>,
    snapshot: Option<Snapshot>,
    events: Vec<VisitEvent>,
}

fn aborted(cause: AbortCause) -> VisitStatus {
    VisitStatus::Aborted { cause }
}

/// Connectivity failures are reported per the VP's connection class.
fn normalize_cause(cause: AbortCause, vp: VantagePoint) -> AbortCause {
    match cause {
        AbortCause::DnsResolveFailed | AbortCause::SocksProxyError => vp.connectivity_failure(),
        c => c,
    }
}

async fn drive_visit(env: &WorkerEnv, cfg: &CrawlConfig, ordinal: u32, url: &str, p: &mut Progress) -> VisitStatus {
    let clock = env.clock.as_ref();
    p.start = clock.now_ms();
    let session = match env.driver.open_session(SessionContext { config: cfg, ordinal }).await {
        Ok(s) => p.session.insert(s),
        Err(e) => return aborted(AbortCause::Other(format!("launch:{}", e.0))),
    };

    match with_deadline(clock, p.start + NAV_TIMEOUT_MS, session.navigate(url)).await {
        Err(_) => return aborted(AbortCause::NavigationTimeout),
        Ok(Err(cause)) => return aborted(normalize_cause(cause, cfg.vp)),
        Ok(Ok(nav)) => {
            p.nav_end = Some(clock.now_ms());
            p.landed_url = Some(nav.landed_url);
        }
    }

    let end = interaction_end(p.start, p.nav_end.expect("set above"));
    let mut rng = DetRand::substream(cfg.set_seed, &format!("page:{ordinal}"));
    let _ = with_deadline(clock, end, session.interact(&mut rng, end)).await;
    clock.sleep_until(end).await;
    p.interaction_end = Some(end);

    p.events.push(VisitEvent { at: end, event: "screenshot".into() });
    let teardown = async {
        let snap = session.snapshot().await;
        session.close().await;
        snap
    };
    match with_deadline(clock, end + TEARDOWN_TIMEOUT_MS, teardown).await {
        Err(_) => aborted(AbortCause::TeardownTimeout),
        Ok(snap) => {
            p.teardown_end = Some(clock.now_ms());
            let dead_end = snap.dom_html.is_empty();
            p.snapshot = Some(snap);
            VisitStatus::Completed { dead_end }
        }
    }
}

fn etld1_of(table: &SuffixTable, raw: &str) -> Option<String> {
    let u = Url::parse(raw).ok()?;
    table.etld1(&url_host(&u)?).ok()
}

/// One visit's record plus its request/frame records and link candidates.
#[derive(Debug, Clone)]
pub struct VisitOutput {
    pub record: PageVisitRecord,
    pub requests: Vec<RequestRecord>,
    pub frames: Vec<FrameRecord>,
    pub event_links: Vec<String>,
    pub anchor_links: Vec<String>,
}

/// Run one page visit, aborting it as `watchdog-killed` if `watchdog`
/// passes first.
pub async fn visit_page(
    env: &WorkerEnv,
    cfg: &CrawlConfig,
    ordinal: u32,
    url: &str,
    depth: u32,
    watchdog: Millis,
) -> VisitOutput {
    let clock = env.clock.as_ref();
    let mut p = Progress { start: clock.now_ms(), ..Progress::default() };
    let status = match with_deadline(clock, watchdog, drive_visit(env, cfg, ordinal, url, &mut p)).await {
        Ok(s) => s,
        Err(_) => aborted(AbortCause::WatchdogKilled),
    };
    let capture = p.session.as_mut().map(|s| s.take_capture()).unwrap_or_default();
    drop(p.session.take());
    let Capture { requests, frames, event_links, mut events } = capture;
    events.append(&mut p.events);
    events.sort_by_key(|e| e.at);

    let visit_id = format!("{}#{ordinal}", cfg.crawl_id());
    let table = env.suffixes.as_ref();
    let requests: Vec<RequestRecord> = requests
        .into_iter()
        .map(|r| RequestRecord {
            visit_id: visit_id.clone(),
            is_third_party: match (etld1_of(table, &r.url), etld1_of(table, &r.document_url)) {
                (Some(a), Some(b)) => a != b,
                _ => true,
            },
            request_url: r.url,
            resource_type: r.resource_type,
            frame_id: r.frame_id,
            document_url: r.document_url,
            outcome: r.outcome,
        })
        .collect();
    let frames = frames
        .into_iter()
        .map(|f| FrameRecord {
            visit_id: visit_id.clone(),
            frame_origin: etld1_of(table, &f.frame_url).unwrap_or_default(),
            frame_id: f.frame_id,
            parent_frame_id: f.parent_frame_id,
            frame_url: f.frame_url,
            navigation_events: f.navigation_events,
        })
        .collect();
    let (dom, anchors) = match p.snapshot {
        Some(s) if status.is_completed() => (s.dom_html, s.anchor_links),
        _ => (String::new(), Vec::new()),
    };
    let captcha_detected = captcha::detect(&dom, &requests, &env.rules);
    let record = PageVisitRecord {
        visit_id,
        crawl_id: cfg.crawl_id(),
        ordinal,
        page_url: url.to_string(),
        page_depth: depth,
        visit_start: p.start,
        nav_end: p.nav_end,
        interaction_end: p.interaction_end,
        teardown_end: p.teardown_end,
        status,
        landed_url: p.landed_url,
        harvested_links: Vec::new(),
        captured_html_size: dom.len() as u64,
        captcha_detected,
        events,
    };
    VisitOutput { record, requests, frames, event_links, anchor_links: anchors }
}

// ---------------------------------------------------------------------------
// Crawls
// ---------------------------------------------------------------------------

/// Rendezvous with the rest of the crawl set, then crawl breadth-first.
pub async fn run_crawl(
    env: &WorkerEnv,
    job: &JobEnvelope,
    worker_id: &str,
    abandon_after: Option<u32>,
) -> Result<CrawlOutcome, CrawlError> {
    let clock = env.clock.as_ref();
    let opts = &env.options;
    let cfg = &job.config;
    let dequeued_at = clock.now_ms();

    let (released_at, sync_degraded) = match env.broker.sync_arrive(&cfg.sync_tag, opts.party_size).await? {
        ArriveOutcome::Released { at } => (Some(at), false),
        ArriveOutcome::Waiting { .. } => {
            match env.broker.await_release(&cfg.sync_tag, opts.barrier_timeout_ms).await? {
                ReleaseOutcome::Released { at } => (Some(at), false),
                ReleaseOutcome::TimedOut => (None, true),
            }
        }
    };
    // the barrier wait may have eaten into the lease; restart it
    env.broker.renew(&job.job_id, worker_id, opts.lease_ms).await?;

    let crawl_start = clock.now_ms();
    let watchdog = crawl_start + opts.watchdog_ms;
    let mut queue: VecDeque<(String, u32)> = VecDeque::from([(cfg.landing_url(), 1)]);
    let mut seen: HashSet<String> = normalize_url(&cfg.landing_url()).into_iter().collect();
    let (mut visits, mut requests, mut frames) = (Vec::new(), Vec::new(), Vec::new());

    while let Some((url, depth)) = queue.pop_front() {
        if abandon_after.is_some_and(|k| visits.len() as u32 >= k) {
            return Err(CrawlError::Abandoned);
        }
        if clock.now_ms() >= watchdog {
            break;
        }
        let ordinal = visits.len() as u32 + 1;
        let mut out = visit_page(env, cfg, ordinal, &url, depth, watchdog).await;
        if let Some(landed) = out.record.landed_url.as_deref().and_then(normalize_url) {
            seen.insert(landed);
        }
        let killed = out.record.status.abort_cause() == Some(&AbortCause::WatchdogKilled);
        if out.record.status.is_completed() && depth < cfg.depth {
            let links =
                harvest_links(&out.event_links, &out.anchor_links, &cfg.domain, &seen, cfg.width, &env.suffixes);
            for l in &links {
                seen.insert(l.clone());
                queue.push_back((l.clone(), depth + 1));
            }
            out.record.harvested_links = links;
        }
        visits.push(out.record);
        requests.extend(out.requests);
        frames.extend(out.frames);
        if killed {
            break;
        }
    }

    let crawl = CrawlRecord {
        crawl_id: cfg.crawl_id(),
        config: cfg.clone(),
        status: CrawlStatus::Completed,
        worker_id: Some(worker_id.to_string()),
        attempt: job.attempt,
        dequeued_at: Some(dequeued_at),
        released_at,
        crawl_start: Some(crawl_start),
        crawl_end: Some(clock.now_ms()),
        sync_degraded,
        visit_count: visits.len() as u32,
    };
    Ok(CrawlOutcome { crawl, visits, requests, frames })
}

// ---------------------------------------------------------------------------
// Record files
// ---------------------------------------------------------------------------

pub trait RecordSink: Send {
    fn write_crawl(&mut self, outcome: &CrawlOutcome) -> io::Result<()>;
}

impl RecordSink for Vec<Record> {
    fn write_crawl(&mut self, outcome: &CrawlOutcome) -> io::Result<()> {
        self.extend(outcome.records());
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Recovery {
    pub kept_bytes: u64,
    pub discarded_bytes: u64,
}

const CRAWL_PREFIX: &[u8] = br#"{"kind":"crawl""#;

/// Truncate `path` after its last complete crawl record, discarding a
/// partially written crawl (or a torn final line) left by a crash.
pub fn recover_record_file(path: &Path) -> io::Result<Recovery> {
    let data = match fs::read(path) {
        Ok(d) => d,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Recovery::default()),
        Err(e) => return Err(e),
    };
    let mut cut = 0usize;
    let mut pos = 0usize;
    while let Some(nl) = data[pos..].iter().position(|&b| b == b'\n') {
        let line = &data[pos..pos + nl];
        if line.starts_with(CRAWL_PREFIX) && serde_json::from_slice::<Record>(line).is_ok() {
            cut = pos + nl + 1;
        }
        pos += nl + 1;
    }
    if cut < data.len() {
        OpenOptions::new().write(true).open(path)?.set_len(cut as u64)?;
    }
    Ok(Recovery { kept_bytes: cut as u64, discarded_bytes: (data.len() - cut) as u64 })
}

/// Append-only JSON-lines record file, one whole crawl per write.
pub struct RecordWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl RecordWriter {
    pub fn open(path: impl Into<PathBuf>) -> io::Result<(Self, Recovery)> {
        let path = path.into();
        let recovery = recover_record_file(&path)?;
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok((RecordWriter { path, out: BufWriter::new(file) }, recovery))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write_record(&mut self, rec: &Record) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, rec).map_err(io::Error::other)?;
        self.out.write_all(b"\n")
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

impl RecordSink for RecordWriter {
    fn write_crawl(&mut self, outcome: &CrawlOutcome) -> io::Result<()> {
        for rec in outcome.records() {
            self.write_record(&rec)?;
        }
        self.out.flush()
    }
}

// ---------------------------------------------------------------------------
// Worker loop
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("writing records: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkerSummary {
    pub crawls: usize,
    pub abandoned: usize,
    pub lost_leases: usize,
}

/// Which jobs a worker takes.
#[derive(Debug, Clone)]
pub struct WorkerIdentity {
    pub worker_id: String,
    pub queue: QueueName,
    /// Restrict common-queue jobs to one VP (a worker can only reach the
    /// network through its own VP).
    pub vp: Option<VantagePoint>,
}

/// Take jobs until nothing is queued or in flight anywhere.
pub async fn worker_loop(
    env: &WorkerEnv,
    me: &WorkerIdentity,
    sink: &mut dyn RecordSink,
) -> Result<WorkerSummary, WorkerError> {
    let clock = env.clock.as_ref();
    let broker = env.broker.as_ref();
    let mut summary = WorkerSummary::default();
    loop {
        let Some(job) = broker.dequeue(me.queue, &me.worker_id, env.options.lease_ms, me.vp).await? else {
            if broker.status().await?.outstanding() == 0 {
                return Ok(summary);
            }
            clock.sleep_until(clock.now_ms() + env.options.poll_ms).await;
            continue;
        };
        let abandon = env.options.crash.as_ref().and_then(|f| f(&job));
        match run_crawl(env, &job, &me.worker_id, abandon).await {
            Ok(outcome) => match broker.complete(&job.job_id, &me.worker_id).await {
                Ok(()) => {
                    sink.write_crawl(&outcome)?;
                    summary.crawls += 1;
                }
                Err(BrokerError::LeaseLost { .. }) => {
                    tracing::warn!(job = %job.job_id, "lease lost before completion; records discarded");
                    summary.lost_leases += 1;
                }
                Err(e) => return Err(e.into()),
            },
            Err(CrawlError::Abandoned) => {
                tracing::debug!(job = %job.job_id, worker = %me.worker_id, "simulated worker crash");
                summary.abandoned += 1;
                clock.sleep_until(clock.now_ms() + env.options.restart_ms).await;
            }
            Err(CrawlError::Broker(BrokerError::LeaseLost { .. })) => summary.lost_leases += 1,
            Err(CrawlError::Broker(e)) => return Err(e.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Mutex;

    use async_trait::async_trait;

    use super::*;
    use crate::broker::Broker;
    use crate::clock::SimClock;
    use crate::driver::{DriverError, Navigation};
    use crate::executor::SimExecutor;
    use crate::model::BrowserProfile;

    #[derive(Clone, Default)]
    struct Page {
        nav_ms: Millis,
        nav_error: Option<AbortCause>,
        snapshot_ms: Millis,
        anchors: Vec<String>,
        event_links: Vec<String>,
        hang_launch: bool,
    }

    struct ScriptDriver {
        clock: SimClock,
        pages: HashMap<String, Page>,
        sessions: AtomicU32,
        draws: Arc<Mutex<Vec<(VantagePoint, u32, u64)>>>,
    }

    struct ScriptSession {
        clock: SimClock,
        page: Option<Page>,
        pages: HashMap<String, Page>,
        vp: VantagePoint,
        ordinal: u32,
        draws: Arc<Mutex<Vec<(VantagePoint, u32, u64)>>>,
        capture: Capture,
    }

    #[async_trait]
    impl FetchDriver for ScriptDriver {
        async fn open_session(&self, ctx: SessionContext<'_>) -> Result<Box<dyn BrowserSession>, DriverError> {
            self.sessions.fetch_add(1, Ordering::SeqCst);
            if self.pages.values().any(|p| p.hang_launch) {
                futures::future::pending::<()>().await;
            }
            Ok(Box::new(ScriptSession {
                clock: self.clock.clone(),
                page: None,
                pages: self.pages.clone(),
                vp: ctx.config.vp,
                ordinal: ctx.ordinal,
                draws: Arc::clone(&self.draws),
                capture: Capture::default(),
            }))
        }
    }

    #[async_trait]
    impl BrowserSession for ScriptSession {
        async fn navigate(&mut self, url: &str) -> Result<Navigation, AbortCause> {
            let page = self.pages.get(url).cloned().unwrap_or_default();
            self.clock.sleep_until(self.clock.now_ms() + page.nav_ms).await;
            if let Some(e) = page.nav_error.clone() {
                return Err(e);
            }
            self.capture.event_links = page.event_links.clone();
            self.page = Some(page);
            Ok(Navigation { landed_url: url.to_string() })
        }

        async fn interact(&mut self, rng: &mut DetRand, end: Millis) {
            self.draws.lock().unwrap().push((self.vp, self.ordinal, rng.next_bits()));
            self.clock.sleep_until(end + 1_000_000).await;
        }

        async fn snapshot(&mut self) -> Snapshot {
            let page = self.page.clone().unwrap_or_default();
            self.clock.sleep_until(self.clock.now_ms() + page.snapshot_ms).await;
            Snapshot { dom_html: "<html></html>".into(), anchor_links: page.anchors }
        }

        async fn close(&mut self) {}

        fn take_capture(&mut self) -> Capture {
            std::mem::take(&mut self.capture)
        }
    }

    struct Rig {
        exec: SimExecutor,
        env: WorkerEnv,
        broker: Broker,
        driver: Arc<ScriptDriver>,
    }

    fn rig(pages: Vec<(&str, Page)>, party_size: u32) -> Rig {
        let clock = SimClock::starting_at(0);
        let broker = Broker::new(Arc::new(clock.clone()));
        let driver = Arc::new(ScriptDriver {
            clock: clock.clone(),
            pages: pages.into_iter().map(|(u, p)| (u.to_string(), p)).collect(),
            sessions: AtomicU32::new(0),
            draws: Arc::default(),
        });
        let env = WorkerEnv {
            driver: driver.clone(),
            broker: Arc::new(broker.clone()),
            clock: Arc::new(clock.clone()),
            suffixes: Arc::new(SuffixTable::bundled()),
            rules: Arc::new(captcha::bundled_rules()),
            options: WorkerOptions { party_size, ..WorkerOptions::default() },
        };
        Rig { exec: SimExecutor::new(clock), env, broker, driver }
    }

    fn config(vp: VantagePoint) -> CrawlConfig {
        CrawlConfig::new("example.com", 1, BrowserProfile::HEADLESS, vp, 1, 3, 2)
    }

    /// Enqueue, lease and crawl one job per config; returns outcomes in order.
    fn crawl_all(mut rig: Rig, configs: Vec<CrawlConfig>) -> (Vec<CrawlOutcome>, Rig) {
        let results = Arc::new(Mutex::new(Vec::new()));
        for (i, cfg) in configs.into_iter().enumerate() {
            let env = rig.env.clone();
            let out = Arc::clone(&results);
            rig.exec.spawn(async move {
                let b = env.broker.clone();
                let q = QueueName::for_vp(cfg.vp);
                b.enqueue(q, JobEnvelope::new(cfg.clone())).await.unwrap();
                let job = b.dequeue(q, &format!("w{i}"), env.options.lease_ms, Some(cfg.vp)).await.unwrap().unwrap();
                let res = run_crawl(&env, &job, &format!("w{i}"), None).await.unwrap();
                out.lock().unwrap().push((i, res));
            });
        }
        rig.exec.run().unwrap();
        let mut v = std::mem::take(&mut *results.lock().unwrap());
        v.sort_by_key(|(i, _)| *i);
        (v.into_iter().map(|(_, o)| o).collect(), rig)
    }

    fn single(pages: Vec<(&str, Page)>) -> CrawlOutcome {
        let (mut out, _) = crawl_all(rig(pages, 1), vec![config(VantagePoint::Cloud)]);
        out.remove(0)
    }

    #[test]
    fn interaction_end_formula() {
        assert_eq!(interaction_end(0, 25_000), 35_000);
        assert_eq!(interaction_end(0, 5_000), 30_000);
        assert_eq!(interaction_end(1_000, 21_000), 31_000);
    }

    #[test]
    fn slow_navigation_extends_interaction() {
        let out = single(vec![("http://example.com/", Page { nav_ms: 25_000, ..Page::default() })]);
        let v = &out.visits[0];
        assert_eq!(v.nav_end, Some(v.visit_start + 25_000));
        assert_eq!(v.interaction_end, Some(v.visit_start + 35_000));
        assert!(v.status.is_completed());
    }

    #[test]
    fn fast_navigation_still_interacts_until_thirty_seconds() {
        let out = single(vec![("http://example.com/", Page { nav_ms: 5_000, ..Page::default() })]);
        let v = &out.visits[0];
        assert_eq!(v.interaction_end, Some(v.visit_start + 30_000));
        assert_eq!(v.teardown_end, Some(v.visit_start + 30_000));
    }

    #[test]
    fn navigation_timeout_at_thirty_seconds() {
        let out = single(vec![("http://example.com/", Page { nav_ms: 40_000, ..Page::default() })]);
        let v = &out.visits[0];
        assert_eq!(v.status.abort_cause(), Some(&AbortCause::NavigationTimeout));
        assert_eq!(v.nav_end, None);
        assert_eq!(out.crawl.crawl_end, Some(v.visit_start + 30_000));
        assert_eq!(out.visits.len(), 1);
    }

    #[test]
    fn teardown_timeout_bounds_visit_at_forty_five_seconds() {
        let out =
            single(vec![("http://example.com/", Page { nav_ms: 29_999, snapshot_ms: 60_000, ..Page::default() })]);
        let v = &out.visits[0];
        assert_eq!(v.status.abort_cause(), Some(&AbortCause::TeardownTimeout));
        assert_eq!(v.interaction_end, Some(v.visit_start + 39_999));
        assert_eq!(out.crawl.crawl_end, Some(v.visit_start + 44_999));
    }

    #[test]
    fn connectivity_errors_follow_the_vp() {
        let page = Page { nav_error: Some(AbortCause::DnsResolveFailed), ..Page::default() };
        let (out, _) = crawl_all(
            rig(vec![("http://example.com/", page)], 1),
            vec![config(VantagePoint::Tor), config(VantagePoint::Residential)],
        );
        assert_eq!(out[0].visits[0].status.abort_cause(), Some(&AbortCause::SocksProxyError));
        assert_eq!(out[1].visits[0].status.abort_cause(), Some(&AbortCause::DnsResolveFailed));
    }

    #[test]
    fn watchdog_kills_hung_crawl_at_180_seconds() {
        let out = single(vec![("http://example.com/", Page { hang_launch: true, ..Page::default() })]);
        let start = out.crawl.crawl_start.unwrap();
        assert_eq!(out.crawl.crawl_end, Some(start + WATCHDOG_MS));
        assert_eq!(out.visits.len(), 1);
        assert_eq!(out.visits[0].status.abort_cause(), Some(&AbortCause::WatchdogKilled));
    }

    fn site() -> Vec<(&'static str, Page)> {
        let links = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        vec![
            (
                "http://example.com/",
                Page {
                    nav_ms: 1_000,
                    event_links: links(&["http://example.com/e#top"]),
                    anchors: links(&[
                        "http://EXAMPLE.com/e",
                        "http://other.org/x",
                        "https://www.example.com/a",
                        "http://example.com/b",
                        "http://example.com/c",
                    ]),
                    ..Page::default()
                },
            ),
            (
                "http://example.com/e",
                Page { anchors: links(&["http://example.com/", "http://example.com/e2"]), ..Page::default() },
            ),
        ]
    }

    #[test]
    fn breadth_first_with_width_and_depth() {
        let (out, rig) = crawl_all(rig(site(), 1), vec![config(VantagePoint::Cloud)]);
        let out = &out[0];
        let urls: Vec<_> = out.visits.iter().map(|v| (v.page_url.as_str(), v.page_depth, v.ordinal)).collect();
        assert_eq!(
            urls,
            vec![
                ("http://example.com/", 1, 1),
                ("http://example.com/e", 2, 2),
                ("https://www.example.com/a", 2, 3),
                ("http://example.com/b", 2, 4),
            ]
        );
        // depth-2 pages harvest nothing
        assert!(out.visits[1].harvested_links.is_empty());
        assert_eq!(rig.driver.sessions.load(Ordering::SeqCst), 4, "fresh browser per visit");
        assert_eq!(out.crawl.visit_count, 4);
        // consecutive visits, each at least 30 s
        for w in out.visits.windows(2) {
            assert!(w[1].visit_start >= w[0].visit_start + 30_000);
        }
    }

    #[test]
    fn interaction_stream_is_shared_across_vps() {
        let configs: Vec<_> = VantagePoint::ALL.iter().map(|&vp| config(vp)).collect();
        let (_, rig) = crawl_all(rig(site(), 4), configs);
        let draws = rig.driver.draws.lock().unwrap().clone();
        for ordinal in 1..=4 {
            let vals: HashSet<u64> = draws.iter().filter(|d| d.1 == ordinal).map(|d| d.2).collect();
            assert_eq!(vals.len(), 1, "ordinal {ordinal}");
        }
        let all: HashSet<u64> = draws.iter().map(|d| d.2).collect();
        assert_eq!(all.len(), 4, "distinct pages draw distinct streams");
    }

    #[test]
    fn barrier_releases_together_or_degrades() {
        let configs: Vec<_> = VantagePoint::ALL.iter().map(|&vp| config(vp)).collect();
        let (out, _) = crawl_all(rig(site(), 4), configs);
        let starts: HashSet<_> = out.iter().map(|o| o.crawl.released_at).collect();
        assert_eq!(starts.len(), 1);
        assert!(out.iter().all(|o| !o.crawl.sync_degraded));

        let (out, _) = crawl_all(rig(site(), 4), vec![config(VantagePoint::Cloud)]);
        assert!(out[0].crawl.sync_degraded);
        assert_eq!(out[0].crawl.released_at, None);
        assert_eq!(out[0].crawl.crawl_start, Some(BARRIER_TIMEOUT_MS));
    }

    #[test]
    fn records_put_crawl_last() {
        let out = single(site());
        let recs: Vec<_> = out.records().collect();
        assert!(matches!(recs.last(), Some(Record::Crawl(_))));
        assert_eq!(recs.iter().filter(|r| matches!(r, Record::Visit(_))).count(), 4);
    }

    #[test]
    fn harvest_rules() {
        let table = SuffixTable::bundled();
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let seen: HashSet<String> = ["http://shop.co.uk/".to_string()].into();
        let got = harvest_links(
            &s(&["http://shop.co.uk/ev", "javascript:void(0)"]),
            &s(&[
                "http://SHOP.co.uk/#frag",
                "http://other.co.uk/",
                "https://m.shop.co.uk/p#x",
                "http://shop.co.uk/ev",
                "mailto:a@shop.co.uk",
                "http://shop.co.uk/q?x=1",
            ]),
            "shop.co.uk",
            &seen,
            3,
            &table,
        );
        assert_eq!(got, s(&["http://shop.co.uk/ev", "https://m.shop.co.uk/p", "http://shop.co.uk/q?x=1"]));
        assert!(harvest_links(&[], &s(&["http://shop.co.uk/a"]), "shop.co.uk", &seen, 0, &table).is_empty());
    }

    #[test]
    fn record_file_recovers_to_last_crawl() {
        let out = single(site());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.jsonl");
        let (mut w, rec) = RecordWriter::open(&path).unwrap();
        assert_eq!(rec, Recovery::default());
        w.write_crawl(&out).unwrap();
        let good = fs::metadata(&path).unwrap().len();
        // a crash mid-crawl: a visit line and a torn line
        w.write_record(&Record::Visit(out.visits[0].clone())).unwrap();
        w.flush().unwrap();
        drop(w);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"kind":"crawl","crawl-id":"#).unwrap();
        drop(f);

        let (mut w, rec) = RecordWriter::open(&path).unwrap();
        assert_eq!(rec.kept_bytes, good);
        assert!(rec.discarded_bytes > 0);
        assert_eq!(fs::metadata(&path).unwrap().len(), good);
        w.write_crawl(&out).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let parsed: Vec<Record> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(parsed.len(), 2 * out.records().count());
    }

    #[test]
    fn worker_loop_drains_and_survives_crash() {
        let mut r = rig(site(), 1);
        r.env.options.crash = Some(Arc::new(|job: &JobEnvelope| (job.attempt == 1).then_some(2)));
        let env = r.env.clone();
        let sink = Arc::new(Mutex::new(Vec::<Record>::new()));
        let s2 = Arc::clone(&sink);
        let summary = Arc::new(Mutex::new(None));
        let sum2 = Arc::clone(&summary);
        r.exec.spawn(async move {
            let cfg = config(VantagePoint::Cloud);
            env.broker.enqueue(QueueName::Common, JobEnvelope::new(cfg)).await.unwrap();
            let me = WorkerIdentity { worker_id: "w".into(), queue: QueueName::Common, vp: None };
            let mut recs = Vec::new();
            let got = worker_loop(&env, &me, &mut recs).await.unwrap();
            *s2.lock().unwrap() = recs;
            *sum2.lock().unwrap() = Some(got);
        });
        r.exec.run().unwrap();
        let summary = summary.lock().unwrap().unwrap();
        assert_eq!(summary, WorkerSummary { crawls: 1, abandoned: 1, lost_leases: 0 });
        let recs = sink.lock().unwrap();
        let Some(Record::Crawl(c)) = recs.last() else { panic!("no crawl record") };
        assert_eq!(c.attempt, 2);
        assert!(c.config.requeued);
        assert_eq!(r.broker.with_core(|c| c.status()).outstanding(), 0);
    }
}
