//! Conformance harnesses shared by the integration tests and the
//! acceptance suite: frozen reference fixtures, differential runs against
//! naive implementations, and the analytics oracle comparison.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use serde::Deserialize;

use crate::abp::{Classification, FilterSet};
use crate::broker::{Broker, JobEnvelope, QueueName};
use crate::clock::{Clock, SimClock};
use crate::driver::{BrowserSession, Capture, DriverError, FetchDriver, Navigation, SessionContext, Snapshot};
use crate::executor::SimExecutor;
use crate::worker::{
    interaction_end, run_crawl, CrawlOutcome, WorkerEnv, WorkerOptions, MIN_INTERACTION_MS, NAV_TIMEOUT_MS,
    TEARDOWN_TIMEOUT_MS, WATCHDOG_MS,
};
use crate::analytics::synth::{synthetic_filter_lines, synthetic_records, SynthSpec};
use crate::analytics::{self, oracle, AnalyticsStore};
use crate::detrand::DetRand;
use crate::model::{AbortCause, BrowserProfile, CrawlConfig, Millis, PageVisitRecord, ResourceType, VantagePoint};
use crate::suffix::SuffixTable;

/// Outcome of a batch of comparisons.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Agreement {
    pub total: usize,
    pub agreed: usize,
    /// Descriptions of the first few disagreements.
    pub mismatches: Vec<String>,
}

impl Agreement {
    pub fn passed(&self) -> bool {
        self.total > 0 && self.agreed == self.total
    }

    fn check(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.total += 1;
        if ok {
            self.agreed += 1;
        } else if self.mismatches.len() < 10 {
            self.mismatches.push(describe());
        }
    }
}

// ---------------------------------------------------------------------------
// Filter lists
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct AbpCase {
    pub name: String,
    pub rules: Vec<String>,
    pub request_url: String,
    pub document_url: String,
    pub resource_type: ResourceType,
    pub third_party: bool,
    /// `matched`, `excepted` or `none`.
    pub expected: String,
}

pub fn load_abp_cases(path: impl AsRef<Path>) -> std::io::Result<Vec<AbpCase>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(std::io::Error::other)
}

fn verdict(c: &Classification) -> &'static str {
    match c {
        Classification::Matched(_) => "matched",
        Classification::Excepted { .. } => "excepted",
        Classification::None => "none",
    }
}

/// Run every fixture case through both the indexed and the scanning matcher.
pub fn check_abp_cases(cases: &[AbpCase]) -> Agreement {
    let mut a = Agreement::default();
    for case in cases {
        let fs = FilterSet::from_lines(&case.rules);
        let got = |scan: bool| {
            let r = if scan {
                fs.classify_scan(&case.request_url, &case.document_url, case.resource_type, case.third_party)
            } else {
                fs.classify(&case.request_url, &case.document_url, case.resource_type, case.third_party)
            };
            r.map(|c| verdict(&c)).unwrap_or("error")
        };
        let (indexed, scanned) = (got(false), got(true));
        a.check(indexed == case.expected && scanned == case.expected, || {
            format!("{}: expected {}, indexed {indexed}, scan {scanned}", case.name, case.expected)
        });
    }
    a
}

const HOSTS: [&str; 10] = [
    "ads.example.com",
    "example.com",
    "cdn.example.com",
    "badexample.com",
    "tracker.net",
    "t.tracker.net",
    "tracker.network",
    "news.co.uk",
    "img.news.co.uk",
    "static.cdn-lib.org",
];
const SEGMENTS: [&str; 10] = ["ads", "banner", "track", "img", "js", "v2", "pixel", "collect", "ok", "lib"];
const FILES: [&str; 8] = ["a.js", "b.png", "pixel.gif", "frame.html", "style.css", "x.swf", "beacon", "ads.js"];
const OPTIONS: [&str; 14] = [
    "script",
    "image",
    "~image",
    "stylesheet",
    "xhr",
    "subdocument",
    "document",
    "media",
    "websocket",
    "other",
    "third-party",
    "~third-party",
    "domain=example.com",
    "domain=~news.co.uk|tracker.net",
];

fn pick<'a>(rng: &mut DetRand, xs: &[&'a str]) -> &'a str {
    xs[rng.range(0, xs.len() as u64 - 1) as usize]
}

fn random_rule(rng: &mut DetRand) -> String {
    let mut r = String::new();
    if rng.chance(0.2) {
        r.push_str("@@");
    }
    let host = pick(rng, &HOSTS);
    match rng.range(0, 3) {
        0 => {
            r.push_str("||");
            // a host suffix, sometimes cut mid-label
            let cut = rng.range(0, (host.len() / 2) as u64) as usize;
            r.push_str(&host[cut..]);
        }
        1 => r.push_str(&format!("|{}://{host}", if rng.chance(0.5) { "https" } else { "http" })),
        _ => {}
    }
    for _ in 0..rng.range(0, 2) {
        r.push_str(match rng.range(0, 3) {
            0 => "^",
            1 => "*",
            _ => "/",
        });
        r.push_str(pick(rng, &SEGMENTS));
    }
    if rng.chance(0.3) {
        r.push_str(pick(rng, &["/", "^", "*", ".js", ".gif"]));
    }
    if r.trim_start_matches('@').is_empty() {
        r.push_str(pick(rng, &SEGMENTS));
    }
    if rng.chance(0.15) {
        r.push('|');
    }
    if rng.chance(0.4) {
        let n = rng.range(1, 2);
        let opts: Vec<&str> = (0..n).map(|_| pick(rng, &OPTIONS)).collect();
        r.push('$');
        r.push_str(&opts.join(","));
    }
    r
}

fn random_url(rng: &mut DetRand) -> String {
    let mut u = format!("{}://{}", if rng.chance(0.7) { "https" } else { "http" }, pick(rng, &HOSTS));
    for _ in 0..rng.range(0, 3) {
        u.push('/');
        u.push_str(pick(rng, &SEGMENTS));
    }
    if rng.chance(0.8) {
        u.push('/');
        u.push_str(pick(rng, &FILES));
    }
    if rng.chance(0.3) {
        u.push_str(&format!("?id={}&ad_type=banner", rng.range(0, 99)));
    }
    u
}

/// Indexed matcher versus full scan over random (rule set, request) trials.
/// Both the verdict and the deciding rules must agree.
pub fn abp_differential(trials: usize, seed: u64) -> Agreement {
    let table = SuffixTable::bundled();
    let mut rng = DetRand::substream(seed, "abp-differential");
    let mut a = Agreement::default();
    let raw = |c: &Classification| match c {
        Classification::Matched(b) => (b.raw.clone(), String::new()),
        Classification::Excepted { block, exception } => (block.raw.clone(), exception.raw.clone()),
        Classification::None => Default::default(),
    };
    let mut fs = FilterSet::from_lines(Vec::<String>::new());
    let mut rules = Vec::new();
    for t in 0..trials {
        if t % 20 == 0 {
            rules = (0..rng.range(1, 40)).map(|_| random_rule(&mut rng)).collect();
            fs = FilterSet::from_lines(&rules);
        }
        let url = random_url(&mut rng);
        let doc = format!("https://{}/", pick(&mut rng, &HOSTS));
        let host = |u: &str| url::Url::parse(u).ok().and_then(|u| u.host_str().map(str::to_string)).unwrap_or_default();
        let third = table.is_third_party(&host(&url), &host(&doc)).unwrap_or(true);
        let rtype = ResourceType::ALL[rng.range(0, ResourceType::ALL.len() as u64 - 1) as usize];
        let indexed = fs.classify(&url, &doc, rtype, third).map(|c| (verdict(&c), raw(&c)));
        let scanned = fs.classify_scan(&url, &doc, rtype, third).map(|c| (verdict(&c), raw(&c)));
        let ok = match (&indexed, &scanned) {
            (Ok(x), Ok(y)) => x == y,
            (Err(_), Err(_)) => true,
            _ => false,
        };
        a.check(ok, || format!("{url} on {doc} ({rtype:?}, third={third}) rules {rules:?}: {indexed:?} vs {scanned:?}"));
    }
    a
}

// ---------------------------------------------------------------------------
// Public suffix vectors
// ---------------------------------------------------------------------------

/// Run `checkPublicSuffix(host, expected)` lines against `table`. Returns
/// the agreement and the number of lines skipped (null input).
pub fn check_psl_vectors(table: &SuffixTable, text: &str) -> (Agreement, usize) {
    let mut a = Agreement::default();
    let mut skipped = 0;
    let arg = |s: &str| -> Option<String> {
        let s = s.trim();
        (s != "null").then(|| s.trim_matches('\'').to_string())
    };
    for line in text.lines().map(str::trim) {
        let Some(body) = line.strip_prefix("checkPublicSuffix(").and_then(|l| l.strip_suffix(");")) else {
            continue;
        };
        let Some((host, expected)) = body.split_once(',') else { continue };
        let (Some(host), expected) = (arg(host), arg(expected)) else {
            skipped += 1;
            continue;
        };
        let got = table.registrable_domain(&host).ok().flatten();
        a.check(got == expected, || format!("{host}: expected {expected:?}, got {got:?}"));
    }
    (a, skipped)
}

// ---------------------------------------------------------------------------
// Analytics
// ---------------------------------------------------------------------------

/// Compare every indexed analysis with the brute-force oracle on one
/// synthetic store. Returns the store's record count.
pub fn check_analytics(seed: u64, spec: &SynthSpec) -> Result<usize, String> {
    let recs = synthetic_records(seed, spec);
    let store = AnalyticsStore::from_records("synthetic", recs.clone());
    let lists = vec![
        ("a".to_string(), FilterSet::from_lines(synthetic_filter_lines(seed))),
        ("b".to_string(), FilterSet::from_lines(synthetic_filter_lines(seed ^ 0xff))),
    ];
    let differ = |what: &str| Err(format!("seed {seed}: {what} differs"));
    for tor in [false, true] {
        if analytics::classify_sets(&store, tor) != oracle::classify_sets(&recs, tor) {
            return differ("classify_sets");
        }
    }
    if analytics::abort_breakdown(&store) != oracle::abort_breakdown(&recs) {
        return differ("abort_breakdown");
    }
    for (name, fs) in &lists {
        if analytics::filter_hit_ratios(&store, fs) != oracle::filter_hit_ratios(&recs, fs) {
            return differ(&format!("filter_hit_ratios({name})"));
        }
    }
    for exclude in [BTreeSet::new(), BTreeSet::from([VantagePoint::Tor])] {
        if analytics::frame_origin_matrix(&store, &exclude) != oracle::frame_origin_matrix(&recs, &exclude) {
            return differ("frame_origin_matrix");
        }
    }
    if analytics::misc_stats(&store, &lists) != oracle::misc_stats(&recs, &lists) {
        return differ("misc_stats");
    }
    Ok(recs.len())
}

// ---------------------------------------------------------------------------
// Page-visit timing
// ---------------------------------------------------------------------------

/// How a scripted page behaves. Durations are simulated milliseconds.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedPage {
    pub nav_ms: Millis,
    pub snapshot_ms: Millis,
    /// The browser never comes up.
    pub hang_launch: bool,
}

enum Script {
    Fixed(ScriptedPage),
    /// Fresh random timings for every visit, plus three same-site anchors.
    Random(Mutex<DetRand>),
}

struct ScriptedDriver {
    clock: SimClock,
    script: Arc<Script>,
}

struct ScriptedSession {
    clock: SimClock,
    script: Arc<Script>,
    page: ScriptedPage,
}

impl Script {
    fn page(&self) -> ScriptedPage {
        match self {
            Script::Fixed(p) => *p,
            Script::Random(rng) => {
                let mut rng = rng.lock().unwrap();
                ScriptedPage { nav_ms: rng.range(0, 40_000), snapshot_ms: rng.range(0, 8_000), hang_launch: false }
            }
        }
    }
}

#[async_trait]
impl FetchDriver for ScriptedDriver {
    async fn open_session(&self, _ctx: SessionContext<'_>) -> Result<Box<dyn BrowserSession>, DriverError> {
        if matches!(*self.script, Script::Fixed(p) if p.hang_launch) {
            futures::future::pending::<()>().await;
        }
        Ok(Box::new(ScriptedSession {
            clock: self.clock.clone(),
            script: Arc::clone(&self.script),
            page: ScriptedPage::default(),
        }))
    }
}

#[async_trait]
impl BrowserSession for ScriptedSession {
    async fn navigate(&mut self, url: &str) -> Result<Navigation, AbortCause> {
        self.page = self.script.page();
        self.clock.sleep_until(self.clock.now_ms() + self.page.nav_ms).await;
        Ok(Navigation { landed_url: url.to_string() })
    }

    async fn interact(&mut self, _rng: &mut DetRand, end: Millis) {
        // overrun on purpose: the worker must cut interaction at `end`
        self.clock.sleep_until(end + 1_000_000).await;
    }

    async fn snapshot(&mut self) -> Snapshot {
        self.clock.sleep_until(self.clock.now_ms() + self.page.snapshot_ms).await;
        let anchor_links = match *self.script {
            Script::Random(_) => ["/a", "/b", "/c"].iter().map(|p| format!("http://example.com{p}")).collect(),
            Script::Fixed(_) => Vec::new(),
        };
        Snapshot { dom_html: "<html></html>".into(), anchor_links }
    }

    async fn close(&mut self) {}

    fn take_capture(&mut self) -> Capture {
        Capture::default()
    }
}

fn crawl_scripted(script: Script) -> CrawlOutcome {
    let clock = SimClock::starting_at(1_000);
    let broker = Broker::new(Arc::new(clock.clone()));
    let env = WorkerEnv {
        driver: Arc::new(ScriptedDriver { clock: clock.clone(), script: Arc::new(script) }),
        broker: Arc::new(broker),
        clock: Arc::new(clock.clone()),
        suffixes: Arc::new(SuffixTable::bundled()),
        rules: Arc::new(crate::captcha::bundled_rules()),
        options: WorkerOptions { party_size: 1, ..WorkerOptions::default() },
    };
    let cfg = CrawlConfig::new("example.com", 1, BrowserProfile::HEADLESS, VantagePoint::Cloud, 1, 3, 2);
    let out = Arc::new(Mutex::new(None));
    let mut exec = SimExecutor::new(clock);
    let slot = Arc::clone(&out);
    exec.spawn(async move {
        let q = QueueName::for_vp(cfg.vp);
        env.broker.enqueue(q, JobEnvelope::new(cfg.clone())).await.unwrap();
        let job = env.broker.dequeue(q, "w", env.options.lease_ms, None).await.unwrap().unwrap();
        *slot.lock().unwrap() = Some(run_crawl(&env, &job, "w", None).await.unwrap());
    });
    exec.run().expect("scripted crawl deadlocked");
    let outcome = out.lock().unwrap().take().expect("scripted crawl did not finish");
    outcome
}

/// The engineered single-visit scenarios: each compares an observed
/// timestamp (relative to the visit or crawl start) with its formula.
pub fn timing_scenarios() -> Agreement {
    let mut a = Agreement::default();
    let mut expect = |name: &str, got: Option<Millis>, want: Millis| {
        a.check(got == Some(want), || format!("{name}: expected {want}, got {got:?}"));
    };
    let fixed = |nav_ms, snapshot_ms| {
        crawl_scripted(Script::Fixed(ScriptedPage { nav_ms, snapshot_ms, hang_launch: false }))
    };
    let rel = |v: &PageVisitRecord, t: Option<Millis>| t.map(|t| t - v.visit_start);

    let o = fixed(25_000, 0);
    let v = &o.visits[0];
    expect("nav at 25 s: nav end", rel(v, v.nav_end), 25_000);
    expect("nav at 25 s: interaction end", rel(v, v.interaction_end), 35_000);
    expect("nav at 25 s: completed", Some(v.status.is_completed() as Millis), 1);

    let o = fixed(5_000, 0);
    let v = &o.visits[0];
    expect("nav at 5 s: interaction end", rel(v, v.interaction_end), 30_000);
    expect("nav at 5 s: completed", Some(v.status.is_completed() as Millis), 1);

    let o = fixed(40_000, 0);
    let v = &o.visits[0];
    expect("nav never ends: timeout", Some((v.status.abort_cause() == Some(&AbortCause::NavigationTimeout)) as Millis), 1);
    expect("nav never ends: visit end", rel(v, o.crawl.crawl_end), 30_000);

    let o = fixed(29_999, 60_000);
    let v = &o.visits[0];
    expect("slow teardown: timeout", Some((v.status.abort_cause() == Some(&AbortCause::TeardownTimeout)) as Millis), 1);
    expect("slow teardown: visit end", rel(v, o.crawl.crawl_end), 44_999);

    let o = crawl_scripted(Script::Fixed(ScriptedPage { hang_launch: true, ..ScriptedPage::default() }));
    let start = o.crawl.crawl_start.unwrap_or_default();
    expect("hung browser: watchdog", o.crawl.crawl_end.map(|e| e - start), WATCHDOG_MS);
    a
}

/// Multi-visit crawls with random navigation and snapshot times: every
/// completed visit ends within 45 s of its start, and interaction always
/// ends exactly at the formula.
pub fn visit_bound_sweep(crawls: usize, seed: u64) -> Agreement {
    let mut a = Agreement::default();
    for c in 0..crawls {
        let rng = DetRand::substream(seed, &format!("timing-sweep-{c}"));
        let o = crawl_scripted(Script::Random(Mutex::new(rng)));
        for v in &o.visits {
            let bound = NAV_TIMEOUT_MS + MIN_INTERACTION_MS + TEARDOWN_TIMEOUT_MS;
            if v.status.is_completed() {
                let end = v.teardown_end.map(|t| t - v.visit_start);
                a.check(end.is_some_and(|e| e <= bound), || format!("{}: completed after {end:?} ms", v.visit_id));
            }
            if let (Some(nav), Some(int)) = (v.nav_end, v.interaction_end) {
                a.check(int == interaction_end(v.visit_start, nav), || {
                    format!("{}: interaction end {int} for nav end {nav}", v.visit_id)
                });
            }
        }
    }
    a
}
