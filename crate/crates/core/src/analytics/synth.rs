//! Randomized synthetic record sets for exercising the analyses.

use std::collections::{BTreeMap, BTreeSet};

use crate::detrand::DetRand;
use crate::model::{
    AbortCause, BrowserProfile, CrawlConfig, CrawlRecord, CrawlStatus, FrameRecord, PageVisitRecord, Record,
    RequestOutcome, RequestRecord, ResourceType, VantagePoint, VisitStatus,
};
use crate::suffix::SuffixTable;

use super::etld1_of_url;

/// A crawl record with just enough filled in.
pub fn crawl(domain: &str, profile: BrowserProfile, vp: VantagePoint, rep: u32) -> CrawlRecord {
    let config = CrawlConfig::new(domain, 1, profile, vp, rep, 3, 2);
    CrawlRecord {
        crawl_id: config.crawl_id(),
        config,
        status: CrawlStatus::Completed,
        worker_id: Some("w".into()),
        attempt: 1,
        dequeued_at: Some(0),
        released_at: Some(0),
        crawl_start: Some(0),
        crawl_end: Some(0),
        sync_degraded: false,
        visit_count: 0,
    }
}

pub fn visit(c: &CrawlRecord, ordinal: u32, status: VisitStatus) -> PageVisitRecord {
    let dead_end = status.is_dead_end();
    PageVisitRecord {
        visit_id: format!("{}#{ordinal}", c.crawl_id),
        crawl_id: c.crawl_id.clone(),
        ordinal,
        page_url: if ordinal == 1 { c.config.landing_url() } else { format!("http://{}/p{ordinal}", c.config.domain) },
        page_depth: if ordinal == 1 { 1 } else { 2 },
        visit_start: 0,
        nav_end: None,
        interaction_end: None,
        teardown_end: None,
        status,
        landed_url: None,
        harvested_links: Vec::new(),
        captured_html_size: if dead_end { 0 } else { 1_000 },
        captcha_detected: BTreeSet::new(),
        events: Vec::new(),
    }
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub domains: u32,
    pub reps: u32,
    pub max_visits: u32,
    pub max_requests: u32,
    pub max_frames: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { domains: 6, reps: 2, max_visits: 4, max_requests: 6, max_frames: 3 }
    }
}

const HOSTS: [&str; 8] = [
    "ads.adserve.net",
    "cdn.jslibcdn.org",
    "pixel.trackpixel.com",
    "www.bidstream.com",
    "static.fontshost.com",
    "api.metricsbeacon.com",
    "img.imgcache.net",
    "widgets.socialwidget.com",
];

const PATHS: [&str; 8] = [
    "/ads/banner.js",
    "/lib/jquery.min.js",
    "/pixel.gif?id=1",
    "/track/collect",
    "/fonts/a.woff2",
    "/img/logo.png",
    "/ok/ads/allowed.js",
    "/embed/frame.html",
];

fn pick<'a, T>(rng: &mut DetRand, xs: &'a [T]) -> &'a T {
    &xs[rng.range(0, xs.len() as u64 - 1) as usize]
}

fn random_status(rng: &mut DetRand, vp: VantagePoint) -> VisitStatus {
    let causes = [
        vp.connectivity_failure(),
        AbortCause::NavigationTimeout,
        AbortCause::TeardownTimeout,
        AbortCause::WatchdogKilled,
        AbortCause::Other("net::ERR_ABORTED".into()),
    ];
    if rng.chance(0.6) {
        VisitStatus::Completed { dead_end: rng.chance(0.15) }
    } else {
        VisitStatus::Aborted { cause: pick(rng, &causes).clone() }
    }
}

/// Crawl sets over `spec.domains` synthetic domains, all profiles and VPs.
/// Some members are missing, some dropped; records come grouped per crawl
/// with the crawl record last, as workers write them.
pub fn synthetic_records(seed: u64, spec: &SynthSpec) -> Vec<Record> {
    let table = SuffixTable::bundled();
    let mut rng = DetRand::seed(seed);
    let mut out = Vec::new();
    for d in 0..spec.domains {
        let domain = format!("site{d}.{}", ["com", "co.uk", "net"][d as usize % 3]);
        for rep in 1..=spec.reps {
            for profile in BrowserProfile::ALL {
                let base_start = rng.range(0, 1_000_000);
                for vp in VantagePoint::ALL {
                    if rng.chance(0.05) {
                        continue;
                    }
                    let mut c = crawl(&domain, profile, vp, rep);
                    c.crawl_start = Some(base_start + rng.range(0, 3_000));
                    c.sync_degraded = rng.chance(0.05);
                    if rng.chance(0.04) {
                        c.status = CrawlStatus::Dropped;
                        c.crawl_start = None;
                        out.push(Record::Crawl(c));
                        continue;
                    }
                    let n = rng.range(0, spec.max_visits as u64) as u32;
                    let mut tail = Vec::new();
                    for k in 1..=n {
                        let mut v = visit(&c, k, random_status(&mut rng, vp));
                        if rng.chance(0.3) {
                            v.landed_url = Some(format!("https://www.{domain}/"));
                        }
                        if v.status.is_completed() && rng.chance(0.15) {
                            v.captcha_detected.insert("reCAPTCHA".into());
                        }
                        let doc = v.landed_url.clone().unwrap_or_else(|| v.page_url.clone());
                        for _ in 0..rng.range(0, spec.max_requests as u64) {
                            let url = if rng.chance(0.3) {
                                format!("https://{domain}{}", pick(&mut rng, &PATHS))
                            } else {
                                format!("https://{}{}", pick(&mut rng, &HOSTS), pick(&mut rng, &PATHS))
                            };
                            let third = etld1_of_url(&table, &url) != etld1_of_url(&table, &doc);
                            tail.push(Record::Request(RequestRecord {
                                visit_id: v.visit_id.clone(),
                                request_url: url,
                                resource_type: *pick(&mut rng, &ResourceType::ALL),
                                frame_id: "main".into(),
                                document_url: doc.clone(),
                                outcome: RequestOutcome::Failed { error: "x".into() },
                                is_third_party: third,
                            }));
                        }
                        for f in 0..rng.range(0, spec.max_frames as u64) {
                            let host = if rng.chance(0.2) { format!("www.{domain}") } else { pick(&mut rng, &HOSTS).to_string() };
                            let url = format!("https://{host}/embed");
                            tail.push(Record::Frame(FrameRecord {
                                visit_id: v.visit_id.clone(),
                                frame_id: format!("f{f}"),
                                parent_frame_id: (f > 0 || rng.chance(0.7)).then(|| "main".to_string()),
                                frame_origin: etld1_of_url(&table, &url).unwrap_or_default(),
                                frame_url: url,
                                navigation_events: Vec::new(),
                            }));
                        }
                        out.push(Record::Visit(v));
                    }
                    out.append(&mut tail);
                    c.visit_count = n;
                    out.push(Record::Crawl(c));
                }
            }
        }
    }
    out
}

/// A random filter list drawn from rules that hit the synthetic URLs in
/// different ways (anchors, wildcards, options, exceptions).
pub fn synthetic_filter_lines(seed: u64) -> Vec<String> {
    const POOL: [&str; 16] = [
        "||adserve.net^",
        "/ads/*",
        "||trackpixel.com^$image",
        "/pixel.gif",
        "/track/$third-party",
        "||metricsbeacon.com^$xhr,fetch",
        "@@||adserve.net/ok/",
        "@@/ok/ads/$script",
        "jquery$~third-party",
        "||bidstream.com^$subdocument",
        "||imgcache.net/img/",
        "|https://cdn.jslibcdn.org/lib/",
        "banner.js|",
        "/embed/*$domain=site1.com|site2.co.uk",
        "||socialwidget.com^$~image",
        "@@||site0.com^$document",
    ];
    let mut rng = DetRand::substream(seed, "filters");
    POOL.iter().filter(|_| rng.chance(0.5)).map(|s| s.to_string()).collect()
}

/// Record counts by kind.
pub fn kind_counts(records: &[Record]) -> BTreeMap<&'static str, usize> {
    let mut m = BTreeMap::new();
    for r in records {
        let k = match r {
            Record::Crawl(_) => "crawl",
            Record::Visit(_) => "visit",
            Record::Request(_) => "request",
            Record::Frame(_) => "frame",
        };
        *m.entry(k).or_default() += 1;
    }
    m
}
