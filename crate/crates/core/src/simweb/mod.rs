//! A deterministic simulated web with per-VP behaviour: outcome policies,
//! CAPTCHA walls, third-party frame cloaking and latency. It implements
//! the browser contract (see [`session`]) so the real worker can crawl it
//! at desk scale under the simulated clock.
//!
//! Site structure is a pure function of the world seed and the domain, and
//! is the same for every VP. What differs per VP is the class each site
//! falls into (see [`calibrate`]) and the per-visit draws, which come from
//! `serve:{vp}:page:{ordinal}` substreams of the crawl set seed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::detrand::DetRand;
use crate::model::{fnv1a64, max_pages, AbortCause, BrowserProfile, Millis, ResourceType, VantagePoint};

pub mod calibrate;
pub mod session;

use calibrate::{ClassCounts, Geometry, Probabilities, Targets};

pub use session::SimDriver;

/// 2019-04-07T00:00:00Z; simulated runs start here.
pub const SIM_EPOCH_MS: Millis = 1_554_595_200_000;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("scenario field {field}: {reason}")]
    Invalid { field: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Latency {
    pub base_ms: Millis,
    pub jitter_ms: Millis,
}

/// Per-VP behaviour. Outcome probabilities are visit-level targets: the
/// share of all visits from this VP expected to end that way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct VpPolicy {
    pub nav_latency: Latency,
    /// Bandwidth stand-in: scales every latency.
    pub latency_multiplier: f64,
    pub p_nav_timeout: f64,
    /// Unreachable host; reported per the VP's connectivity class.
    pub p_dns_fail: f64,
    pub p_teardown_timeout: f64,
    pub p_other: f64,
    /// Share of completed pages that are CAPTCHA interstitials.
    pub p_captcha: f64,
    /// Third-party origins never served to this VP.
    #[serde(default)]
    pub cloak_block: BTreeSet<String>,
    /// Share of subresource loads that fail in transit.
    #[serde(default)]
    pub subresource_drop: f64,
    /// Share of eligible sites whose pages fail at all.
    pub troubled_fraction: f64,
    /// Share of connectivity failures coming from entirely dead hosts.
    #[serde(default)]
    pub dead_share: f64,
    /// Browser launch hangs, leaving the crawl to the watchdog.
    #[serde(default)]
    pub p_hang: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct WorkerCrash {
    /// Chance a worker dies during any given job attempt.
    pub p_crash: f64,
    pub restart_ms: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Scenario {
    /// Sites to generate when no domain list is supplied.
    pub site_count: u32,
    /// Distinct pages per multi-page site, landing included.
    pub pages_per_site: u32,
    pub single_page_fraction: f64,
    /// Share of a page's anchors that leave the site.
    pub offsite_link_fraction: f64,
    /// Sites whose http:// landing page redirects to https://.
    pub https_redirect_fraction: f64,
    /// Same-site link targets reachable only through click handlers.
    pub event_links_per_page: u32,
    /// Subresource count per page is drawn uniformly from this range.
    pub subresources_per_page: [u32; 2],
    pub third_party_fraction: f64,
    /// Third-party origins serving scripts, pixels and beacons.
    pub tracker_origins: Vec<String>,
    /// Third-party origins embedded as sub-frames.
    pub frame_origins: Vec<String>,
    /// Chance a page embeds any one given frame origin.
    pub frame_embed_rate: f64,
    /// Completed troubled pages that come back without content.
    pub dead_end_fraction: f64,
    pub policies: BTreeMap<VantagePoint, VpPolicy>,
    pub worker_crash: WorkerCrash,
}

fn check_p(field: &str, p: f64) -> Result<(), ScenarioError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(ScenarioError::Invalid { field: field.into(), reason: format!("{p} is not a probability") })
    }
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: shown.clone(), source })?;
        let s: Scenario = serde_json::from_str(&text).map_err(|source| ScenarioError::Json { path: shown, source })?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        for (f, p) in [
            ("single-page-fraction", self.single_page_fraction),
            ("offsite-link-fraction", self.offsite_link_fraction),
            ("https-redirect-fraction", self.https_redirect_fraction),
            ("third-party-fraction", self.third_party_fraction),
            ("frame-embed-rate", self.frame_embed_rate),
            ("dead-end-fraction", self.dead_end_fraction),
            ("worker-crash.p-crash", self.worker_crash.p_crash),
        ] {
            check_p(f, p)?;
        }
        for (vp, pol) in &self.policies {
            for (f, p) in [
                ("p-nav-timeout", pol.p_nav_timeout),
                ("p-dns-fail", pol.p_dns_fail),
                ("p-teardown-timeout", pol.p_teardown_timeout),
                ("p-other", pol.p_other),
                ("p-captcha", pol.p_captcha),
                ("subresource-drop", pol.subresource_drop),
                ("troubled-fraction", pol.troubled_fraction),
                ("dead-share", pol.dead_share),
                ("p-hang", pol.p_hang),
            ] {
                check_p(&format!("policies.{vp}.{f}"), p)?;
            }
            let total = pol.p_nav_timeout + pol.p_dns_fail + pol.p_teardown_timeout + pol.p_other;
            if total > 1.0 + 1e-9 {
                return Err(ScenarioError::Invalid {
                    field: format!("policies.{vp}"),
                    reason: format!("failure probabilities sum to {total}"),
                });
            }
            if pol.latency_multiplier <= 0.0 {
                return Err(ScenarioError::Invalid {
                    field: format!("policies.{vp}.latency-multiplier"),
                    reason: "must be positive".into(),
                });
            }
        }
        if self.pages_per_site == 0 || self.subresources_per_page[0] > self.subresources_per_page[1] {
            return Err(ScenarioError::Invalid {
                field: "pages-per-site/subresources-per-page".into(),
                reason: "empty range".into(),
            });
        }
        Ok(())
    }

    pub fn policy(&self, vp: VantagePoint) -> &VpPolicy {
        self.policies.get(&vp).unwrap_or(&DEFAULT_POLICY)
    }

    /// A scenario in which nothing ever goes wrong.
    pub fn benign() -> Scenario {
        let mut s = reference_scenario();
        for p in s.policies.values_mut() {
            *p = DEFAULT_POLICY.clone();
        }
        s.worker_crash.p_crash = 0.0;
        s
    }
}

static DEFAULT_POLICY: VpPolicy = VpPolicy {
    nav_latency: Latency { base_ms: 800, jitter_ms: 2_400 },
    latency_multiplier: 1.0,
    p_nav_timeout: 0.0,
    p_dns_fail: 0.0,
    p_teardown_timeout: 0.0,
    p_other: 0.0,
    p_captcha: 0.0,
    cloak_block: BTreeSet::new(),
    subresource_drop: 0.0,
    troubled_fraction: 0.0,
    dead_share: 0.0,
    p_hang: 0.0,
};

const FRAME_ORIGINS: [&str; 30] = [
    "adsyncnet.com",
    "pixelbridge.net",
    "bidstream.com",
    "adrelay.com",
    "cookiematch.net",
    "tagframe.io",
    "vidembed.net",
    "socialwidget.com",
    "chatbubble.io",
    "consentbox.com",
    "mapsframe.net",
    "paywidget.com",
    "commently.net",
    "feedbackr.io",
    "surveybox.net",
    "streamplay.tv",
    "newsletterly.com",
    "reviewstars.net",
    "weatherbox.org",
    "calendarly.io",
    "podembed.com",
    "sharebar.net",
    "recommendo.com",
    "quizframe.io",
    "ticketwidget.net",
    "livescores.org",
    "donatebox.org",
    "bookingframe.com",
    "helpdeskchat.net",
    "trustbadge.io",
];

/// The first five frame origins refuse cloud address space.
const CLOUD_CLOAKED: usize = 5;

const TRACKER_ORIGINS: [&str; 10] = [
    "cdnstatic.net",
    "fontshost.com",
    "analytix.io",
    "metricsbeacon.com",
    "adserve.net",
    "jslibcdn.org",
    "imgcache.net",
    "trackpixel.com",
    "tagmanagr.com",
    "heatmapr.io",
];

/// Parameters reproducing the published per-VP outcome shape: CAPTCHA
/// shares, abort-cause rates and the cloud-cloaked frame origins. Latency
/// figures, class fractions and crash rates are free parameters.
pub fn reference_scenario() -> Scenario {
    let policy = |nav, conn, td, other, captcha, troubled, mult: f64| VpPolicy {
        nav_latency: Latency { base_ms: 800, jitter_ms: 2_400 },
        latency_multiplier: mult,
        p_nav_timeout: nav,
        p_dns_fail: conn,
        p_teardown_timeout: td,
        p_other: other,
        p_captcha: captcha,
        cloak_block: BTreeSet::new(),
        subresource_drop: 0.0,
        troubled_fraction: troubled,
        dead_share: 0.5,
        p_hang: 0.0002,
    };
    let mut cloud = policy(0.093, 0.038, 0.035, 0.032, 0.08, 0.55, 1.0);
    cloud.cloak_block = FRAME_ORIGINS[..CLOUD_CLOAKED].iter().map(|s| s.to_string()).collect();
    let mut residential = policy(0.134, 0.043, 0.074, 0.037, 0.08, 0.68, 1.8);
    residential.subresource_drop = 0.02;
    let policies = BTreeMap::from([
        (VantagePoint::University, policy(0.107, 0.033, 0.034, 0.040, 0.08, 0.58, 1.0)),
        (VantagePoint::Residential, residential),
        (VantagePoint::Cloud, cloud),
        (VantagePoint::Tor, policy(0.199, 0.041, 0.030, 0.031, 0.12, 0.72, 2.5)),
    ]);
    Scenario {
        site_count: 500,
        pages_per_site: 12,
        single_page_fraction: 0.3,
        offsite_link_fraction: 0.15,
        https_redirect_fraction: 0.6,
        event_links_per_page: 2,
        subresources_per_page: [5, 9],
        third_party_fraction: 0.4,
        tracker_origins: TRACKER_ORIGINS.iter().map(|s| s.to_string()).collect(),
        frame_origins: FRAME_ORIGINS.iter().map(|s| s.to_string()).collect(),
        frame_embed_rate: 0.04,
        dead_end_fraction: 0.05,
        policies,
        worker_crash: WorkerCrash { p_crash: 0.001, restart_ms: 30_000 },
    }
}

// ---------------------------------------------------------------------------
// World
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subresource {
    pub url: String,
    pub rtype: ResourceType,
    /// eTLD+1 serving it.
    pub origin: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimFrame {
    pub origin: String,
    pub url: String,
    pub subresources: Vec<Subresource>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimPage {
    pub path: String,
    pub html_size: u64,
    pub anchor_links: Vec<String>,
    pub event_links: Vec<String>,
    /// Inert click targets besides the event links.
    pub inert_targets: u32,
    pub subresources: Vec<Subresource>,
    pub frames: Vec<SimFrame>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SiteClass {
    Dead,
    Wall,
    Troubled,
    Robust,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimSite {
    pub domain: String,
    pub https: bool,
    pub multi_page: bool,
    /// Keyed by path; "/" is the landing page.
    pub pages: BTreeMap<String, SimPage>,
}

impl SimSite {
    pub fn origin(&self) -> String {
        format!("{}://{}", if self.https { "https" } else { "http" }, self.domain)
    }
}

/// What a VP experiences on one site.
#[derive(Debug, Clone, PartialEq)]
pub struct VpBehaviour {
    pub classes: Vec<SiteClass>,
    pub troubled: Probabilities,
    pub counts: ClassCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimWorld {
    pub seed: u64,
    pub scenario: Scenario,
    pub sites: Vec<SimSite>,
    index: HashMap<String, usize>,
    pub behaviour: BTreeMap<VantagePoint, VpBehaviour>,
}

fn token(parts: &[&str]) -> String {
    format!("{:016x}", fnv1a64(parts.join("|").as_bytes()))
}

/// Indices sorted by a per-site uniform drawn from `label`.
fn ranking(seed: u64, domains: &[String], label: &str) -> Vec<usize> {
    let keys: Vec<u64> =
        domains.iter().map(|d| DetRand::substream(seed, &format!("{label}:{d}")).next_bits()).collect();
    let mut idx: Vec<usize> = (0..domains.len()).collect();
    idx.sort_by_key(|&i| (keys[i], i));
    idx
}

const FIRST_PARTY: [(ResourceType, &str, &str, f64); 5] = [
    (ResourceType::Stylesheet, "css", "css", 1.5),
    (ResourceType::Script, "js", "js", 2.0),
    (ResourceType::Image, "img", "png", 4.0),
    (ResourceType::Font, "fonts", "woff2", 0.6),
    (ResourceType::Media, "media", "mp4", 0.2),
];

const THIRD_PARTY: [(ResourceType, &str, &str, f64); 6] = [
    (ResourceType::Script, "tag", "js", 2.5),
    (ResourceType::Image, "pixel", "gif", 2.5),
    (ResourceType::Xhr, "collect", "json", 1.2),
    (ResourceType::Fetch, "beacon", "json", 0.8),
    (ResourceType::Websocket, "live", "ws", 0.1),
    (ResourceType::Other, "ping", "txt", 0.2),
];

fn gen_page(
    s: &Scenario,
    site_domain: &str,
    base: &str,
    path: &str,
    links: Vec<String>,
    others: &[String],
    rng: &mut DetRand,
) -> SimPage {
    let mut anchors = Vec::new();
    let mut event_links = Vec::new();
    for (i, l) in links.into_iter().enumerate() {
        if i < s.event_links_per_page as usize {
            event_links.push(l);
        } else {
            anchors.push(l);
        }
    }
    if !others.is_empty() {
        let offsite = ((anchors.len().max(1)) as f64 * s.offsite_link_fraction).ceil() as usize;
        for _ in 0..offsite {
            let o = &others[rng.range(0, others.len() as u64 - 1) as usize];
            let at = rng.range(0, anchors.len() as u64) as usize;
            anchors.insert(at, format!("http://{o}/"));
        }
    }
    // fragment and self links exercise de-duplication
    anchors.push(format!("{base}{path}#main"));

    let n = rng.range(s.subresources_per_page[0] as u64, s.subresources_per_page[1] as u64);
    let mut subresources = Vec::new();
    for k in 0..n {
        let third = !s.tracker_origins.is_empty() && rng.chance(s.third_party_fraction);
        let table: &[(ResourceType, &str, &str, f64)] = if third { &THIRD_PARTY } else { &FIRST_PARTY };
        let w: Vec<f64> = table.iter().map(|t| t.3).collect();
        let (rtype, dir, ext, _) = table[rng.weighted_index(&w).expect("weights positive")];
        let t = token(&[site_domain, path, &k.to_string()]);
        subresources.push(if third {
            let origin = s.tracker_origins[rng.range(0, s.tracker_origins.len() as u64 - 1) as usize].clone();
            let scheme = if rtype == ResourceType::Websocket { "wss" } else { "https" };
            let host = if dir == "pixel" { format!("ads.{origin}") } else { format!("cdn.{origin}") };
            Subresource { url: format!("{scheme}://{host}/{dir}/{t}.{ext}?site={site_domain}"), rtype, origin }
        } else {
            Subresource { url: format!("{base}/static/{dir}/{t}.{ext}"), rtype, origin: site_domain.to_string() }
        });
    }
    let mut frames = Vec::new();
    for origin in &s.frame_origins {
        if rng.chance(s.frame_embed_rate) {
            let t = token(&[site_domain, path, origin]);
            let url = format!("https://www.{origin}/embed/{t}");
            let inner = vec![
                Subresource {
                    url: format!("https://static.{origin}/widget/{t}.js"),
                    rtype: ResourceType::Script,
                    origin: origin.clone(),
                },
                Subresource {
                    url: format!("https://static.{origin}/widget/{t}.png"),
                    rtype: ResourceType::Image,
                    origin: origin.clone(),
                },
            ];
            frames.push(SimFrame { origin: origin.clone(), url, subresources: inner });
        }
    }
    SimPage {
        path: path.to_string(),
        html_size: rng.range(1_500, 6_000),
        anchor_links: anchors,
        event_links,
        inert_targets: rng.range(3, 12) as u32,
        subresources,
        frames,
    }
}

fn gen_site(s: &Scenario, seed: u64, domain: &str, multi_page: bool, others: &[String]) -> SimSite {
    let mut rng = DetRand::substream(seed, &format!("site:{domain}"));
    let https = rng.chance(s.https_redirect_fraction);
    let base = format!("{}://{domain}", if https { "https" } else { "http" });
    let paths: Vec<String> = (1..s.pages_per_site).map(|k| format!("/{}", token(&[domain, &k.to_string()])[..8].to_owned())).collect();
    let mut pages = BTreeMap::new();
    let same_site = |rng: &mut DetRand, exclude: &str| -> Vec<String> {
        if !multi_page {
            return Vec::new();
        }
        let mut pool: Vec<&String> = paths.iter().filter(|p| p.as_str() != exclude).collect();
        let want = (s.event_links_per_page as usize + 5).min(pool.len());
        let mut out = Vec::new();
        for _ in 0..want {
            let i = rng.range(0, pool.len() as u64 - 1) as usize;
            out.push(format!("{base}{}", pool.remove(i)));
        }
        out
    };
    let links = same_site(&mut rng, "/");
    pages.insert("/".to_string(), gen_page(s, domain, &base, "/", links, others, &mut rng));
    if multi_page {
        for p in &paths {
            let links = same_site(&mut rng, p);
            pages.insert(p.clone(), gen_page(s, domain, &base, p, links, others, &mut rng));
        }
    }
    SimSite { domain: domain.to_string(), https, multi_page, pages }
}

/// Assign classes for one VP given target counts of dead and wall sites.
fn assign(
    n: usize,
    ranks: &[Vec<usize>; 3],
    multi: &[bool],
    dead: usize,
    wall: usize,
    troubled_fraction: f64,
) -> (Vec<SiteClass>, ClassCounts) {
    let mut classes = vec![SiteClass::Robust; n];
    for &i in ranks[0].iter().take(dead) {
        classes[i] = SiteClass::Dead;
    }
    let mut placed = 0;
    for &i in &ranks[1] {
        if placed == wall {
            break;
        }
        if classes[i] == SiteClass::Robust {
            classes[i] = SiteClass::Wall;
            placed += 1;
        }
    }
    let eligible = classes.iter().filter(|c| **c == SiteClass::Robust).count();
    let troubled = (troubled_fraction * eligible as f64).round() as usize;
    placed = 0;
    for &i in &ranks[2] {
        if placed == troubled {
            break;
        }
        if classes[i] == SiteClass::Robust {
            classes[i] = SiteClass::Troubled;
            placed += 1;
        }
    }
    let mut c = ClassCounts::default();
    for (cls, &m) in classes.iter().zip(multi) {
        match (cls, m) {
            (SiteClass::Dead, _) => c.dead += 1,
            (SiteClass::Wall, _) => c.wall += 1,
            (SiteClass::Troubled, false) => c.troubled_single += 1,
            (SiteClass::Troubled, true) => c.troubled_multi += 1,
            (SiteClass::Robust, false) => c.robust_single += 1,
            (SiteClass::Robust, true) => c.robust_multi += 1,
        }
    }
    (classes, c)
}

fn calibrate_vp(
    n: usize,
    ranks: &[Vec<usize>; 3],
    multi: &[bool],
    pol: &VpPolicy,
    geometry: &Geometry,
) -> VpBehaviour {
    let targets = Targets {
        connectivity: pol.p_dns_fail,
        teardown: pol.p_teardown_timeout,
        navigation: pol.p_nav_timeout,
        other: pol.p_other,
        captcha: pol.p_captcha,
    };
    let mut tau = pol.troubled_fraction;
    let (mut dead, mut wall) = (0usize, 0usize);
    let mut f = 0.0;
    let mut state = assign(n, ranks, multi, dead, wall, tau);
    for _ in 0..64 {
        state = assign(n, ranks, multi, dead, wall, tau);
        let c = state.1;
        f = match calibrate::solve_failure(&c, geometry, targets.failure()) {
            Some(f) => f,
            None if tau < 1.0 => {
                tau = 1.0;
                continue;
            }
            None => 1.0,
        };
        if f > 0.95 && tau < 1.0 {
            tau = 1.0;
            continue;
        }
        let e = calibrate::expectation(&c, geometry, f);
        let next_dead = ((pol.dead_share * targets.connectivity * e.visits).round() as usize).min(n);
        let next_wall = if targets.captcha >= 1.0 {
            n - next_dead
        } else {
            ((targets.captcha * e.completed).round() as usize).min(n - next_dead)
        };
        if (next_dead, next_wall) == (dead, wall) {
            break;
        }
        (dead, wall) = (next_dead, next_wall);
    }
    let (classes, counts) = state;
    let troubled = calibrate::split(&counts, geometry, &targets, f);
    VpBehaviour { classes, troubled, counts }
}

/// Synthetic domain names for worlds built without a domain list.
pub fn synthetic_domains(count: u32) -> Vec<String> {
    const TLDS: [&str; 6] = ["com", "net", "org", "co.uk", "de", "io"];
    (0..count).map(|i| format!("site{i:05}.{}", TLDS[i as usize % TLDS.len()])).collect()
}

impl SimWorld {
    /// Generate the world for `domains` (or `site-count` synthetic ones if
    /// empty) and calibrate each VP for the given crawl geometry.
    pub fn build(scenario: &Scenario, seed: u64, domains: &[String], width: u32, depth: u32) -> SimWorld {
        let domains: Vec<String> =
            if domains.is_empty() { synthetic_domains(scenario.site_count) } else { domains.to_vec() };
        let n = domains.len();
        let structure = ranking(seed, &domains, "structure");
        let singles = (scenario.single_page_fraction * n as f64).round() as usize;
        let mut multi = vec![true; n];
        for &i in structure.iter().take(singles) {
            multi[i] = false;
        }
        let sites: Vec<SimSite> = domains
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let others: Vec<String> = [i + 1, i + 7, i + 31]
                    .iter()
                    .filter(|_| n > 1)
                    .map(|k| domains[k % n].clone())
                    .filter(|o| o != d)
                    .collect();
                gen_site(scenario, seed, d, multi[i], &others)
            })
            .collect();
        let ranks = [ranking(seed, &domains, "dead"), ranking(seed, &domains, "wall"), ranking(seed, &domains, "troubled")];
        let pages_reachable = max_pages(width, depth).min(scenario.pages_per_site as u64) as u32;
        let geometry = Geometry {
            width,
            depth: if pages_reachable > 1 { depth } else { 1 },
            dead_end: scenario.dead_end_fraction,
        };
        let behaviour = VantagePoint::ALL
            .iter()
            .map(|&vp| (vp, calibrate_vp(n, &ranks, &multi, scenario.policy(vp), &geometry)))
            .collect();
        let index = domains.iter().enumerate().map(|(i, d)| (d.clone(), i)).collect();
        SimWorld { seed, scenario: scenario.clone(), sites, index, behaviour }
    }

    pub fn site(&self, domain: &str) -> Option<&SimSite> {
        self.index.get(domain).map(|&i| &self.sites[i])
    }

    pub fn class_of(&self, domain: &str, vp: VantagePoint) -> Option<SiteClass> {
        let i = *self.index.get(domain)?;
        Some(self.behaviour[&vp].classes[i])
    }

    fn latency(&self, vp: VantagePoint, rng: &mut DetRand) -> Millis {
        let pol = self.scenario.policy(vp);
        let raw = pol.nav_latency.base_ms + rng.range(0, pol.nav_latency.jitter_ms);
        ((raw as f64 * pol.latency_multiplier) as Millis).min(25_000)
    }

    /// Serve `url` to a browser at `vp`. All randomness comes from `rng`.
    pub fn serve(&self, url: &str, vp: VantagePoint, _profile: BrowserProfile, rng: &mut DetRand) -> SimResponse {
        let pol = self.scenario.policy(vp);
        let parsed = Url::parse(url).ok();
        let host = parsed.as_ref().and_then(|u| u.host_str()).unwrap_or("").to_ascii_lowercase();
        let Some(&i) = self.index.get(&host) else {
            return SimResponse { latency_ms: 200, outcome: SimOutcome::NavError(vp.connectivity_failure()) };
        };
        let site = &self.sites[i];
        let path = parsed.as_ref().map(|u| u.path().to_string()).unwrap_or_else(|| "/".into());
        let class = self.behaviour[&vp].classes[i];
        let latency = self.latency(vp, rng);

        let fail = |cause| SimResponse { latency_ms: latency, outcome: SimOutcome::NavError(cause) };
        let mut dead_end = false;
        let mut stall_teardown = false;
        match class {
            SiteClass::Dead => return fail(vp.connectivity_failure()),
            SiteClass::Wall => return self.captcha_page(site, vp, latency, rng),
            SiteClass::Robust => {}
            SiteClass::Troubled => {
                let p = &self.behaviour[&vp].troubled;
                match rng.weighted_index(&[p.connectivity, p.other, p.navigation, p.teardown, (1.0 - p.total()).max(0.0)])
                {
                    Some(0) => return fail(vp.connectivity_failure()),
                    Some(1) => {
                        const CODES: [&str; 4] =
                            ["net::ERR_CONNECTION_RESET", "net::ERR_SSL_PROTOCOL_ERROR", "http-500", "net::ERR_ABORTED"];
                        return fail(AbortCause::Other(CODES[rng.range(0, 3) as usize].into()));
                    }
                    Some(2) => return fail(AbortCause::NavigationTimeout),
                    Some(3) => stall_teardown = true,
                    _ => dead_end = rng.chance(self.scenario.dead_end_fraction),
                }
            }
        }
        let Some(page) = site.pages.get(&path) else {
            return SimResponse { latency_ms: latency, outcome: SimOutcome::NavError(AbortCause::Other("http-404".into())) };
        };
        let mut requests = Vec::new();
        let landed = format!("{}{}", site.origin(), path);
        let blocked = |origin: &str| pol.cloak_block.contains(origin);
        for sub in page.subresources.iter().filter(|s| !blocked(&s.origin)) {
            let dropped = rng.chance(pol.subresource_drop);
            requests.push(ServedRequest { frame: None, sub: sub.clone(), dropped });
        }
        let mut frames = Vec::new();
        for (k, fr) in page.frames.iter().enumerate().filter(|(_, f)| !blocked(&f.origin)) {
            frames.push(ServedFrame { index: k, frame: fr.clone() });
            for sub in &fr.subresources {
                let dropped = rng.chance(pol.subresource_drop);
                requests.push(ServedRequest { frame: Some(k), sub: sub.clone(), dropped });
            }
        }
        let html = if dead_end { String::new() } else { render_html(site, page, "") };
        SimResponse {
            latency_ms: latency,
            outcome: SimOutcome::Page(Box::new(ServedPage {
                landed_url: landed,
                redirected: site.https,
                html,
                requests,
                frames,
                anchor_links: if dead_end { Vec::new() } else { page.anchor_links.clone() },
                event_links: if dead_end { Vec::new() } else { page.event_links.clone() },
                inert_targets: page.inert_targets,
                captcha: false,
                stall_teardown,
            })),
        }
    }

    fn captcha_page(&self, site: &SimSite, vp: VantagePoint, latency: Millis, rng: &mut DetRand) -> SimResponse {
        let hcaptcha = fnv1a64(site.domain.as_bytes()).is_multiple_of(4);
        let (marker, script, origin) = if hcaptcha {
            ("<div class=\"h-captcha\" data-sitekey=\"sk\"></div>", "https://js.hcaptcha.com/1/api.js", "hcaptcha.com")
        } else {
            (
                "<div class=\"g-recaptcha\" data-sitekey=\"sk\"></div>",
                "https://www.google.com/recaptcha/api.js",
                "google.com",
            )
        };
        let _ = (vp, rng);
        let sub = Subresource { url: script.into(), rtype: ResourceType::Script, origin: origin.into() };
        let page = SimPage {
            path: "/".into(),
            html_size: 0,
            anchor_links: Vec::new(),
            event_links: Vec::new(),
            inert_targets: 1,
            subresources: vec![sub.clone()],
            frames: Vec::new(),
        };
        SimResponse {
            latency_ms: latency,
            outcome: SimOutcome::Page(Box::new(ServedPage {
                landed_url: format!("{}/", site.origin()),
                redirected: site.https,
                html: render_html(site, &page, marker),
                requests: vec![ServedRequest { frame: None, sub, dropped: false }],
                frames: Vec::new(),
                anchor_links: Vec::new(),
                event_links: Vec::new(),
                inert_targets: 1,
                captcha: true,
                stall_teardown: false,
            })),
        }
    }
}

fn render_html(site: &SimSite, page: &SimPage, extra: &str) -> String {
    let mut html = format!("<!doctype html><html><head><title>{}</title></head><body>{extra}", site.domain);
    for a in &page.anchor_links {
        html.push_str(&format!("<a href=\"{a}\">link</a>"));
    }
    let filler = (page.html_size as usize).saturating_sub(html.len() + 14);
    html.push_str(&"<p>lorem</p>".repeat(filler / 12));
    html.push_str("</body></html>");
    html
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServedRequest {
    /// Index into the page's frames, `None` for the main frame.
    pub frame: Option<usize>,
    pub sub: Subresource,
    /// Failed in transit.
    pub dropped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServedFrame {
    pub index: usize,
    pub frame: SimFrame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServedPage {
    pub landed_url: String,
    /// The http:// request was answered with a redirect to https://.
    pub redirected: bool,
    pub html: String,
    pub requests: Vec<ServedRequest>,
    pub frames: Vec<ServedFrame>,
    pub anchor_links: Vec<String>,
    pub event_links: Vec<String>,
    pub inert_targets: u32,
    pub captcha: bool,
    /// The page wedges the browser during tear-down.
    pub stall_teardown: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimOutcome {
    NavError(AbortCause),
    Page(Box<ServedPage>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResponse {
    pub latency_ms: Millis,
    pub outcome: SimOutcome,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(s: &Scenario, n: u32) -> SimWorld {
        SimWorld::build(s, 9, &synthetic_domains(n), 3, 2)
    }

    fn any_rng() -> DetRand {
        DetRand::seed(1)
    }

    #[test]
    fn same_seed_same_world() {
        let s = reference_scenario();
        assert_eq!(world(&s, 40), world(&s, 40));
        assert_ne!(world(&s, 40).sites, SimWorld::build(&s, 10, &synthetic_domains(40), 3, 2).sites);
    }

    #[test]
    fn empty_world() {
        let w = SimWorld::build(&Scenario { site_count: 0, ..reference_scenario() }, 1, &[], 3, 2);
        assert!(w.sites.is_empty());
    }

    #[test]
    fn reference_values_stored() {
        let s = reference_scenario();
        assert_eq!(s.policy(VantagePoint::Tor).p_captcha, 0.12);
        assert_eq!(s.policy(VantagePoint::Cloud).p_captcha, 0.08);
        assert_eq!(s.policy(VantagePoint::Tor).p_nav_timeout, 0.199);
        assert_eq!(s.policy(VantagePoint::Residential).p_nav_timeout, 0.134);
        assert_eq!(s.policy(VantagePoint::University).p_nav_timeout, 0.107);
        assert_eq!(s.policy(VantagePoint::Cloud).p_nav_timeout, 0.093);
        assert_eq!(s.policy(VantagePoint::Residential).p_teardown_timeout, 0.074);
        assert!(!s.policy(VantagePoint::Cloud).cloak_block.is_empty());
    }

    #[test]
    fn scenario_round_trips_through_file() {
        let s = reference_scenario();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        fs::write(&p, s.to_json()).unwrap();
        assert_eq!(Scenario::load(&p).unwrap(), s);
        fs::write(&p, s.to_json().replace("\"p-captcha\": 0.12", "\"p-captcha\": 1.5")).unwrap();
        assert!(matches!(Scenario::load(&p), Err(ScenarioError::Invalid { .. })));
    }

    #[test]
    fn cloaked_origin_absent_for_cloud_only() {
        let mut s = Scenario::benign();
        s.frame_embed_rate = 1.0;
        let cloaked = FRAME_ORIGINS[0].to_string();
        s.policies.get_mut(&VantagePoint::Cloud).unwrap().cloak_block.insert(cloaked.clone());
        let w = world(&s, 5);
        let url = format!("http://{}/", w.sites[0].domain);
        let origins = |vp| match w.serve(&url, vp, BrowserProfile::HEADLESS, &mut any_rng()).outcome {
            SimOutcome::Page(p) => p.frames.iter().map(|f| f.frame.origin.clone()).collect::<Vec<_>>(),
            other => panic!("{other:?}"),
        };
        assert!(!origins(VantagePoint::Cloud).contains(&cloaked));
        assert!(origins(VantagePoint::University).contains(&cloaked));
    }

    #[test]
    fn certain_nav_timeout() {
        let mut s = Scenario::benign();
        s.policies.get_mut(&VantagePoint::Tor).unwrap().p_nav_timeout = 1.0;
        let w = world(&s, 20);
        let mut rng = any_rng();
        for site in &w.sites {
            for path in site.pages.keys() {
                let url = format!("{}{path}", site.origin());
                let r = w.serve(&url, VantagePoint::Tor, BrowserProfile::HEADLESS, &mut rng);
                assert_eq!(r.outcome, SimOutcome::NavError(AbortCause::NavigationTimeout));
            }
        }
    }

    #[test]
    fn certain_captcha_has_no_links() {
        let mut s = Scenario::benign();
        s.policies.get_mut(&VantagePoint::Cloud).unwrap().p_captcha = 1.0;
        let w = world(&s, 20);
        for site in &w.sites {
            match w.serve(&format!("http://{}/", site.domain), VantagePoint::Cloud, BrowserProfile::HEADLESS, &mut any_rng()).outcome {
                SimOutcome::Page(p) => {
                    assert!(p.captcha && p.anchor_links.is_empty() && p.event_links.is_empty());
                }
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn unknown_host_is_connectivity_failure() {
        let w = world(&Scenario::benign(), 3);
        let r = w.serve("http://nowhere.example/", VantagePoint::Cloud, BrowserProfile::HEADLESS, &mut any_rng());
        assert_eq!(r.outcome, SimOutcome::NavError(AbortCause::SocksProxyError));
        let r = w.serve("http://nowhere.example/", VantagePoint::University, BrowserProfile::HEADLESS, &mut any_rng());
        assert_eq!(r.outcome, SimOutcome::NavError(AbortCause::DnsResolveFailed));
    }

    #[test]
    fn classes_follow_calibration() {
        let s = reference_scenario();
        let w = world(&s, 500);
        for vp in VantagePoint::ALL {
            let b = &w.behaviour[&vp];
            let c = b.counts;
            assert_eq!(c.dead + c.wall + c.robust_single + c.robust_multi + c.troubled_single + c.troubled_multi, 500);
            assert!(c.robust_multi > 60, "{vp}: {c:?}");
            assert!(c.robust_single + c.wall > 60, "{vp}: {c:?}");
            assert!(b.troubled.total() < 0.95, "{vp}: {:?}", b.troubled);
        }
        // walls nest: Tor's CAPTCHA sites include the others'
        let walls = |vp| w.sites.iter().filter(|x| w.class_of(&x.domain, vp) == Some(SiteClass::Wall)).count();
        assert!(walls(VantagePoint::Tor) > walls(VantagePoint::Cloud));
    }

    #[test]
    fn multi_page_sites_offer_enough_links() {
        let w = world(&reference_scenario(), 50);
        for site in w.sites.iter().filter(|s| s.multi_page) {
            for page in site.pages.values() {
                let same: BTreeSet<_> = page
                    .event_links
                    .iter()
                    .chain(&page.anchor_links)
                    .filter(|l| l.contains(&site.domain) && !l.contains('#'))
                    .collect();
                assert!(same.len() >= 3);
            }
        }
    }
}
