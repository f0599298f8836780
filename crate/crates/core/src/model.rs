//! Domain types shared by every stage of the pipeline: vantage points,
//! browser profiles, crawl configurations, visit/crawl status taxonomies
//! and the JSON-lines record model.
//!
//! Records are serialized one JSON object per line with a `kind`
//! discriminator (`crawl`, `visit`, `request`, `frame`) and kebab-case
//! field names. That format is the contract between workers, the record
//! files on disk and the analytics store.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Milliseconds since the Unix epoch (wall clock) or since the simulation
/// epoch (simulated clock).
pub type Millis = u64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("unknown vantage point `{0}`")]
    UnknownVantagePoint(String),
    #[error("unknown browser profile `{0}`")]
    UnknownProfile(String),
    #[error("illegal browser profile combination: headless with windows-spoof")]
    IllegalProfile,
    #[error("unknown abort cause `{0}`")]
    UnknownAbortCause(String),
}

/// The network location a crawl originates from.
///
/// Declaration order is the fixed column order used in reports.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "kebab-case")]
pub enum VantagePoint {
    University,
    Residential,
    Cloud,
    Tor,
}

/// How a vantage point reaches the web. Tunneled VPs resolve names at the
/// far end of a SOCKS tunnel, so resolution failures surface as proxy errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Direct,
    Tunneled,
}

impl VantagePoint {
    pub const ALL: [VantagePoint; 4] = [
        VantagePoint::University,
        VantagePoint::Residential,
        VantagePoint::Cloud,
        VantagePoint::Tor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VantagePoint::University => "university",
            VantagePoint::Residential => "residential",
            VantagePoint::Cloud => "cloud",
            VantagePoint::Tor => "tor",
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            VantagePoint::University => "u",
            VantagePoint::Residential => "r",
            VantagePoint::Cloud => "c",
            VantagePoint::Tor => "t",
        }
    }

    pub fn connectivity(self) -> Connectivity {
        match self {
            VantagePoint::University | VantagePoint::Residential => Connectivity::Direct,
            VantagePoint::Cloud | VantagePoint::Tor => Connectivity::Tunneled,
        }
    }

    /// The abort cause a failed name lookup or unreachable host produces.
    pub fn connectivity_failure(self) -> AbortCause {
        match self.connectivity() {
            Connectivity::Direct => AbortCause::DnsResolveFailed,
            Connectivity::Tunneled => AbortCause::SocksProxyError,
        }
    }
}

impl fmt::Display for VantagePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VantagePoint {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "u" | "university" => Ok(VantagePoint::University),
            "r" | "residential" => Ok(VantagePoint::Residential),
            "c" | "cloud" => Ok(VantagePoint::Cloud),
            "t" | "tor" => Ok(VantagePoint::Tor),
            other => Err(ModelError::UnknownVantagePoint(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisplayMode {
    Headless,
    Headed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UaSpoof {
    Native,
    WindowsSpoof,
}

/// Browser configuration. Only three combinations are legal, so the
/// fields are private and construction goes through [`BrowserProfile::new`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawProfile", into = "RawProfile")]
pub struct BrowserProfile {
    display_mode: DisplayMode,
    ua_spoof: UaSpoof,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct RawProfile {
    display_mode: DisplayMode,
    ua_spoof: UaSpoof,
}

impl TryFrom<RawProfile> for BrowserProfile {
    type Error = ModelError;
    fn try_from(raw: RawProfile) -> Result<Self, Self::Error> {
        BrowserProfile::new(raw.display_mode, raw.ua_spoof)
    }
}

impl From<BrowserProfile> for RawProfile {
    fn from(p: BrowserProfile) -> Self {
        RawProfile { display_mode: p.display_mode, ua_spoof: p.ua_spoof }
    }
}

impl BrowserProfile {
    pub const HEADLESS: BrowserProfile =
        BrowserProfile { display_mode: DisplayMode::Headless, ua_spoof: UaSpoof::Native };
    pub const HEADED: BrowserProfile =
        BrowserProfile { display_mode: DisplayMode::Headed, ua_spoof: UaSpoof::Native };
    pub const HEADED_WINDOWS: BrowserProfile =
        BrowserProfile { display_mode: DisplayMode::Headed, ua_spoof: UaSpoof::WindowsSpoof };

    pub const ALL: [BrowserProfile; 3] =
        [BrowserProfile::HEADLESS, BrowserProfile::HEADED, BrowserProfile::HEADED_WINDOWS];

    pub fn new(display_mode: DisplayMode, ua_spoof: UaSpoof) -> Result<Self, ModelError> {
        match (display_mode, ua_spoof) {
            (DisplayMode::Headless, UaSpoof::WindowsSpoof) => Err(ModelError::IllegalProfile),
            _ => Ok(BrowserProfile { display_mode, ua_spoof }),
        }
    }

    pub fn display_mode(&self) -> DisplayMode {
        self.display_mode
    }

    pub fn ua_spoof(&self) -> UaSpoof {
        self.ua_spoof
    }

    /// Short code used in sync tags and on the command line.
    pub fn code(&self) -> &'static str {
        match (self.display_mode, self.ua_spoof) {
            (DisplayMode::Headless, _) => "hl",
            (DisplayMode::Headed, UaSpoof::Native) => "hd",
            (DisplayMode::Headed, UaSpoof::WindowsSpoof) => "hw",
        }
    }
}

impl fmt::Display for BrowserProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for BrowserProfile {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hl" | "headless" => Ok(BrowserProfile::HEADLESS),
            "hd" | "headed" => Ok(BrowserProfile::HEADED),
            "hw" | "headed-windows" => Ok(BrowserProfile::HEADED_WINDOWS),
            other => Err(ModelError::UnknownProfile(other.to_string())),
        }
    }
}

/// One unit of crawl work: a single domain crawled from one VP with one
/// browser profile for one repetition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct CrawlConfig {
    pub domain: String,
    pub alexa_rank: u32,
    pub profile: BrowserProfile,
    pub vp: VantagePoint,
    pub repetition: u32,
    pub sync_tag: String,
    pub set_seed: u64,
    pub width: u32,
    pub depth: u32,
    #[serde(default)]
    pub requeued: bool,
}

pub const DEFAULT_WIDTH: u32 = 3;
pub const DEFAULT_DEPTH: u32 = 2;

impl CrawlConfig {
    pub fn new(
        domain: &str,
        alexa_rank: u32,
        profile: BrowserProfile,
        vp: VantagePoint,
        repetition: u32,
        width: u32,
        depth: u32,
    ) -> Self {
        let domain = domain.to_ascii_lowercase();
        let sync_tag = make_sync_tag(&domain, profile, repetition);
        let set_seed = derive_seed(&sync_tag);
        CrawlConfig {
            domain,
            alexa_rank,
            profile,
            vp,
            repetition,
            sync_tag,
            set_seed,
            width,
            depth,
            requeued: false,
        }
    }

    /// Stable identifier of this crawl; also used as the broker job id.
    pub fn crawl_id(&self) -> String {
        format!("{}|{}", self.sync_tag, self.vp.code())
    }

    /// The landing page every crawl starts from.
    pub fn landing_url(&self) -> String {
        landing_url(&self.domain)
    }

    pub fn max_pages(&self) -> u64 {
        max_pages(self.width, self.depth)
    }
}

pub fn landing_url(domain: &str) -> String {
    format!("http://{domain}/")
}

/// Why a page visit was aborted.
///
/// Serialized as a plain string; `other` carries its driver code after a
/// colon (`other:net::ERR_CONNECTION_RESET`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum AbortCause {
    DnsResolveFailed,
    SocksProxyError,
    NavigationTimeout,
    TeardownTimeout,
    WatchdogKilled,
    Other(String),
}

impl AbortCause {
    /// Cause label without the `other` payload, used as a report column.
    pub fn label(&self) -> &'static str {
        match self {
            AbortCause::DnsResolveFailed => "dns-resolve-failed",
            AbortCause::SocksProxyError => "socks-proxy-error",
            AbortCause::NavigationTimeout => "navigation-timeout",
            AbortCause::TeardownTimeout => "teardown-timeout",
            AbortCause::WatchdogKilled => "watchdog-killed",
            AbortCause::Other(_) => "other",
        }
    }

    /// Whether this cause can occur on a VP with the given connectivity.
    pub fn possible_on(&self, vp: VantagePoint) -> bool {
        match self {
            AbortCause::DnsResolveFailed => vp.connectivity() == Connectivity::Direct,
            AbortCause::SocksProxyError => vp.connectivity() == Connectivity::Tunneled,
            _ => true,
        }
    }
}

impl fmt::Display for AbortCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AbortCause::Other(code) => write!(f, "other:{code}"),
            c => f.write_str(c.label()),
        }
    }
}

impl FromStr for AbortCause {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "dns-resolve-failed" => AbortCause::DnsResolveFailed,
            "socks-proxy-error" => AbortCause::SocksProxyError,
            "navigation-timeout" => AbortCause::NavigationTimeout,
            "teardown-timeout" => AbortCause::TeardownTimeout,
            "watchdog-killed" => AbortCause::WatchdogKilled,
            "other" => AbortCause::Other(String::new()),
            s => match s.strip_prefix("other:") {
                Some(code) => AbortCause::Other(code.to_string()),
                None => return Err(ModelError::UnknownAbortCause(s.to_string())),
            },
        })
    }
}

impl From<AbortCause> for String {
    fn from(c: AbortCause) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for AbortCause {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum VisitStatus {
    Completed {
        #[serde(rename = "dead-end")]
        dead_end: bool,
    },
    Aborted {
        cause: AbortCause,
    },
}

impl VisitStatus {
    pub fn is_completed(&self) -> bool {
        matches!(self, VisitStatus::Completed { .. })
    }

    pub fn is_dead_end(&self) -> bool {
        matches!(self, VisitStatus::Completed { dead_end: true })
    }

    pub fn abort_cause(&self) -> Option<&AbortCause> {
        match self {
            VisitStatus::Aborted { cause } => Some(cause),
            VisitStatus::Completed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrawlStatus {
    Completed,
    Dropped,
    Stalled,
    InProgress,
}

impl CrawlStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, CrawlStatus::Completed | CrawlStatus::Dropped)
    }
}

/// Request resource types. Closed set; anything a driver reports that is
/// not listed maps to `Other`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "kebab-case")]
pub enum ResourceType {
    Document,
    Stylesheet,
    Image,
    Media,
    Font,
    Script,
    Xhr,
    Fetch,
    Websocket,
    Subdocument,
    Other,
}

impl ResourceType {
    pub const ALL: [ResourceType; 11] = [
        ResourceType::Document,
        ResourceType::Stylesheet,
        ResourceType::Image,
        ResourceType::Media,
        ResourceType::Font,
        ResourceType::Script,
        ResourceType::Xhr,
        ResourceType::Fetch,
        ResourceType::Websocket,
        ResourceType::Subdocument,
        ResourceType::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ResourceType::Document => "document",
            ResourceType::Stylesheet => "stylesheet",
            ResourceType::Image => "image",
            ResourceType::Media => "media",
            ResourceType::Font => "font",
            ResourceType::Script => "script",
            ResourceType::Xhr => "xhr",
            ResourceType::Fetch => "fetch",
            ResourceType::Websocket => "websocket",
            ResourceType::Subdocument => "subdocument",
            ResourceType::Other => "other",
        }
    }

    /// Map a driver-reported type name (Chromium DevTools spelling or ours).
    pub fn from_driver(name: &str) -> ResourceType {
        match name.to_ascii_lowercase().as_str() {
            "document" | "main_frame" => ResourceType::Document,
            "stylesheet" => ResourceType::Stylesheet,
            "image" => ResourceType::Image,
            "media" => ResourceType::Media,
            "font" => ResourceType::Font,
            "script" => ResourceType::Script,
            "xhr" | "xmlhttprequest" => ResourceType::Xhr,
            "fetch" => ResourceType::Fetch,
            "websocket" => ResourceType::Websocket,
            "subdocument" | "sub_frame" | "iframe" => ResourceType::Subdocument,
            _ => ResourceType::Other,
        }
    }
}

impl fmt::Display for ResourceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Number of pages a `width` x `depth` crawl can visit at most:
/// one landing page plus `width^d` pages on each deeper level.
pub fn max_pages(width: u32, depth: u32) -> u64 {
    assert!(width >= 1 && depth >= 1, "width and depth must be positive");
    (0..depth).map(|d| u64::from(width).pow(d)).sum()
}

/// Sync tag shared by the four VP members of a crawl set.
pub fn make_sync_tag(domain: &str, profile: BrowserProfile, repetition: u32) -> String {
    format!("{domain}|{}|{repetition}", profile.code())
}

pub(crate) const FNV_OFFSET: u64 = 14_695_981_039_346_656_037;
pub(crate) const FNV_PRIME: u64 = 1_099_511_628_211;

/// 64-bit FNV-1a over the bytes of `data`.
pub fn fnv1a64(data: &[u8]) -> u64 {
    data.iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// The crawl-set seed: FNV-1a of the sync tag.
pub fn derive_seed(sync_tag: &str) -> u64 {
    assert!(!sync_tag.is_empty(), "sync tag must not be empty");
    fnv1a64(sync_tag.as_bytes())
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct CrawlRecord {
    pub crawl_id: String,
    pub config: CrawlConfig,
    pub status: CrawlStatus,
    pub worker_id: Option<String>,
    pub attempt: u32,
    pub dequeued_at: Option<Millis>,
    pub released_at: Option<Millis>,
    pub crawl_start: Option<Millis>,
    pub crawl_end: Option<Millis>,
    pub sync_degraded: bool,
    pub visit_count: u32,
}

/// Something that happened during a visit which leaves no other data
/// behind (screenshot taken, dialog dismissed, popup closed).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct VisitEvent {
    pub at: Millis,
    pub event: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PageVisitRecord {
    pub visit_id: String,
    pub crawl_id: String,
    pub ordinal: u32,
    pub page_url: String,
    pub page_depth: u32,
    pub visit_start: Millis,
    pub nav_end: Option<Millis>,
    pub interaction_end: Option<Millis>,
    pub teardown_end: Option<Millis>,
    pub status: VisitStatus,
    pub landed_url: Option<String>,
    pub harvested_links: Vec<String>,
    pub captured_html_size: u64,
    pub captcha_detected: BTreeSet<String>,
    #[serde(default)]
    pub events: Vec<VisitEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RequestOutcome {
    Response {
        status: u16,
        headers: BTreeMap<String, String>,
        #[serde(rename = "body-hash")]
        body_hash: String,
        #[serde(rename = "body-size")]
        body_size: u64,
    },
    Failed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct RequestRecord {
    pub visit_id: String,
    pub request_url: String,
    pub resource_type: ResourceType,
    pub frame_id: String,
    pub document_url: String,
    pub outcome: RequestOutcome,
    pub is_third_party: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct NavigationEvent {
    pub timestamp: Millis,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct FrameRecord {
    pub visit_id: String,
    pub frame_id: String,
    pub parent_frame_id: Option<String>,
    pub frame_url: String,
    pub frame_origin: String,
    pub navigation_events: Vec<NavigationEvent>,
}

/// One line of a record file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Record {
    Crawl(CrawlRecord),
    Visit(PageVisitRecord),
    Request(RequestRecord),
    Frame(FrameRecord),
}

impl Record {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records always serialize")
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Longest a completed page visit may take from launch to end of teardown.
pub const MAX_VISIT_MS: Millis = 45_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecordError {
    #[error("visit {0}: page depth {1} outside 1..={2}")]
    Depth(String, u32, u32),
    #[error("visit {0}: depth-1 page is not the landing page ({1})")]
    NotLanding(String, String),
    #[error("visit {0}: timestamps not monotone")]
    Timestamps(String),
    #[error("visit {0}: completed visit took {1} ms")]
    TooLong(String, Millis),
    #[error("visit {0}: {1} harvested links exceed width {2}")]
    TooManyLinks(String, usize, u32),
    #[error("visit {0}: dead-end flag disagrees with captured html size {1}")]
    DeadEnd(String, u64),
}

/// Check the invariants every emitted visit record must satisfy.
pub fn validate_visit(visit: &PageVisitRecord, config: &CrawlConfig) -> Result<(), RecordError> {
    let id = || visit.visit_id.clone();
    if visit.page_depth < 1 || visit.page_depth > config.depth {
        return Err(RecordError::Depth(id(), visit.page_depth, config.depth));
    }
    if visit.page_depth == 1 && visit.page_url != config.landing_url() {
        return Err(RecordError::NotLanding(id(), visit.page_url.clone()));
    }
    let stamps: Vec<Millis> = [
        Some(visit.visit_start),
        visit.nav_end,
        visit.interaction_end,
        visit.teardown_end,
    ]
    .into_iter()
    .flatten()
    .collect();
    if stamps.windows(2).any(|w| w[0] > w[1]) {
        return Err(RecordError::Timestamps(id()));
    }
    if let VisitStatus::Completed { dead_end } = visit.status {
        let end = visit.teardown_end.ok_or_else(|| RecordError::Timestamps(id()))?;
        let took = end - visit.visit_start;
        if took > MAX_VISIT_MS {
            return Err(RecordError::TooLong(id(), took));
        }
        if dead_end != (visit.captured_html_size == 0) {
            return Err(RecordError::DeadEnd(id(), visit.captured_html_size));
        }
    }
    if visit.harvested_links.len() > config.width as usize {
        return Err(RecordError::TooManyLinks(id(), visit.harvested_links.len(), config.width));
    }
    Ok(())
}
