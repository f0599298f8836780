use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use super::AnalyticsStore;
use crate::abp::{FilterSet, PreparedRequest};
use crate::model::{AbortCause, BrowserProfile, CrawlStatus, Millis, ResourceType, VantagePoint, VisitStatus};

/// `num / den` as a percentage in hundredths, rounded half up.
pub fn pct_hundredths(num: u64, den: u64) -> Option<u64> {
    (den > 0).then(|| (num * 20_000 + den) / (2 * den))
}

/// Two-decimal rendering of [`pct_hundredths`].
pub fn format_pct(num: u64, den: u64) -> String {
    match pct_hundredths(num, den) {
        Some(h) => format!("{}.{:02}", h / 100, h % 100),
        None => "0.00".into(),
    }
}

// ---------------------------------------------------------------------------
// Crawl-set classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SetCounts {
    pub none: u64,
    pub mixed: u64,
    pub matched: u64,
}

impl SetCounts {
    pub fn total(&self) -> u64 {
        self.none + self.mixed + self.matched
    }
}

/// Per profile: sets in which no included VP completed a page, all
/// completed the same (non-zero) number, or they differ.
pub fn classify_sets(store: &AnalyticsStore, include_tor: bool) -> BTreeMap<BrowserProfile, SetCounts> {
    let vps: Vec<VantagePoint> =
        store.vps().into_iter().filter(|vp| include_tor || *vp != VantagePoint::Tor).collect();
    let mut completed: HashMap<(&str, VantagePoint), u64> = HashMap::new();
    for v in &store.visits {
        if v.record.status.is_completed() {
            let c = store.crawl(v);
            *completed.entry((c.config.sync_tag.as_str(), c.config.vp)).or_default() += 1;
        }
    }
    let mut sets: BTreeMap<&str, BrowserProfile> = BTreeMap::new();
    for c in &store.crawls {
        sets.insert(&c.config.sync_tag, c.config.profile);
    }
    let mut out: BTreeMap<BrowserProfile, SetCounts> = BTreeMap::new();
    for (tag, profile) in sets {
        let counts: Vec<u64> = vps.iter().map(|vp| completed.get(&(tag, *vp)).copied().unwrap_or(0)).collect();
        let entry = out.entry(profile).or_default();
        if counts.iter().all(|&c| c == 0) {
            entry.none += 1;
        } else if counts.windows(2).all(|w| w[0] == w[1]) {
            entry.matched += 1;
        } else {
            entry.mixed += 1;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Abort causes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CauseColumn {
    Dns,
    Socks,
    Teardown,
    NavigationTimeout,
    Other,
}

impl CauseColumn {
    pub const ALL: [CauseColumn; 5] =
        [CauseColumn::Dns, CauseColumn::Socks, CauseColumn::Teardown, CauseColumn::NavigationTimeout, CauseColumn::Other];

    pub fn of(cause: &AbortCause) -> CauseColumn {
        match cause {
            AbortCause::DnsResolveFailed => CauseColumn::Dns,
            AbortCause::SocksProxyError => CauseColumn::Socks,
            AbortCause::TeardownTimeout => CauseColumn::Teardown,
            AbortCause::NavigationTimeout => CauseColumn::NavigationTimeout,
            AbortCause::WatchdogKilled | AbortCause::Other(_) => CauseColumn::Other,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CauseColumn::Dns => "DNS",
            CauseColumn::Socks => "SOCKS",
            CauseColumn::Teardown => "Teardown",
            CauseColumn::NavigationTimeout => "Navigation timeout",
            CauseColumn::Other => "Other",
        }
    }

    /// Whether the cause can occur on `vp` at all (else the cell is N/A).
    pub fn applies_to(self, vp: VantagePoint) -> bool {
        match self {
            CauseColumn::Dns => AbortCause::DnsResolveFailed.possible_on(vp),
            CauseColumn::Socks => AbortCause::SocksProxyError.possible_on(vp),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct AbortTable {
    pub vps: Vec<VantagePoint>,
    /// Visits per VP.
    pub visits: BTreeMap<VantagePoint, u64>,
    /// Aborted visits per (cause, VP).
    pub aborted: BTreeMap<(CauseColumn, VantagePoint), u64>,
}

impl AbortTable {
    pub fn count(&self, cause: CauseColumn, vp: VantagePoint) -> u64 {
        self.aborted.get(&(cause, vp)).copied().unwrap_or(0)
    }

    pub fn failures(&self, vp: VantagePoint) -> u64 {
        CauseColumn::ALL.iter().map(|c| self.count(*c, vp)).sum()
    }

    /// Percentage of the VP's visits, or `None` for N/A cells.
    pub fn cell(&self, cause: CauseColumn, vp: VantagePoint) -> Option<u64> {
        cause
            .applies_to(vp)
            .then(|| pct_hundredths(self.count(cause, vp), self.visits.get(&vp).copied().unwrap_or(0)).unwrap_or(0))
    }

    /// The "% of total failures" row: all aborted visits over all visits.
    pub fn failure_rate(&self, vp: VantagePoint) -> u64 {
        pct_hundredths(self.failures(vp), self.visits.get(&vp).copied().unwrap_or(0)).unwrap_or(0)
    }
}

pub fn abort_breakdown(store: &AnalyticsStore) -> AbortTable {
    let mut t = AbortTable { vps: store.vps(), ..AbortTable::default() };
    for (i, v) in store.visits.iter().enumerate() {
        let vp = store.vp_of_visit(i);
        *t.visits.entry(vp).or_default() += 1;
        if let VisitStatus::Aborted { cause } = &v.record.status {
            *t.aborted.entry((CauseColumn::of(cause), vp)).or_default() += 1;
        }
    }
    t
}

// ---------------------------------------------------------------------------
// Requests
// ---------------------------------------------------------------------------

/// (matched, total) request counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Ratio {
    pub matched: u64,
    pub total: u64,
}

impl Ratio {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }
}

/// Share of requests per (VP, resource type) that the filter set blocks
/// (blocking rule matched, no exception).
pub fn filter_hit_ratios(store: &AnalyticsStore, fs: &FilterSet) -> BTreeMap<(VantagePoint, ResourceType), Ratio> {
    let mut out: BTreeMap<(VantagePoint, ResourceType), Ratio> = BTreeMap::new();
    for r in &store.requests {
        let cell = out.entry((store.vp_of_visit(r.visit), r.rtype)).or_default();
        cell.total += 1;
        if let Ok(req) = PreparedRequest::new(&r.url, &r.document_url, r.rtype, r.third_party) {
            if fs.classify_prepared(&req).is_matched() {
                cell.matched += 1;
            }
        }
    }
    out
}

/// Requests per (VP, resource type).
pub fn resource_type_counts(store: &AnalyticsStore) -> BTreeMap<(VantagePoint, ResourceType), u64> {
    let mut out = BTreeMap::new();
    for r in &store.requests {
        *out.entry((store.vp_of_visit(r.visit), r.rtype)).or_default() += 1;
    }
    out
}

// ---------------------------------------------------------------------------
// Frames
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct FrameMatrix {
    pub vps: Vec<VantagePoint>,
    /// Origin → loads per VP, aligned with `vps`.
    pub rows: BTreeMap<String, Vec<u64>>,
}

impl FrameMatrix {
    pub fn count(&self, origin: &str, vp: VantagePoint) -> Option<u64> {
        let col = self.vps.iter().position(|v| *v == vp)?;
        Some(self.rows.get(origin).map(|r| r[col]).unwrap_or(0))
    }

    pub fn total(&self) -> u64 {
        self.rows.values().flatten().sum()
    }
}

/// Third-party sub-frame loads per origin and VP.
pub fn frame_origin_matrix(store: &AnalyticsStore, exclude: &BTreeSet<VantagePoint>) -> FrameMatrix {
    let vps: Vec<VantagePoint> = VantagePoint::ALL.into_iter().filter(|v| !exclude.contains(v)).collect();
    let mut m = FrameMatrix { vps: vps.clone(), rows: BTreeMap::new() };
    for f in &store.frames {
        let visit = &store.visits[f.visit];
        if !f.sub_frame || f.origin.is_empty() || f.origin == visit.site {
            continue;
        }
        let vp = store.vp_of_visit(f.visit);
        let Some(col) = vps.iter().position(|v| *v == vp) else { continue };
        m.rows.entry(f.origin.clone()).or_insert_with(|| vec![0; vps.len()])[col] += 1;
    }
    m
}

/// Origins loaded at least `min_load` times from both residential and
/// university but never from cloud.
pub fn cloud_zero_origins(matrix: &FrameMatrix, min_load: u64) -> BTreeSet<String> {
    matrix
        .rows
        .keys()
        .filter(|o| {
            let c = |vp| matrix.count(o, vp).unwrap_or(0);
            c(VantagePoint::Cloud) == 0
                && c(VantagePoint::Residential) >= min_load
                && c(VantagePoint::University) >= min_load
        })
        .cloned()
        .collect()
}

// ---------------------------------------------------------------------------
// Miscellany
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SkewQuantiles {
    pub sets: u64,
    pub p50: Millis,
    pub p90: Millis,
    pub p99: Millis,
    pub max: Millis,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct MiscStats {
    /// Per VP: pages → number of domains with that many completed,
    /// non-dead-end pages over all their crawls from the VP.
    pub dead_end_histogram: BTreeMap<VantagePoint, BTreeMap<u64, u64>>,
    /// Per VP: (completed pages with a CAPTCHA, completed pages).
    pub captcha: BTreeMap<VantagePoint, Ratio>,
    /// Spread of crawl start times within a crawl set.
    pub launch_skew: SkewQuantiles,
    pub total_requests: u64,
    /// Requests blocked per filter list.
    pub filter_matches: BTreeMap<String, u64>,
    pub crawls_dropped: u64,
    pub crawls_degraded: u64,
}

/// Nearest-rank quantile of a sorted slice.
pub fn nearest_rank(sorted: &[Millis], q: f64) -> Millis {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn misc_stats(store: &AnalyticsStore, lists: &[(String, FilterSet)]) -> MiscStats {
    let mut s = MiscStats { total_requests: store.requests.len() as u64, ..MiscStats::default() };

    let mut pages: BTreeMap<(VantagePoint, &str), u64> = BTreeMap::new();
    for c in &store.crawls {
        pages.entry((c.config.vp, c.config.domain.as_str())).or_default();
        s.crawls_dropped += (c.status == CrawlStatus::Dropped) as u64;
        s.crawls_degraded += c.sync_degraded as u64;
    }
    for v in &store.visits {
        let c = store.crawl(v);
        if v.record.status.is_completed() {
            let cap = s.captcha.entry(c.config.vp).or_default();
            cap.total += 1;
            cap.matched += !v.record.captcha_detected.is_empty() as u64;
            if !v.record.status.is_dead_end() {
                *pages.get_mut(&(c.config.vp, c.config.domain.as_str())).expect("crawl seen") += 1;
            }
        }
    }
    for ((vp, _), n) in pages {
        *s.dead_end_histogram.entry(vp).or_default().entry(n).or_default() += 1;
    }

    let mut starts: BTreeMap<&str, Vec<Millis>> = BTreeMap::new();
    for c in &store.crawls {
        if let Some(t) = c.crawl_start {
            starts.entry(&c.config.sync_tag).or_default().push(t);
        }
    }
    let mut skews: Vec<Millis> = starts
        .values()
        .filter(|v| v.len() >= 2)
        .map(|v| v.iter().max().unwrap() - v.iter().min().unwrap())
        .collect();
    skews.sort_unstable();
    s.launch_skew = SkewQuantiles {
        sets: skews.len() as u64,
        p50: nearest_rank(&skews, 0.5),
        p90: nearest_rank(&skews, 0.9),
        p99: nearest_rank(&skews, 0.99),
        max: skews.last().copied().unwrap_or(0),
    };

    for (name, fs) in lists {
        let n = store
            .requests
            .iter()
            .filter(|r| {
                PreparedRequest::new(&r.url, &r.document_url, r.rtype, r.third_party)
                    .is_ok_and(|req| fs.classify_prepared(&req).is_matched())
            })
            .count();
        s.filter_matches.insert(name.clone(), n as u64);
    }
    s
}
