//! Brute-force recomputation of every analysis straight from raw records,
//! with no indexes and the naive full-scan filter matcher. Quadratic on
//! purpose; meant for stores of a few thousand records.

use std::collections::{BTreeMap, BTreeSet};

use super::tables::{AbortTable, CauseColumn, FrameMatrix, MiscStats, Ratio, SetCounts, SkewQuantiles};
use super::etld1_of_url;
use crate::abp::{Classification, FilterSet};
use crate::model::{
    BrowserProfile, CrawlRecord, CrawlStatus, FrameRecord, Millis, PageVisitRecord, Record, RequestRecord, ResourceType,
    VantagePoint, VisitStatus,
};
use crate::suffix::SuffixTable;

struct Raw<'a> {
    crawls: Vec<&'a CrawlRecord>,
    visits: Vec<&'a PageVisitRecord>,
    requests: Vec<&'a RequestRecord>,
    frames: Vec<&'a FrameRecord>,
}

fn split(records: &[Record]) -> Raw<'_> {
    let mut raw = Raw { crawls: vec![], visits: vec![], requests: vec![], frames: vec![] };
    for r in records {
        match r {
            Record::Crawl(c) => raw.crawls.push(c),
            Record::Visit(v) => raw.visits.push(v),
            Record::Request(q) => raw.requests.push(q),
            Record::Frame(f) => raw.frames.push(f),
        }
    }
    raw
}

fn crawl_for<'a>(raw: &Raw<'a>, crawl_id: &str) -> &'a CrawlRecord {
    raw.crawls.iter().find(|c| c.crawl_id == crawl_id).expect("crawl present")
}

fn visit_for<'a>(raw: &Raw<'a>, visit_id: &str) -> &'a PageVisitRecord {
    raw.visits.iter().find(|v| v.visit_id == visit_id).expect("visit present")
}

fn present_vps(raw: &Raw) -> Vec<VantagePoint> {
    VantagePoint::ALL.into_iter().filter(|vp| raw.crawls.iter().any(|c| c.config.vp == *vp)).collect()
}

pub fn classify_sets(records: &[Record], include_tor: bool) -> BTreeMap<BrowserProfile, SetCounts> {
    let raw = split(records);
    let vps: Vec<VantagePoint> = present_vps(&raw).into_iter().filter(|v| include_tor || *v != VantagePoint::Tor).collect();
    let tags: BTreeSet<&str> = raw.crawls.iter().map(|c| c.config.sync_tag.as_str()).collect();
    let mut out: BTreeMap<BrowserProfile, SetCounts> = BTreeMap::new();
    for tag in tags {
        let profile = raw.crawls.iter().find(|c| c.config.sync_tag == tag).unwrap().config.profile;
        let mut counts = Vec::new();
        for vp in &vps {
            let n = raw
                .visits
                .iter()
                .filter(|v| {
                    let c = crawl_for(&raw, &v.crawl_id);
                    c.config.sync_tag == tag && c.config.vp == *vp && v.status.is_completed()
                })
                .count();
            counts.push(n);
        }
        let e = out.entry(profile).or_default();
        let first = counts.first().copied().unwrap_or(0);
        if counts.iter().all(|&n| n == 0) {
            e.none += 1;
        } else if counts.iter().all(|&n| n == first) {
            e.matched += 1;
        } else {
            e.mixed += 1;
        }
    }
    out
}

pub fn abort_breakdown(records: &[Record]) -> AbortTable {
    let raw = split(records);
    let mut t = AbortTable { vps: present_vps(&raw), ..AbortTable::default() };
    for vp in VantagePoint::ALL {
        let mine: Vec<&&PageVisitRecord> =
            raw.visits.iter().filter(|v| crawl_for(&raw, &v.crawl_id).config.vp == vp).collect();
        if mine.is_empty() {
            continue;
        }
        t.visits.insert(vp, mine.len() as u64);
        for col in CauseColumn::ALL {
            let n = mine
                .iter()
                .filter(|v| matches!(&v.status, VisitStatus::Aborted { cause } if CauseColumn::of(cause) == col))
                .count() as u64;
            if n > 0 {
                t.aborted.insert((col, vp), n);
            }
        }
    }
    t
}

pub fn filter_hit_ratios(records: &[Record], fs: &FilterSet) -> BTreeMap<(VantagePoint, ResourceType), Ratio> {
    let raw = split(records);
    let mut out = BTreeMap::new();
    for vp in VantagePoint::ALL {
        for rt in ResourceType::ALL {
            let mut cell = Ratio::default();
            for r in &raw.requests {
                let v = visit_for(&raw, &r.visit_id);
                if crawl_for(&raw, &v.crawl_id).config.vp != vp || r.resource_type != rt {
                    continue;
                }
                cell.total += 1;
                if let Ok(Classification::Matched(_)) =
                    fs.classify_scan(&r.request_url, &r.document_url, r.resource_type, r.is_third_party)
                {
                    cell.matched += 1;
                }
            }
            if cell.total > 0 {
                out.insert((vp, rt), cell);
            }
        }
    }
    out
}

pub fn frame_origin_matrix(records: &[Record], exclude: &BTreeSet<VantagePoint>) -> FrameMatrix {
    let raw = split(records);
    let table = SuffixTable::bundled();
    let vps: Vec<VantagePoint> = VantagePoint::ALL.into_iter().filter(|v| !exclude.contains(v)).collect();
    let mut m = FrameMatrix { vps: vps.clone(), rows: BTreeMap::new() };
    for f in &raw.frames {
        let v = visit_for(&raw, &f.visit_id);
        let top = v.landed_url.as_deref().unwrap_or(&v.page_url);
        let site = etld1_of_url(&table, top).unwrap_or_default();
        let vp = crawl_for(&raw, &v.crawl_id).config.vp;
        if f.parent_frame_id.is_none() || f.frame_origin.is_empty() || f.frame_origin == site {
            continue;
        }
        if let Some(col) = vps.iter().position(|x| *x == vp) {
            m.rows.entry(f.frame_origin.clone()).or_insert_with(|| vec![0; vps.len()])[col] += 1;
        }
    }
    m
}

pub fn misc_stats(records: &[Record], lists: &[(String, FilterSet)]) -> MiscStats {
    let raw = split(records);
    let mut s = MiscStats { total_requests: raw.requests.len() as u64, ..MiscStats::default() };
    for vp in VantagePoint::ALL {
        let domains: BTreeSet<&str> =
            raw.crawls.iter().filter(|c| c.config.vp == vp).map(|c| c.config.domain.as_str()).collect();
        for d in domains {
            let n = raw
                .visits
                .iter()
                .filter(|v| {
                    let c = crawl_for(&raw, &v.crawl_id);
                    c.config.vp == vp && c.config.domain == d && v.status.is_completed() && !v.status.is_dead_end()
                })
                .count() as u64;
            *s.dead_end_histogram.entry(vp).or_default().entry(n).or_default() += 1;
        }
        let completed: Vec<_> = raw
            .visits
            .iter()
            .filter(|v| crawl_for(&raw, &v.crawl_id).config.vp == vp && v.status.is_completed())
            .collect();
        if !completed.is_empty() {
            s.captcha.insert(
                vp,
                Ratio {
                    matched: completed.iter().filter(|v| !v.captcha_detected.is_empty()).count() as u64,
                    total: completed.len() as u64,
                },
            );
        }
    }
    let tags: BTreeSet<&str> = raw.crawls.iter().map(|c| c.config.sync_tag.as_str()).collect();
    let mut skews = Vec::new();
    for tag in tags {
        let starts: Vec<Millis> =
            raw.crawls.iter().filter(|c| c.config.sync_tag == tag).filter_map(|c| c.crawl_start).collect();
        if starts.len() >= 2 {
            skews.push(starts.iter().max().unwrap() - starts.iter().min().unwrap());
        }
    }
    skews.sort_unstable();
    let q = |p: f64| -> Millis {
        if skews.is_empty() {
            return 0;
        }
        // smallest value with at least p of the data at or below it
        *skews.iter().find(|&&x| skews.iter().filter(|&&y| y <= x).count() as f64 >= p * skews.len() as f64).unwrap()
    };
    s.launch_skew = SkewQuantiles {
        sets: skews.len() as u64,
        p50: q(0.5),
        p90: q(0.9),
        p99: q(0.99),
        max: skews.last().copied().unwrap_or(0),
    };
    for (name, fs) in lists {
        let n = raw
            .requests
            .iter()
            .filter(|r| {
                matches!(
                    fs.classify_scan(&r.request_url, &r.document_url, r.resource_type, r.is_third_party),
                    Ok(Classification::Matched(_))
                )
            })
            .count() as u64;
        s.filter_matches.insert(name.clone(), n);
    }
    s.crawls_dropped = raw.crawls.iter().filter(|c| c.status == CrawlStatus::Dropped).count() as u64;
    s.crawls_degraded = raw.crawls.iter().filter(|c| c.sync_degraded).count() as u64;
    s
}
