//! Report files: CSV tables and figure data plus a JSON summary whose
//! query descriptors say where every number comes from.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use super::tables::*;
use super::{AnalyticsStore, IngestLog};
use crate::abp::FilterSet;
use crate::model::{BrowserProfile, ResourceType, VantagePoint};

/// Minimum loads on residential and university for the cloud-zero test.
pub const CLOUD_ZERO_MIN_LOAD: u64 = 3;

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct Report {
    pub sets_without_tor: BTreeMap<BrowserProfile, SetCounts>,
    pub sets_with_tor: BTreeMap<BrowserProfile, SetCounts>,
    pub aborts: AbortTable,
    pub resource_types: BTreeMap<(VantagePoint, ResourceType), u64>,
    pub filter_ratios: BTreeMap<String, BTreeMap<(VantagePoint, ResourceType), Ratio>>,
    pub frames: FrameMatrix,
    pub cloud_zero: BTreeSet<String>,
    pub misc: MiscStats,
}

impl Report {
    pub fn compute(store: &AnalyticsStore, lists: &[(String, FilterSet)]) -> Report {
        let frames = frame_origin_matrix(store, &BTreeSet::from([VantagePoint::Tor]));
        Report {
            sets_without_tor: classify_sets(store, false),
            sets_with_tor: classify_sets(store, true),
            aborts: abort_breakdown(store),
            resource_types: resource_type_counts(store),
            filter_ratios: lists.iter().map(|(n, fs)| (n.clone(), filter_hit_ratios(store, fs))).collect(),
            cloud_zero: cloud_zero_origins(&frames, CLOUD_ZERO_MIN_LOAD),
            frames,
            misc: misc_stats(store, lists),
        }
    }
}

fn csv_writer(path: &Path) -> io::Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(csv::Writer::from_path(path)?)
}

fn vp_header<'a>(first: &'a str, vps: &[VantagePoint]) -> Vec<&'a str> {
    std::iter::once(first).chain(vps.iter().map(|v| v.name())).collect()
}

/// Write every table and figure under `out`; returns the files written,
/// relative to `out`, in a fixed order.
pub fn write_report(report: &Report, log: &IngestLog, out: &Path) -> io::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut queries = Vec::new();
    let mut file = |rel: &str, query: &str| {
        written.push(PathBuf::from(rel));
        queries.push(json!({ "output": rel, "query": query }));
        out.join(rel)
    };

    // crawl sets
    let path = file(
        "tables/crawl_sets.csv",
        "per sync-tag, count completed visits per VP; all zero = none, all equal = matched, else mixed; \
         grouped by browser profile; scope with/without tor",
    );
    let mut w = csv_writer(&path)?;
    w.write_record(["scope", "profile", "none", "mixed", "matched", "total"])?;
    for (scope, sets) in [("excluding-tor", &report.sets_without_tor), ("including-tor", &report.sets_with_tor)] {
        for (p, c) in sets {
            w.write_record([
                scope.to_string(),
                p.code().to_string(),
                c.none.to_string(),
                c.mixed.to_string(),
                c.matched.to_string(),
                c.total().to_string(),
            ])?;
        }
    }
    w.flush()?;

    // abort causes
    let path = file(
        "tables/abort_causes.csv",
        "per VP, aborted visits with cause / all visits, percent half-up to 2 places; N/A where the cause \
         cannot occur on the VP's connectivity class; last row = all aborted / all visits",
    );
    let a = &report.aborts;
    let mut w = csv_writer(&path)?;
    w.write_record(vp_header("cause", &a.vps))?;
    for cause in CauseColumn::ALL {
        let mut row = vec![cause.label().to_string()];
        for &vp in &a.vps {
            row.push(match a.cell(cause, vp) {
                Some(h) => format!("{}.{:02}", h / 100, h % 100),
                None => "N/A".into(),
            });
        }
        w.write_record(&row)?;
    }
    let mut row = vec!["% of total failures".to_string()];
    for &vp in &a.vps {
        let h = a.failure_rate(vp);
        row.push(format!("{}.{:02}", h / 100, h % 100));
    }
    w.write_record(&row)?;
    let mut row = vec!["visits".to_string()];
    row.extend(a.vps.iter().map(|vp| a.visits.get(vp).copied().unwrap_or(0).to_string()));
    w.write_record(&row)?;
    w.flush()?;

    // dead-end histogram
    let path = file(
        "figures/dead_end_histogram.csv",
        "per VP and domain, completed visits with non-empty HTML summed over all crawls; \
         histogram = domains per page count",
    );
    let hist = &report.misc.dead_end_histogram;
    let vps: Vec<VantagePoint> = hist.keys().copied().collect();
    let max = hist.values().flat_map(|h| h.keys()).copied().max();
    let mut w = csv_writer(&path)?;
    w.write_record(vp_header("pages", &vps))?;
    if let Some(max) = max {
        for x in 0..=max {
            let mut row = vec![x.to_string()];
            row.extend(vps.iter().map(|vp| hist[vp].get(&x).copied().unwrap_or(0).to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;

    // resource types
    let path = file("figures/resource_types.csv", "request records per VP and resource type, with share of the VP's requests");
    let mut totals: BTreeMap<VantagePoint, u64> = BTreeMap::new();
    for ((vp, _), n) in &report.resource_types {
        *totals.entry(*vp).or_default() += n;
    }
    let mut w = csv_writer(&path)?;
    w.write_record(["vp", "resource-type", "requests", "percent"])?;
    for ((vp, rt), n) in &report.resource_types {
        w.write_record([vp.name(), rt.name(), &n.to_string(), &format_pct(*n, totals[vp])])?;
    }
    w.flush()?;

    // filter lists
    for (name, ratios) in &report.filter_ratios {
        let path = file(
            &format!("figures/filter_ratio_{name}.csv"),
            &format!("per VP and resource type, requests blocked by {name} (block rule, no exception) / requests"),
        );
        let mut w = csv_writer(&path)?;
        w.write_record(["vp", "resource-type", "matched", "total", "ratio"])?;
        for ((vp, rt), r) in ratios {
            w.write_record([
                vp.name(),
                rt.name(),
                &r.matched.to_string(),
                &r.total.to_string(),
                &format!("{:.6}", r.value()),
            ])?;
        }
        w.flush()?;
    }

    // frame origins
    let path = file(
        "figures/frame_origins.csv",
        "sub-frame records whose eTLD+1 differs from the top document's, per origin and VP (tor excluded)",
    );
    let f = &report.frames;
    let mut w = csv_writer(&path)?;
    w.write_record(vp_header("origin", &f.vps))?;
    let mut rows: Vec<(&String, &Vec<u64>)> = f.rows.iter().collect();
    rows.sort_by(|a, b| b.1.iter().sum::<u64>().cmp(&a.1.iter().sum::<u64>()).then(a.0.cmp(b.0)));
    for (origin, counts) in rows {
        let mut row = vec![origin.clone()];
        row.extend(counts.iter().map(u64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;

    let misc = &report.misc;
    let captcha: BTreeMap<&str, serde_json::Value> = misc
        .captcha
        .iter()
        .map(|(vp, r)| (vp.name(), json!({ "pages": r.matched, "completed": r.total, "percent": format_pct(r.matched, r.total) })))
        .collect();
    let summary = json!({
        "ingest": {
            "files": log.files,
            "lines": log.lines,
            "malformed": log.malformed,
            "duplicates": log.duplicates,
            "orphans": log.orphans,
        },
        "total-requests": misc.total_requests,
        "filter-matches": misc.filter_matches,
        "captcha-rate": captcha,
        "launch-skew-ms": misc.launch_skew,
        "crawls-dropped": misc.crawls_dropped,
        "crawls-sync-degraded": misc.crawls_degraded,
        "cloud-zero-origins": { "min-load": CLOUD_ZERO_MIN_LOAD, "origins": report.cloud_zero },
        "queries": [
            { "output": "captcha-rate", "query": "per VP, completed visits with a detected CAPTCHA provider / completed visits" },
            { "output": "launch-skew-ms", "query": "per sync-tag with >= 2 started crawls, max(crawl-start) - min(crawl-start); nearest-rank quantiles" },
            { "output": "cloud-zero-origins", "query": "frame_origins rows with cloud = 0 and residential, university >= min-load" },
        ],
        "files": queries,
    });
    fs::create_dir_all(out)?;
    let text = serde_json::to_string_pretty(&summary).map_err(io::Error::other)? + "\n";
    fs::write(out.join("summary.json"), text)?;
    written.push(PathBuf::from("summary.json"));
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::synth::{synthetic_filter_lines, synthetic_records, SynthSpec};

    #[test]
    fn report_is_complete_and_reproducible() {
        let recs = synthetic_records(11, &SynthSpec::default());
        let store = AnalyticsStore::from_records("mem", recs);
        let lists = vec![
            ("easylist".to_string(), FilterSet::from_lines(synthetic_filter_lines(1))),
            ("easyprivacy".to_string(), FilterSet::from_lines(synthetic_filter_lines(2))),
        ];
        let report = Report::compute(&store, &lists);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let files = write_report(&report, &store.log, a.path()).unwrap();
        write_report(&Report::compute(&store, &lists), &store.log, b.path()).unwrap();
        assert_eq!(files.len(), 8);
        for f in &files {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f:?}");
        }
        let abort = fs::read_to_string(a.path().join("tables/abort_causes.csv")).unwrap();
        assert!(abort.lines().nth(1).unwrap().starts_with("DNS,"));
        assert!(abort.contains("N/A"));
    }
}
