//! Post-processing: ingest record files into an indexed store, compute the
//! cross-VP tables and figure data, and write the report.
//!
//! Ingest accepts a crawl's visits, requests and frames only once its crawl
//! record has been seen in the same file; anything still pending at end of
//! file is an orphan (a crawl cut short by a crash).

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::model::{CrawlRecord, PageVisitRecord, Record, ResourceType, VantagePoint};
use crate::suffix::{url_host, SuffixTable};

pub mod oracle;
pub mod report;
pub mod synth;
mod tables;

pub use tables::*;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// A position in the ingested input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Position {
    pub file: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct Malformed {
    pub at: Position,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct Duplicate {
    pub crawl_id: String,
    pub kept: Position,
    pub rejected: Position,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct IngestLog {
    pub files: usize,
    pub lines: usize,
    pub malformed: Vec<Malformed>,
    pub duplicates: Vec<Duplicate>,
    /// Records whose crawl record never arrived.
    pub orphans: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredVisit {
    pub record: PageVisitRecord,
    pub crawl: usize,
    /// eTLD+1 of the top document (landed URL, else page URL).
    pub site: String,
}

/// The fields of a request record the analyses read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredRequest {
    pub visit: usize,
    pub url: String,
    pub document_url: String,
    pub rtype: ResourceType,
    pub third_party: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredFrame {
    pub visit: usize,
    pub origin: String,
    pub sub_frame: bool,
}

#[derive(Debug, Clone, Default)]
pub struct AnalyticsStore {
    pub crawls: Vec<CrawlRecord>,
    pub visits: Vec<StoredVisit>,
    pub requests: Vec<StoredRequest>,
    pub frames: Vec<StoredFrame>,
    pub log: IngestLog,
    crawl_pos: HashMap<String, (usize, Position)>,
    suffixes: SuffixTable,
}

fn crawl_of(id: &str) -> &str {
    id.rsplit_once('#').map(|(c, _)| c).unwrap_or(id)
}

fn record_crawl_id(rec: &Record) -> &str {
    match rec {
        Record::Crawl(c) => &c.crawl_id,
        Record::Visit(v) => &v.crawl_id,
        Record::Request(r) => crawl_of(&r.visit_id),
        Record::Frame(f) => crawl_of(&f.visit_id),
    }
}

pub fn etld1_of_url(table: &SuffixTable, raw: &str) -> Option<String> {
    let u = url::Url::parse(raw).ok()?;
    table.etld1(&url_host(&u)?).ok()
}

/// Records of one source awaiting their crawl record.
struct Pending {
    source: String,
    groups: HashMap<String, Vec<Record>>,
}

impl AnalyticsStore {
    pub fn new() -> Self {
        AnalyticsStore { suffixes: SuffixTable::bundled(), ..AnalyticsStore::default() }
    }

    pub fn crawl(&self, visit: &StoredVisit) -> &CrawlRecord {
        &self.crawls[visit.crawl]
    }

    pub fn vp_of_visit(&self, visit: usize) -> VantagePoint {
        self.crawls[self.visits[visit].crawl].config.vp
    }

    /// Build a store from in-memory records attributed to `source`.
    pub fn from_records(source: &str, records: impl IntoIterator<Item = Record>) -> Self {
        let mut store = AnalyticsStore::new();
        store.log.files = 1;
        let mut pending = Pending { source: source.to_string(), groups: HashMap::new() };
        for (i, rec) in records.into_iter().enumerate() {
            store.log.lines += 1;
            store.accept(&mut pending, rec, i + 1);
        }
        store.finish(pending);
        store
    }

    /// Ingest record files in the given order.
    pub fn ingest(paths: &[PathBuf]) -> Result<Self, IngestError> {
        let mut store = AnalyticsStore::new();
        for path in paths {
            store.ingest_file(path)?;
        }
        Ok(store)
    }

    pub fn ingest_file(&mut self, path: &Path) -> Result<(), IngestError> {
        let shown = path.display().to_string();
        let io_err = |source| IngestError::Io { path: shown.clone(), source };
        let reader = BufReader::new(File::open(path).map_err(io_err)?);
        self.log.files += 1;
        let mut pending = Pending { source: shown.clone(), groups: HashMap::new() };
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            self.log.lines += 1;
            match serde_json::from_str::<Record>(&line) {
                Ok(rec) => self.accept(&mut pending, rec, i + 1),
                Err(e) => self.log.malformed.push(Malformed {
                    at: Position { file: shown.clone(), line: i + 1 },
                    reason: e.to_string(),
                }),
            }
        }
        self.finish(pending);
        Ok(())
    }

    fn accept(&mut self, pending: &mut Pending, rec: Record, line: usize) {
        let Record::Crawl(crawl) = rec else {
            let id = record_crawl_id(&rec).to_string();
            pending.groups.entry(id).or_default().push(rec);
            return;
        };
        let group = pending.groups.remove(&crawl.crawl_id).unwrap_or_default();
        let here = Position { file: pending.source.clone(), line };
        if let Some((_, kept)) = self.crawl_pos.get(&crawl.crawl_id) {
            self.log.duplicates.push(Duplicate { crawl_id: crawl.crawl_id.clone(), kept: kept.clone(), rejected: here });
            return;
        }
        let ci = self.crawls.len();
        self.crawl_pos.insert(crawl.crawl_id.clone(), (ci, here));
        self.crawls.push(crawl);
        let mut visit_index: HashMap<String, usize> = HashMap::new();
        // visits first so requests and frames can refer to them
        let (visits, rest): (Vec<Record>, Vec<Record>) = group.into_iter().partition(|r| matches!(r, Record::Visit(_)));
        for rec in visits {
            let Record::Visit(v) = rec else { unreachable!() };
            if visit_index.contains_key(&v.visit_id) {
                self.log.orphans += 1;
                continue;
            }
            let top = v.landed_url.as_deref().unwrap_or(&v.page_url);
            let site = etld1_of_url(&self.suffixes, top).unwrap_or_default();
            visit_index.insert(v.visit_id.clone(), self.visits.len());
            self.visits.push(StoredVisit { record: v, crawl: ci, site });
        }
        for rec in rest {
            match rec {
                Record::Request(r) => match visit_index.get(&r.visit_id) {
                    Some(&visit) => self.requests.push(StoredRequest {
                        visit,
                        url: r.request_url,
                        document_url: r.document_url,
                        rtype: r.resource_type,
                        third_party: r.is_third_party,
                    }),
                    None => self.log.orphans += 1,
                },
                Record::Frame(f) => match visit_index.get(&f.visit_id) {
                    Some(&visit) => self.frames.push(StoredFrame {
                        visit,
                        origin: f.frame_origin,
                        sub_frame: f.parent_frame_id.is_some(),
                    }),
                    None => self.log.orphans += 1,
                },
                _ => unreachable!("visits and crawls handled above"),
            }
        }
    }

    fn finish(&mut self, pending: Pending) {
        self.log.orphans += pending.groups.values().map(Vec::len).sum::<usize>();
    }

    /// VPs present in the store, in report column order.
    pub fn vps(&self) -> Vec<VantagePoint> {
        VantagePoint::ALL.into_iter().filter(|vp| self.crawls.iter().any(|c| c.config.vp == *vp)).collect()
    }
}

/// Record files under `dir` (recursively), sorted by path.
pub fn record_files(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "jsonl") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::synth::{synthetic_records, SynthSpec};

    #[test]
    fn empty_inputs() {
        let s = AnalyticsStore::ingest(&[]).unwrap();
        assert!(s.crawls.is_empty() && s.visits.is_empty());
        assert_eq!(s.log, IngestLog::default());
    }

    #[test]
    fn counts_conserved() {
        let recs = synthetic_records(3, &SynthSpec::default());
        let visits = recs.iter().filter(|r| matches!(r, Record::Visit(_))).count();
        let reqs = recs.iter().filter(|r| matches!(r, Record::Request(_))).count();
        let s = AnalyticsStore::from_records("mem", recs);
        assert_eq!(s.visits.len(), visits);
        assert_eq!(s.requests.len(), reqs);
        assert_eq!(s.log.orphans, 0);
    }

    #[test]
    fn duplicates_and_garbage_are_reported() {
        let recs = synthetic_records(4, &SynthSpec { domains: 2, ..SynthSpec::default() });
        let dir = tempfile::tempdir().unwrap();
        let text: String = recs.iter().map(|r| r.to_line() + "\n").collect();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        std::fs::write(&a, &text).unwrap();
        // b repeats a's first crawl, adds a torn line and an unfinished crawl
        let first_crawl = text.lines().position(|l| l.starts_with(r#"{"kind":"crawl""#)).unwrap();
        let mut b_text: String = text.lines().take(first_crawl + 1).map(|l| format!("{l}\n")).collect();
        b_text.push_str("{\"kind\":\"visit\",\n");
        let mut stray = recs
            .iter()
            .find_map(|r| match r {
                Record::Visit(v) => Some(v.clone()),
                _ => None,
            })
            .unwrap();
        stray.crawl_id = "unfinished.com|hl|1|u".into();
        stray.visit_id = format!("{}#1", stray.crawl_id);
        b_text.push_str(&(Record::Visit(stray).to_line() + "\n"));
        std::fs::write(&b, b_text).unwrap();

        let s = AnalyticsStore::ingest(&[a.clone(), b.clone()]).unwrap();
        let once = AnalyticsStore::ingest(std::slice::from_ref(&a)).unwrap();
        assert_eq!(s.crawls.len(), once.crawls.len());
        assert_eq!(s.visits.len(), once.visits.len());
        assert_eq!(s.log.duplicates.len(), 1);
        let d = &s.log.duplicates[0];
        assert_eq!(d.kept, Position { file: a.display().to_string(), line: first_crawl + 1 });
        assert_eq!(d.rejected, Position { file: b.display().to_string(), line: first_crawl + 1 });
        assert_eq!(s.log.malformed.len(), 1);
        assert_eq!(s.log.malformed[0].at.line, first_crawl + 2);
        assert_eq!(s.log.orphans, 1);
    }
}
