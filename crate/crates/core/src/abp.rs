//! AdBlock Plus network-filter parsing and request classification.
//!
//! Supports the URL-pattern subset of the ABP grammar (`||` domain anchors,
//! `|` start/end anchors, `*` wildcards, `^` separators) together with the
//! resource-type, party and `domain=` options. Cosmetic filters, regex
//! rules and any other option cause the line to be skipped with a reason.
//!
//! [`FilterSet::classify`] narrows the candidate rules through an index of
//! 8-byte URL tokens; [`FilterSet::classify_scan`] is the exhaustive scan it
//! must always agree with.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;
use url::Url;

use crate::model::ResourceType;

const TOKEN_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("reading filter list {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid url `{0}`")]
    InvalidUrl(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleKind {
    Block,
    Exception,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartAnchor {
    None,
    /// `||`: match at the start of the host or of any of its subdomains.
    Domain,
    /// `|`: match at the start of the URL.
    Start,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatternToken {
    Literal(String),
    Wildcard,
    Separator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Party {
    Any,
    ThirdOnly,
    FirstOnly,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DomainConstraint {
    pub include: BTreeSet<String>,
    pub exclude: BTreeSet<String>,
}

impl DomainConstraint {
    fn allows(&self, document_host: &str) -> bool {
        let hit = |d: &String| {
            document_host == d
                || (document_host.len() > d.len()
                    && document_host.ends_with(d.as_str())
                    && document_host.as_bytes()[document_host.len() - d.len() - 1] == b'.')
        };
        (self.include.is_empty() || self.include.iter().any(hit)) && !self.exclude.iter().any(hit)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterRule {
    pub kind: RuleKind,
    pub start: StartAnchor,
    pub end_anchor: bool,
    pub pattern: Vec<PatternToken>,
    /// Empty means every type.
    pub type_mask: BTreeSet<ResourceType>,
    pub party: Party,
    pub domains: DomainConstraint,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum SkipReason {
    Empty,
    Comment,
    Cosmetic,
    Regex,
    UnsupportedOption(String),
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkipReason::Empty => f.write_str("empty"),
            SkipReason::Comment => f.write_str("comment"),
            SkipReason::Cosmetic => f.write_str("cosmetic"),
            SkipReason::Regex => f.write_str("regex"),
            SkipReason::UnsupportedOption(_) => f.write_str("unsupported-option"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedLine {
    Rule(FilterRule),
    Skipped(SkipReason),
}

pub fn parse_rule(line: &str) -> ParsedLine {
    use ParsedLine::Skipped;

    let raw = line.trim();
    if raw.is_empty() {
        return Skipped(SkipReason::Empty);
    }
    if raw.starts_with('!') || (raw.starts_with('[') && raw.ends_with(']')) {
        return Skipped(SkipReason::Comment);
    }
    if ["##", "#@#", "#?#", "#$#"].iter().any(|m| raw.contains(m)) {
        return Skipped(SkipReason::Cosmetic);
    }

    let (kind, body) = match raw.strip_prefix("@@") {
        Some(rest) => (RuleKind::Exception, rest),
        None => (RuleKind::Block, raw),
    };

    let (mut pattern, options) = match body.rfind('$') {
        Some(i) => (&body[..i], Some(&body[i + 1..])),
        None => (body, None),
    };

    let mut type_mask = BTreeSet::new();
    let mut negated_types = BTreeSet::new();
    let mut party = Party::Any;
    let mut domains = DomainConstraint::default();
    if let Some(options) = options {
        for opt in options.split(',').map(str::trim).filter(|o| !o.is_empty()) {
            let opt_lc = opt.to_ascii_lowercase();
            if let Some(types) = option_types(&opt_lc) {
                type_mask.extend(types.iter().copied());
                continue;
            }
            if let Some(types) = opt_lc.strip_prefix('~').and_then(option_types) {
                negated_types.extend(types.iter().copied());
                continue;
            }
            match opt_lc.as_str() {
                "third-party" => party = Party::ThirdOnly,
                "~third-party" => party = Party::FirstOnly,
                _ => match opt_lc.strip_prefix("domain=") {
                    Some(list) if !list.is_empty() => {
                        for d in list.split('|').filter(|d| !d.is_empty()) {
                            match d.strip_prefix('~') {
                                Some(ex) => domains.exclude.insert(ex.to_string()),
                                None => domains.include.insert(d.to_string()),
                            };
                        }
                    }
                    _ => return Skipped(SkipReason::UnsupportedOption(opt.to_string())),
                },
            }
        }
    }

    // `~type` alone means every other type
    if !negated_types.is_empty() {
        if type_mask.is_empty() {
            type_mask = ResourceType::ALL.into_iter().collect();
        }
        type_mask.retain(|t| !negated_types.contains(t));
        if type_mask.is_empty() {
            return Skipped(SkipReason::UnsupportedOption(options.unwrap_or_default().to_string()));
        }
    }

    if pattern.len() >= 2 && pattern.starts_with('/') && pattern.ends_with('/') {
        return Skipped(SkipReason::Regex);
    }

    let start = if let Some(rest) = pattern.strip_prefix("||") {
        pattern = rest;
        StartAnchor::Domain
    } else if let Some(rest) = pattern.strip_prefix('|') {
        pattern = rest;
        StartAnchor::Start
    } else {
        StartAnchor::None
    };
    let end_anchor = match pattern.strip_suffix('|') {
        Some(rest) => {
            pattern = rest;
            true
        }
        None => false,
    };

    ParsedLine::Rule(FilterRule {
        kind,
        start,
        end_anchor,
        pattern: tokenize(&pattern.to_ascii_lowercase()),
        type_mask,
        party,
        domains,
        raw: raw.to_string(),
    })
}

fn option_types(opt: &str) -> Option<&'static [ResourceType]> {
    use ResourceType::*;
    Some(match opt {
        "script" => &[Script],
        "image" => &[Image],
        "stylesheet" => &[Stylesheet],
        "xhr" | "xmlhttprequest" => &[Xhr, Fetch],
        "subdocument" => &[Subdocument],
        "document" => &[Document],
        "font" => &[Font],
        "media" => &[Media],
        "websocket" => &[Websocket],
        "other" => &[Other],
        _ => return None,
    })
}

fn tokenize(pattern: &str) -> Vec<PatternToken> {
    let mut tokens = Vec::new();
    let mut lit = String::new();
    for c in pattern.chars() {
        let special = match c {
            '*' => Some(PatternToken::Wildcard),
            '^' => Some(PatternToken::Separator),
            _ => None,
        };
        match special {
            Some(tok) => {
                if !lit.is_empty() {
                    tokens.push(PatternToken::Literal(std::mem::take(&mut lit)));
                }
                if !(tok == PatternToken::Wildcard && tokens.last() == Some(&PatternToken::Wildcard)) {
                    tokens.push(tok);
                }
            }
            None => lit.push(c),
        }
    }
    if !lit.is_empty() {
        tokens.push(PatternToken::Literal(lit));
    }
    tokens
}

fn is_separator(b: u8) -> bool {
    !(b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.' | b'%'))
}

/// A request prepared once for matching against many rules.
#[derive(Debug, Clone)]
pub struct PreparedRequest {
    url: String,
    host_start: usize,
    host_end: usize,
    document_host: String,
    rtype: ResourceType,
    third_party: bool,
}

impl PreparedRequest {
    pub fn new(
        request_url: &str,
        document_url: &str,
        rtype: ResourceType,
        third_party: bool,
    ) -> Result<Self, FilterError> {
        let req = Url::parse(request_url)
            .ok()
            .filter(|u| u.host_str().is_some())
            .ok_or_else(|| FilterError::InvalidUrl(request_url.to_string()))?;
        let doc = Url::parse(document_url)
            .ok()
            .and_then(|u| u.host_str().map(str::to_ascii_lowercase))
            .ok_or_else(|| FilterError::InvalidUrl(document_url.to_string()))?;
        let url = req.as_str().to_ascii_lowercase();
        let host = req.host_str().unwrap_or_default().to_ascii_lowercase();
        let after_scheme = url.find("://").map(|i| i + 3).unwrap_or(0);
        let host_start = url[after_scheme..]
            .find(host.as_str())
            .map(|i| after_scheme + i)
            .unwrap_or(after_scheme);
        Ok(PreparedRequest {
            host_end: host_start + host.len(),
            host_start,
            url,
            document_host: doc.trim_start_matches('[').trim_end_matches(']').to_string(),
            rtype,
            third_party,
        })
    }
}

impl FilterRule {
    pub fn matches(&self, req: &PreparedRequest) -> bool {
        if !self.type_mask.is_empty() && !self.type_mask.contains(&req.rtype) {
            return false;
        }
        match self.party {
            Party::ThirdOnly if !req.third_party => return false,
            Party::FirstOnly if req.third_party => return false,
            _ => {}
        }
        if !self.domains.allows(&req.document_host) {
            return false;
        }
        self.matches_url(req)
    }

    fn matches_url(&self, req: &PreparedRequest) -> bool {
        let url = req.url.as_bytes();
        let len = url.len();
        let mut reach = vec![false; len + 1];
        match self.start {
            StartAnchor::Start => reach[0] = true,
            StartAnchor::None => reach.iter_mut().for_each(|r| *r = true),
            StartAnchor::Domain => {
                reach[req.host_start] = true;
                for p in req.host_start + 1..req.host_end {
                    if url[p - 1] == b'.' {
                        reach[p] = true;
                    }
                }
            }
        }
        for tok in &self.pattern {
            let mut next = vec![false; len + 1];
            match tok {
                PatternToken::Literal(lit) => {
                    let lit = lit.as_bytes();
                    for p in 0..=len {
                        if reach[p] && url[p..].starts_with(lit) {
                            next[p + lit.len()] = true;
                        }
                    }
                }
                PatternToken::Separator => {
                    for p in 0..len {
                        if reach[p] && is_separator(url[p]) {
                            next[p + 1] = true;
                        }
                    }
                    if reach[len] {
                        next[len] = true;
                    }
                }
                PatternToken::Wildcard => {
                    if let Some(first) = reach.iter().position(|&r| r) {
                        next[first..].iter_mut().for_each(|r| *r = true);
                    }
                }
            }
            reach = next;
            if !reach.iter().any(|&r| r) {
                return false;
            }
        }
        if self.end_anchor {
            reach[len]
        } else {
            reach.iter().any(|&r| r)
        }
    }

    /// First 8 bytes of the longest literal run, when that run is long enough.
    fn index_token(&self) -> Option<[u8; TOKEN_LEN]> {
        self.pattern
            .iter()
            .filter_map(|t| match t {
                PatternToken::Literal(l) => Some(l.as_bytes()),
                _ => None,
            })
            .filter(|l| l.len() >= TOKEN_LEN)
            .max_by_key(|l| l.len())
            .map(|l| l[..TOKEN_LEN].try_into().expect("length checked"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification<'a> {
    Matched(&'a FilterRule),
    Excepted { block: &'a FilterRule, exception: &'a FilterRule },
    None,
}

impl Classification<'_> {
    pub fn is_matched(&self) -> bool {
        matches!(self, Classification::Matched(_))
    }
}

#[derive(Debug, Clone, Default)]
struct RuleIndex {
    by_token: HashMap<[u8; TOKEN_LEN], Vec<u32>>,
    fallback: Vec<u32>,
}

impl RuleIndex {
    fn build(rules: &[FilterRule]) -> Self {
        let mut index = RuleIndex::default();
        for (i, rule) in rules.iter().enumerate() {
            match rule.index_token() {
                Some(tok) => index.by_token.entry(tok).or_default().push(i as u32),
                None => index.fallback.push(i as u32),
            }
        }
        index
    }

    fn candidates(&self, url: &[u8]) -> Vec<u32> {
        let mut out = self.fallback.clone();
        if !self.by_token.is_empty() {
            for window in url.windows(TOKEN_LEN) {
                let key: [u8; TOKEN_LEN] = window.try_into().expect("window length");
                if let Some(ids) = self.by_token.get(&key) {
                    out.extend_from_slice(ids);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    fn indexed_len(&self) -> usize {
        self.by_token.values().map(Vec::len).sum()
    }
}

/// Counts of parsed rules and skipped lines by reason.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseSummary {
    pub block_rules: usize,
    pub exception_rules: usize,
    pub skipped: BTreeMap<String, usize>,
    pub unsupported_options: BTreeMap<String, usize>,
}

impl fmt::Display for ParseSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} block, {} exception", self.block_rules, self.exception_rules)?;
        for (reason, n) in &self.skipped {
            write!(f, ", {n} skipped ({reason})")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct FilterSet {
    block: Vec<FilterRule>,
    exception: Vec<FilterRule>,
    block_index: RuleIndex,
    exception_index: RuleIndex,
    summary: ParseSummary,
}

fn first_match<'a>(rules: &'a [FilterRule], index: &RuleIndex, req: &PreparedRequest) -> Option<&'a FilterRule> {
    index
        .candidates(req.url.as_bytes())
        .into_iter()
        .map(|i| &rules[i as usize])
        .find(|r| r.matches(req))
}

impl FilterSet {
    pub fn from_lines<I, S>(lines: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut block = Vec::new();
        let mut exception = Vec::new();
        let mut summary = ParseSummary::default();
        for line in lines {
            match parse_rule(line.as_ref()) {
                ParsedLine::Rule(rule) => match rule.kind {
                    RuleKind::Block => block.push(rule),
                    RuleKind::Exception => exception.push(rule),
                },
                ParsedLine::Skipped(reason) => {
                    if let SkipReason::UnsupportedOption(opt) = &reason {
                        let name = opt.split('=').next().unwrap_or(opt).to_ascii_lowercase();
                        *summary.unsupported_options.entry(name).or_default() += 1;
                    }
                    *summary.skipped.entry(reason.to_string()).or_default() += 1;
                }
            }
        }
        summary.block_rules = block.len();
        summary.exception_rules = exception.len();
        FilterSet {
            block_index: RuleIndex::build(&block),
            exception_index: RuleIndex::build(&exception),
            block,
            exception,
            summary,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FilterError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|source| FilterError::Io { path: path.display().to_string(), source })?;
        Ok(Self::from_lines(text.lines()))
    }

    pub fn summary(&self) -> &ParseSummary {
        &self.summary
    }

    pub fn block_rules(&self) -> &[FilterRule] {
        &self.block
    }

    pub fn exception_rules(&self) -> &[FilterRule] {
        &self.exception
    }

    pub fn is_empty(&self) -> bool {
        self.block.is_empty() && self.exception.is_empty()
    }

    /// (indexed, fallback) rule counts over block and exception rules.
    pub fn index_partition(&self) -> (usize, usize) {
        (
            self.block_index.indexed_len() + self.exception_index.indexed_len(),
            self.block_index.fallback.len() + self.exception_index.fallback.len(),
        )
    }

    pub fn classify(
        &self,
        request_url: &str,
        document_url: &str,
        rtype: ResourceType,
        third_party: bool,
    ) -> Result<Classification<'_>, FilterError> {
        let req = PreparedRequest::new(request_url, document_url, rtype, third_party)?;
        Ok(self.classify_prepared(&req))
    }

    pub fn classify_prepared(&self, req: &PreparedRequest) -> Classification<'_> {
        if self.block.is_empty() {
            return Classification::None;
        }
        let Some(block) = first_match(&self.block, &self.block_index, req) else {
            return Classification::None;
        };
        match first_match(&self.exception, &self.exception_index, req) {
            Some(exception) => Classification::Excepted { block, exception },
            None => Classification::Matched(block),
        }
    }

    /// Same decision as [`FilterSet::classify`], by trying every rule.
    pub fn classify_scan(
        &self,
        request_url: &str,
        document_url: &str,
        rtype: ResourceType,
        third_party: bool,
    ) -> Result<Classification<'_>, FilterError> {
        let req = PreparedRequest::new(request_url, document_url, rtype, third_party)?;
        let Some(block) = self.block.iter().find(|r| r.matches(&req)) else {
            return Ok(Classification::None);
        };
        Ok(match self.exception.iter().find(|r| r.matches(&req)) {
            Some(exception) => Classification::Excepted { block, exception },
            None => Classification::Matched(block),
        })
    }
}
