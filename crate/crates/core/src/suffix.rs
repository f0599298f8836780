//! Public-suffix lookups: registrable domain (eTLD+1) computation and
//! third-party determination.
//!
//! Implements the standard algorithm: the prevailing rule is an exception
//! rule if one matches, otherwise the matching rule with the most labels,
//! otherwise the implicit `*` rule. The registrable domain is the public
//! suffix plus one more label.

use std::collections::HashSet;
use std::fs;
use std::net::{IpAddr, Ipv6Addr};
use std::path::Path;

use thiserror::Error;

/// A trimmed public-suffix list covering common TLDs; see `data/`.
pub const BUNDLED_LIST: &str = include_str!("../../../data/public_suffix_list.dat");

#[derive(Debug, Error)]
pub enum SuffixError {
    #[error("reading suffix list {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("suffix list line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid hostname `{0}`")]
    InvalidHostname(String),
}

#[derive(Debug, Clone, Default)]
pub struct SuffixTable {
    exact: HashSet<String>,
    // keyed by the part after `*.`
    wildcard: HashSet<String>,
    // keyed by the rule without its `!`
    exception: HashSet<String>,
    rules: usize,
}

impl SuffixTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SuffixError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|source| SuffixError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_LIST).expect("bundled suffix list parses")
    }

    pub fn parse(text: &str) -> Result<Self, SuffixError> {
        let mut table = SuffixTable::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with("//") {
                continue;
            }
            let rule = line.split_whitespace().next().unwrap_or_default().to_lowercase();
            table.add_rule(&rule).map_err(|reason| SuffixError::Parse { line: idx + 1, reason })?;
        }
        Ok(table)
    }

    fn add_rule(&mut self, rule: &str) -> Result<(), String> {
        let (exception, body) = match rule.strip_prefix('!') {
            Some(rest) => (true, rest),
            None => (false, rule),
        };
        let (wild, body) = match body.strip_prefix("*.") {
            Some(rest) => (true, rest),
            None => (false, body),
        };
        if body.is_empty() || body.split('.').any(str::is_empty) {
            return Err(format!("empty label in rule `{rule}`"));
        }
        if body.contains('*') || body.contains('!') {
            return Err(format!("misplaced `*` or `!` in rule `{rule}`"));
        }
        if exception && wild {
            return Err(format!("exception rule cannot be a wildcard: `{rule}`"));
        }
        if exception && !body.contains('.') {
            return Err(format!("exception rule needs at least two labels: `{rule}`"));
        }
        let set = if exception {
            &mut self.exception
        } else if wild {
            &mut self.wildcard
        } else {
            &mut self.exact
        };
        set.insert(body.to_string());
        self.rules += 1;
        Ok(())
    }

    /// Number of rules parsed (comments and blank lines excluded).
    pub fn len(&self) -> usize {
        self.rules
    }

    pub fn is_empty(&self) -> bool {
        self.rules == 0
    }

    /// Length in labels of the public suffix of `labels` (a validated host).
    fn suffix_len(&self, host: &str) -> usize {
        let labels: Vec<&str> = host.split('.').collect();
        let n = labels.len();
        let tail = |k: usize| labels[n - k..].join(".");

        for k in (2..=n).rev() {
            if self.exception.contains(&tail(k)) {
                return k - 1;
            }
        }
        let mut best = 1;
        for k in 1..=n {
            if self.exact.contains(&tail(k)) {
                best = best.max(k);
            }
            if k >= 2 && self.wildcard.contains(&tail(k - 1)) {
                best = best.max(k);
            }
        }
        best
    }

    /// Public suffix of `host`.
    pub fn public_suffix(&self, host: &str) -> Result<String, SuffixError> {
        let host = normalize_host(host)?;
        if is_ip_literal(&host) {
            return Ok(host);
        }
        let k = self.suffix_len(&host);
        Ok(last_labels(&host, k))
    }

    /// Registrable domain, or `None` when the host is itself a public suffix.
    pub fn registrable_domain(&self, host: &str) -> Result<Option<String>, SuffixError> {
        let host = normalize_host(host)?;
        if is_ip_literal(&host) {
            return Ok(Some(host));
        }
        let k = self.suffix_len(&host);
        let n = host.split('.').count();
        Ok((n > k).then(|| last_labels(&host, k + 1)))
    }

    /// eTLD+1 of `host`. IP literals come back unchanged; a host that is
    /// itself a public suffix is its own grouping key.
    pub fn etld1(&self, host: &str) -> Result<String, SuffixError> {
        let normalized = normalize_host(host)?;
        Ok(self.registrable_domain(&normalized)?.unwrap_or(normalized))
    }

    /// True when the two hosts belong to different registrable domains.
    pub fn is_third_party(&self, request_host: &str, document_host: &str) -> Result<bool, SuffixError> {
        Ok(self.etld1(request_host)? != self.etld1(document_host)?)
    }

    /// eTLD+1 of the host of an absolute URL.
    pub fn etld1_of_url(&self, url: &url::Url) -> Result<String, SuffixError> {
        let host = url_host(url).ok_or_else(|| SuffixError::InvalidHostname(url.to_string()))?;
        self.etld1(&host)
    }
}

/// Host of a URL in the form [`SuffixTable`] expects (IPv6 without brackets).
pub fn url_host(url: &url::Url) -> Option<String> {
    match url.host()? {
        url::Host::Domain(d) => Some(d.to_string()),
        url::Host::Ipv4(ip) => Some(ip.to_string()),
        url::Host::Ipv6(ip) => Some(ip.to_string()),
    }
}

fn last_labels(host: &str, k: usize) -> String {
    let labels: Vec<&str> = host.split('.').collect();
    labels[labels.len().saturating_sub(k)..].join(".")
}

pub fn is_ip_literal(host: &str) -> bool {
    host.parse::<IpAddr>().is_ok()
}

fn normalize_host(host: &str) -> Result<String, SuffixError> {
    let invalid = || SuffixError::InvalidHostname(host.to_string());
    if let Some(inner) = host.strip_prefix('[').and_then(|h| h.strip_suffix(']')) {
        return inner.parse::<Ipv6Addr>().map(|ip| ip.to_string()).map_err(|_| invalid());
    }
    if is_ip_literal(host) {
        return Ok(host.to_string());
    }
    let host = host.to_ascii_lowercase();
    if host.is_empty() || host.len() > 253 {
        return Err(invalid());
    }
    for label in host.split('.') {
        let ok = !label.is_empty()
            && label.len() <= 63
            && label.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
            && !label.starts_with('-')
            && !label.ends_with('-');
        if !ok {
            return Err(invalid());
        }
    }
    Ok(host)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(text: &str) -> SuffixTable {
        SuffixTable::parse(text).unwrap()
    }

    #[test]
    fn load_counts_rules() {
        let t = table("com\nco.uk\n*.ck\n!www.ck\n");
        assert_eq!(t.len(), 4);
        assert!(table("").is_empty());
        assert!(table("// only a comment\n\n// another\n").is_empty());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match SuffixTable::parse("com\n// x\nco..uk\n") {
            Err(SuffixError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(SuffixTable::parse("a.*.b").is_err());
        assert!(SuffixTable::parse("!*.ck").is_err());
    }

    #[test]
    fn etld1_examples() {
        let t = table("com\nco.uk\nuk\n*.ck\n!www.ck\n");
        assert_eq!(t.etld1("foo.bar.co.uk").unwrap(), "bar.co.uk");
        assert_eq!(t.etld1("example.com").unwrap(), "example.com");
        assert_eq!(t.etld1("a.b.example.ck").unwrap(), "b.example.ck");
        assert_eq!(t.etld1("a.www.ck").unwrap(), "www.ck");
        // unmatched hosts fall back to the implicit `*` rule
        assert_eq!(t.etld1("x.y.example").unwrap(), "y.example");
        assert_eq!(table("").etld1("a.b.c").unwrap(), "b.c");
    }

    #[test]
    fn ip_literals_pass_through() {
        let t = SuffixTable::bundled();
        assert_eq!(t.etld1("192.168.1.20").unwrap(), "192.168.1.20");
        assert_eq!(t.etld1("[::1]").unwrap(), "::1");
        assert!(t.is_third_party("cdn.example.com", "10.0.0.1").unwrap());
        assert!(!t.is_third_party("10.0.0.1", "10.0.0.1").unwrap());
    }

    #[test]
    fn invalid_hosts_are_rejected() {
        let t = SuffixTable::bundled();
        for bad in ["", ".com", "a..b", "exa mple.com", "-a.com", "ünï.com"] {
            assert!(matches!(t.etld1(bad), Err(SuffixError::InvalidHostname(_))), "{bad}");
        }
    }

    #[test]
    fn third_party_examples() {
        let t = table("com\nnet\nco.uk\nuk\n");
        assert!(!t.is_third_party("cdn.example.com", "www.example.com").unwrap());
        assert!(t.is_third_party("tracker.net", "example.com").unwrap());
        assert!(t.is_third_party("a.co.uk", "b.co.uk").unwrap());
    }

    fn host_strategy() -> impl Strategy<Value = String> {
        let label = prop::sample::select(vec!["a", "b", "www", "cdn", "example", "co", "uk", "com", "ck", "jp", "kobe", "city"]);
        prop::collection::vec(label, 1..5).prop_map(|ls| ls.join("."))
    }

    proptest! {
        #[test]
        fn etld1_is_idempotent(host in host_strategy()) {
            let t = SuffixTable::bundled();
            let once = t.etld1(&host).unwrap();
            prop_assert_eq!(t.etld1(&once).unwrap(), once.clone());
        }

        #[test]
        fn third_party_is_a_partition(a in host_strategy(), b in host_strategy(), c in host_strategy()) {
            let t = SuffixTable::bundled();
            let tp = |x: &str, y: &str| t.is_third_party(x, y).unwrap();
            prop_assert_eq!(tp(&a, &b), tp(&b, &a));
            prop_assert!(!tp(&a, &a));
            if !tp(&a, &b) && !tp(&b, &c) {
                prop_assert!(!tp(&a, &c));
            }
            prop_assert_eq!(tp(&a, &b), t.etld1(&a).unwrap() != t.etld1(&b).unwrap());
        }
    }
}
