//! CAPTCHA presence detection from captured DOM and request URLs.
//!
//! Rules are a reduced three-field form of Wappalyzer technology rules:
//! patterns matched against the DOM, against every request URL, and against
//! script request URLs only. All patterns are case-insensitive regexes.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use regex::{Regex, RegexBuilder};
use serde::Deserialize;
use thiserror::Error;

use crate::model::{RequestRecord, ResourceType};

pub const BUNDLED_RULES: &str = include_str!("../../../data/captcha_rules.json");

#[derive(Debug, Error)]
pub enum CaptchaError {
    #[error("reading captcha rules {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("captcha rules are not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad pattern for provider {provider}: {source}")]
    BadPattern {
        provider: String,
        #[source]
        source: regex::Error,
    },
    #[error("provider {0} has no patterns")]
    EmptyRule(String),
}

#[derive(Debug, Deserialize)]
struct RawRule {
    provider: String,
    #[serde(default)]
    html: Vec<String>,
    #[serde(default)]
    url: Vec<String>,
    #[serde(default)]
    script: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct DetectionRule {
    pub provider: String,
    pub html: Vec<Regex>,
    pub url: Vec<Regex>,
    pub script: Vec<Regex>,
}

impl DetectionRule {
    fn matches<'a>(&self, dom: &str, mut requests: impl Iterator<Item = (&'a str, ResourceType)>) -> bool {
        self.html.iter().any(|p| p.is_match(dom))
            || requests.any(|(url, rtype)| {
                self.url.iter().any(|p| p.is_match(url))
                    || (rtype == ResourceType::Script && self.script.iter().any(|p| p.is_match(url)))
            })
    }
}

pub fn parse_detection_rules(json: &str) -> Result<Vec<DetectionRule>, CaptchaError> {
    let raw: Vec<RawRule> = serde_json::from_str(json)?;
    raw.into_iter()
        .map(|r| {
            if r.html.is_empty() && r.url.is_empty() && r.script.is_empty() {
                return Err(CaptchaError::EmptyRule(r.provider));
            }
            let compile = |pats: &[String]| -> Result<Vec<Regex>, CaptchaError> {
                pats.iter()
                    .map(|p| {
                        RegexBuilder::new(p).case_insensitive(true).build().map_err(|source| {
                            CaptchaError::BadPattern { provider: r.provider.clone(), source }
                        })
                    })
                    .collect()
            };
            Ok(DetectionRule {
                html: compile(&r.html)?,
                url: compile(&r.url)?,
                script: compile(&r.script)?,
                provider: r.provider,
            })
        })
        .collect()
}

pub fn load_detection_rules(path: impl AsRef<Path>) -> Result<Vec<DetectionRule>, CaptchaError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|source| CaptchaError::Io { path: path.display().to_string(), source })?;
    parse_detection_rules(&text)
}

pub fn bundled_rules() -> Vec<DetectionRule> {
    parse_detection_rules(BUNDLED_RULES).expect("bundled captcha rules are valid")
}

/// Providers whose patterns match the DOM or any applicable request.
pub fn detect(dom_html: &str, requests: &[RequestRecord], rules: &[DetectionRule]) -> BTreeSet<String> {
    detect_urls(
        dom_html,
        requests.iter().map(|r| (r.request_url.as_str(), r.resource_type)),
        rules,
    )
}

/// [`detect`] over bare `(url, type)` pairs.
pub fn detect_urls<'a, I>(dom_html: &str, requests: I, rules: &[DetectionRule]) -> BTreeSet<String>
where
    I: IntoIterator<Item = (&'a str, ResourceType)>,
    I::IntoIter: Clone,
{
    let requests = requests.into_iter();
    rules
        .iter()
        .filter(|r| r.matches(dom_html, requests.clone()))
        .map(|r| r.provider.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RequestOutcome;

    fn req(url: &str, rtype: ResourceType) -> RequestRecord {
        RequestRecord {
            visit_id: "v".into(),
            request_url: url.into(),
            resource_type: rtype,
            frame_id: "f0".into(),
            document_url: "http://a.com/".into(),
            outcome: RequestOutcome::Failed { error: "x".into() },
            is_third_party: true,
        }
    }

    const TWO: &str = r#"[
        {"provider": "reCAPTCHA", "html": ["g-recaptcha"], "script": ["recaptcha/api\\.js"]},
        {"provider": "hCaptcha", "html": ["h-captcha"], "url": ["hcaptcha\\.com/"]}
    ]"#;

    #[test]
    fn loads_rules() {
        assert_eq!(parse_detection_rules(TWO).unwrap().len(), 2);
        assert!(bundled_rules().len() >= 3);
    }

    #[test]
    fn rejects_empty_and_bad_rules() {
        let empty = r#"[{"provider": "Nothing", "html": [], "url": []}]"#;
        assert!(matches!(parse_detection_rules(empty), Err(CaptchaError::EmptyRule(p)) if p == "Nothing"));
        let bad = r#"[{"provider": "Broken", "html": ["(unclosed"]}]"#;
        assert!(matches!(
            parse_detection_rules(bad),
            Err(CaptchaError::BadPattern { provider, .. }) if provider == "Broken"
        ));
    }

    #[test]
    fn pattern_is_a_regex() {
        let rules = parse_detection_rules(TWO).unwrap();
        let hit = detect("", &[req("https://www.google.com/recaptcha/api.js", ResourceType::Script)], &rules);
        assert_eq!(hit, BTreeSet::from(["reCAPTCHA".to_string()]));
        // script-only patterns ignore non-script requests
        let miss = detect("", &[req("https://www.google.com/recaptcha/api.js", ResourceType::Image)], &rules);
        assert!(miss.is_empty());
    }

    #[test]
    fn detects_from_dom() {
        let rules = parse_detection_rules(TWO).unwrap();
        let dom = r#"<form><div class="G-RECAPTCHA" data-sitekey="k"></div></form>"#;
        assert_eq!(detect(dom, &[], &rules), BTreeSet::from(["reCAPTCHA".to_string()]));
        assert!(detect("", &[], &rules).is_empty());
    }

    #[test]
    fn reports_every_matching_provider() {
        let rules = parse_detection_rules(TWO).unwrap();
        let dom = r#"<div class="g-recaptcha"></div><div class="h-captcha"></div>"#;
        assert_eq!(detect(dom, &[], &rules).len(), 2);
    }

    #[test]
    fn more_evidence_never_removes_providers() {
        let rules = bundled_rules();
        let base = detect(r#"<div class="h-captcha">"#, &[], &rules);
        let more = detect(
            r#"<div class="h-captcha"> extra text"#,
            &[req("https://challenges.cloudflare.com/turnstile/v0/api.js", ResourceType::Script)],
            &rules,
        );
        assert!(base.is_subset(&more));
        assert_eq!(more.len(), 2);
    }
}
