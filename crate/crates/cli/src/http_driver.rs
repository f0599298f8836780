//! A network driver without a browser engine: each visit is a plain HTTP
//! fetch of the document. No scripts run, so there are no subresource
//! loads, no frames beyond the top document and no event-triggered links;
//! interaction just waits out the dwell time. Good enough to exercise the
//! distributed pipeline against live hosts.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use async_trait::async_trait;
use mvp_core::clock::Clock;
use mvp_core::detrand::DetRand;
use mvp_core::driver::{
    BrowserSession, Capture, CapturedFrame, CapturedRequest, DriverError, FetchDriver, Navigation, SessionContext,
    Snapshot,
};
use mvp_core::model::{AbortCause, BrowserProfile, Millis, NavigationEvent, RequestOutcome, ResourceType, VisitEvent};
use regex::Regex;
use sha2::{Digest, Sha256};

const UA_LINUX: &str =
    "Mozilla/5.0 (X11; Linux x86_64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/73.0.3683.86 Safari/537.36";
const UA_HEADLESS: &str =
    "Mozilla/5.0 (X11; Linux x86_64) AppleWebKit/537.36 (KHTML, like Gecko) HeadlessChrome/73.0.3683.86 Safari/537.36";
const UA_WINDOWS: &str =
    "Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/73.0.3683.86 Safari/537.36";

fn user_agent(p: BrowserProfile) -> &'static str {
    match p.code() {
        "hl" => UA_HEADLESS,
        "hw" => UA_WINDOWS,
        _ => UA_LINUX,
    }
}

fn anchor_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"(?is)<a\b[^>]*?\bhref\s*=\s*(?:"([^"]*)"|'([^']*)'|([^\s>]+))"#).unwrap())
}

fn base_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"(?is)<base\b[^>]*?\bhref\s*=\s*(?:"([^"]*)"|'([^']*)'|([^\s>]+))"#).unwrap())
}

/// Absolute anchor targets of `html`, in document order, resolved against
/// its `<base href>` if any, else the document URL.
pub fn extract_anchors(html: &str, document_url: &str) -> Vec<String> {
    let Ok(doc) = url::Url::parse(document_url) else { return Vec::new() };
    let base = base_re()
        .captures(html)
        .and_then(|c| c.get(1).or(c.get(2)).or(c.get(3)))
        .and_then(|m| doc.join(m.as_str().trim()).ok())
        .unwrap_or(doc);
    anchor_re()
        .captures_iter(html)
        .filter_map(|c| c.get(1).or(c.get(2)).or(c.get(3)))
        .filter_map(|m| base.join(m.as_str().trim()).ok())
        .filter(|u| matches!(u.scheme(), "http" | "https"))
        .map(String::from)
        .collect()
}

pub struct HttpDriver {
    clock: Arc<dyn Clock>,
    /// Proxy URL for the VP's tunnel (e.g. `socks5h://127.0.0.1:9050`).
    tunnel: Option<String>,
}

impl HttpDriver {
    pub fn new(clock: Arc<dyn Clock>, tunnel: Option<String>) -> Self {
        HttpDriver { clock, tunnel }
    }
}

#[async_trait]
impl FetchDriver for HttpDriver {
    async fn open_session(&self, ctx: SessionContext<'_>) -> Result<Box<dyn BrowserSession>, DriverError> {
        let mut b = reqwest::Client::builder()
            .user_agent(user_agent(ctx.config.profile))
            .redirect(reqwest::redirect::Policy::limited(10))
            .connect_timeout(Duration::from_secs(30));
        if let Some(t) = &self.tunnel {
            b = b.proxy(reqwest::Proxy::all(t).map_err(|e| DriverError(format!("tunnel {t}: {e}")))?);
        }
        let client = b.build().map_err(|e| DriverError(e.to_string()))?;
        Ok(Box::new(HttpSession {
            client,
            clock: Arc::clone(&self.clock),
            html: String::new(),
            landed: None,
            capture: Capture::default(),
        }))
    }
}

struct HttpSession {
    client: reqwest::Client,
    clock: Arc<dyn Clock>,
    html: String,
    landed: Option<String>,
    capture: Capture,
}

fn classify(e: reqwest::Error) -> AbortCause {
    if e.is_timeout() {
        AbortCause::NavigationTimeout
    } else if e.is_connect() {
        // the worker maps this onto the VP's connectivity cause
        AbortCause::DnsResolveFailed
    } else {
        AbortCause::Other(format!("net::{}", e.without_url()))
    }
}

#[async_trait]
impl BrowserSession for HttpSession {
    async fn navigate(&mut self, url: &str) -> Result<Navigation, AbortCause> {
        let now = |c: &Arc<dyn Clock>| -> Millis { c.now_ms() };
        let resp = match self.client.get(url).send().await {
            Ok(r) => r,
            Err(e) => {
                let e = e.without_url();
                self.capture.requests.push(CapturedRequest {
                    url: url.into(),
                    resource_type: ResourceType::Document,
                    frame_id: "main".into(),
                    document_url: url.into(),
                    outcome: RequestOutcome::Failed { error: e.to_string() },
                });
                return Err(classify(e));
            }
        };
        let status = resp.status().as_u16();
        let landed = resp.url().to_string();
        let headers: BTreeMap<String, String> = resp
            .headers()
            .iter()
            .filter_map(|(k, v)| Some((k.as_str().to_string(), v.to_str().ok()?.to_string())))
            .collect();
        let body = resp.bytes().await.map_err(classify)?;
        self.capture.requests.push(CapturedRequest {
            url: landed.clone(),
            resource_type: ResourceType::Document,
            frame_id: "main".into(),
            document_url: landed.clone(),
            outcome: RequestOutcome::Response {
                status,
                headers,
                body_hash: hex::encode(Sha256::digest(&body)),
                body_size: body.len() as u64,
            },
        });
        let at = now(&self.clock);
        let mut nav = Vec::new();
        if landed != url {
            nav.push(NavigationEvent { timestamp: at, url: url.into() });
        }
        nav.push(NavigationEvent { timestamp: at, url: landed.clone() });
        self.capture.frames.push(CapturedFrame {
            frame_id: "main".into(),
            parent_frame_id: None,
            frame_url: landed.clone(),
            navigation_events: nav,
        });
        self.capture.events.push(VisitEvent { at, event: "load".into() });
        if status >= 400 {
            return Err(AbortCause::Other(format!("http-{status}")));
        }
        self.html = String::from_utf8_lossy(&body).into_owned();
        self.landed = Some(landed.clone());
        Ok(Navigation { landed_url: landed })
    }

    async fn interact(&mut self, _rng: &mut DetRand, end: Millis) {
        self.clock.sleep_until(end).await;
    }

    async fn snapshot(&mut self) -> Snapshot {
        let base = self.landed.clone().unwrap_or_default();
        Snapshot { anchor_links: extract_anchors(&self.html, &base), dom_html: std::mem::take(&mut self.html) }
    }

    async fn close(&mut self) {}

    fn take_capture(&mut self) -> Capture {
        std::mem::take(&mut self.capture)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors_resolve_against_the_landed_url() {
        let html = r#"<a href="/a">x</a> <A class=b HREF='b.html'>y</A> <a href=https://o.org/c>z</a>
            <a href="mailto:x@y.z">m</a> <a name="top">no href</a>"#;
        assert_eq!(
            extract_anchors(html, "https://ex.com/dir/page"),
            ["https://ex.com/a", "https://ex.com/dir/b.html", "https://o.org/c"]
        );
    }

    #[test]
    fn fixture_page_anchors() {
        let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/instrumentation/");
        let html = std::fs::read_to_string(format!("{dir}event-links-page.html")).unwrap();
        let expected: Vec<String> =
            serde_json::from_str(&std::fs::read_to_string(format!("{dir}expected-anchors.json")).unwrap()).unwrap();
        assert_eq!(extract_anchors(&html, "http://fixture.test/index.html"), expected);
    }

    #[test]
    fn unreachable_host_is_a_connectivity_failure() {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async {
            let d = HttpDriver::new(Arc::new(mvp_core::clock::WallClock), None);
            let cfg = mvp_core::model::CrawlConfig::new(
                "localhost",
                1,
                BrowserProfile::HEADLESS,
                mvp_core::model::VantagePoint::Cloud,
                1,
                3,
                2,
            );
            let mut s = d.open_session(SessionContext { config: &cfg, ordinal: 1 }).await.unwrap();
            // port 9 (discard) is closed on any sane test host
            let err = s.navigate("http://127.0.0.1:9/").await.unwrap_err();
            assert_eq!(err, AbortCause::DnsResolveFailed);
            assert_eq!(s.take_capture().requests.len(), 1);
        });
    }
}
